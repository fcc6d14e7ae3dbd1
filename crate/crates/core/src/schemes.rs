//! The training protocols: centralized, federated (plus FedAvg, FedProx,
//! and the partial-participation baseline), and the hybrid schemes where
//! computation-limited clients upload data instead of gradients.
//!
//! One round-synchronous engine drives every scheme so the degenerate cases
//! coincide bit for bit: a hybrid run with no inactive clients IS the
//! federated run, a block size covering the whole dataset IS the plain
//! hybrid run, and so on.
//!
//! Round structure for the model-exchange schemes:
//!   1. noise budgets are fixed from the round-start global model norm,
//!   2. active clients take their local step(s) on the regularized loss,
//!   3. they upload through the noisy channel (noise, then quantization),
//!   4. dataset traffic owed by inactive clients is charged,
//!   5. the server steps each inactive client's parameters on the data it
//!      has received so far (nothing arrives before round 1),
//!   6. all participants are aggregated by sample count,
//!   7. active clients receive the new model over their noisy downlink.
//! Inactive clients are never broadcast to; their server-side parameters
//! restart from the aggregate each round.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{
    aggregate, aggregated_uplink_variance, link_noise_variance, paper_uplink_variance, perturb,
    quantize, LinkSpec, NoiseBudget, VarianceMode,
};
use crate::comms::{Direction, OverheadLedger, Phase};
use crate::data::{add_dataset_noise_with_var, dataset_noise_variance, dataset_symbols, Dataset, Partition};
use crate::error::{config_err, Result};
use crate::model::{
    bits_hash, forward, init_glorot, loss, regularized_gradient, Batch, LossKind, ModelArch,
    OutputHead, ParameterVector,
};
use crate::rng::RngHub;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Cl,
    Fl,
    Fedavg,
    Fedprox,
    FlPartial,
    Hfcl,
    HfclIcpc,
    HfclSdt,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Cl => "cl",
            Scheme::Fl => "fl",
            Scheme::Fedavg => "fedavg",
            Scheme::Fedprox => "fedprox",
            Scheme::FlPartial => "fl_partial",
            Scheme::Hfcl => "hfcl",
            Scheme::HfclIcpc => "hfcl_icpc",
            Scheme::HfclSdt => "hfcl_sdt",
        }
    }

    /// Schemes with a server-trained inactive side.
    pub fn is_hybrid(self) -> bool {
        matches!(self, Scheme::Hfcl | Scheme::HfclIcpc | Scheme::HfclSdt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Active,
    Inactive,
}

/// One client's role, data shard, link quality, and uplink payload size.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientSpec {
    pub id: usize,
    pub role: Role,
    /// Sample indices into the training dataset.
    pub data: Vec<usize>,
    pub link: LinkSpec,
    /// Symbols per upload: the parameter count for active clients, the
    /// dataset size for inactive ones.
    pub d_k: u64,
}

/// Builds the client roster for a partition: the first `inactive` clients
/// upload their datasets, the rest train locally.
pub fn build_clients(
    train: &Dataset,
    partition: &Partition,
    inactive: usize,
    params: usize,
    link: LinkSpec,
) -> Result<Vec<ClientSpec>> {
    let k = partition.num_clients();
    if inactive > k {
        return config_err(format!("{inactive} inactive clients out of {k} total"));
    }
    let mut clients = Vec::with_capacity(k);
    for (id, idx) in partition.clients.iter().enumerate() {
        if idx.is_empty() {
            return config_err(format!("client {id} has no samples"));
        }
        let role = if id < inactive { Role::Inactive } else { Role::Active };
        let d_k = match role {
            Role::Active => params as u64,
            Role::Inactive => dataset_symbols(train, idx),
        };
        clients.push(ClientSpec { id, role, data: idx.clone(), link, d_k });
    }
    Ok(clients)
}

/// Channel conventions shared by a whole run.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    /// SNR for dataset uploads; `None` keeps transmitted datasets clean.
    pub snr_data_db: Option<f64>,
    pub variance_mode: VarianceMode,
    /// Use the published closed-form aggregate variance instead of the
    /// statistically exact one when budgeting the regularizers.
    pub paper_variance_formula: bool,
}

impl Default for NoiseModel {
    fn default() -> Self {
        NoiseModel {
            snr_data_db: None,
            variance_mode: VarianceMode::PerElement,
            paper_variance_formula: false,
        }
    }
}

/// Hyperparameters for one run. Per-client link quality lives in the
/// roster (`ClientSpec::link`), not here.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    /// Communication rounds T.
    pub rounds: usize,
    pub eta0: f64,
    /// Halve the learning rate every this many rounds; 0 disables halving.
    pub eta_halving_period: usize,
    /// Minibatch size for centralized training; capped at the dataset size.
    pub minibatch: usize,
    /// Local steps per round for FedAvg, and the draw ceiling for FedProx.
    pub local_updates: usize,
    /// Dataset block size in symbols for the ICpC and SDT variants.
    pub q_symbols: u64,
    /// SDT feasibility factor: the block count must stay below gamma * T.
    pub gamma: f64,
    /// FedProx proximal weight.
    pub mu: f64,
    pub noise: NoiseModel,
    pub seed: u64,
}

impl SchemeConfig {
    /// Defaults from the experimental protocol: eta0 1e-3 halved every 30
    /// rounds, minibatch 128, one local update.
    pub fn new(scheme: Scheme, rounds: usize, seed: u64) -> Self {
        SchemeConfig {
            scheme,
            rounds,
            eta0: 1e-3,
            eta_halving_period: 30,
            minibatch: 128,
            local_updates: 1,
            q_symbols: 0,
            gamma: 0.1,
            mu: 0.0,
            noise: NoiseModel::default(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return config_err("rounds must be at least 1");
        }
        if !self.eta0.is_finite() || self.eta0 <= 0.0 {
            return config_err(format!("eta0 must be positive and finite, got {}", self.eta0));
        }
        if self.minibatch == 0 {
            return config_err("minibatch must be at least 1");
        }
        if self.local_updates == 0 {
            return config_err("local_updates must be at least 1");
        }
        if !self.gamma.is_finite() || self.gamma <= 0.0 {
            return config_err(format!("gamma must be positive and finite, got {}", self.gamma));
        }
        if !self.mu.is_finite() || self.mu < 0.0 {
            return config_err(format!("mu must be finite and nonnegative, got {}", self.mu));
        }
        Ok(())
    }
}

/// Learning rate at round t under the halving schedule.
pub fn eta_at(cfg: &SchemeConfig, t: usize) -> f64 {
    if cfg.eta_halving_period == 0 {
        cfg.eta0
    } else {
        cfg.eta0 * 0.5f64.powi((t / cfg.eta_halving_period) as i32)
    }
}

/// Snapshot of one communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub t: usize,
    /// Hash of the global model bits after aggregation.
    pub theta_hash: u64,
    /// Loss of each participant's model on its own data, in client-id order.
    pub per_client_loss: Vec<f64>,
    /// Global-model loss on the full (clean) training pool.
    pub train_loss: f64,
    pub accuracy_pct: f64,
    /// Model-exchange symbols charged during this round.
    pub uplink_symbols: u64,
    pub downlink_symbols: u64,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub ledger: OverheadLedger,
    pub final_theta: ParameterVector,
}

/// Classification accuracy in percent; argmax ties go to the lowest class.
pub fn evaluate(arch: &ModelArch, theta: &ParameterVector, testset: &Dataset) -> Result<f64> {
    if arch.output_head != OutputHead::Softmax {
        return config_err("accuracy needs a classification (softmax) head");
    }
    if arch.output_dim() != testset.num_classes {
        return config_err(format!(
            "model has {} outputs but the test set has {} classes",
            arch.output_dim(),
            testset.num_classes
        ));
    }
    if arch.input_dim() != testset.inputs.cols() {
        return config_err(format!(
            "model takes {} inputs but the test set provides {}",
            arch.input_dim(),
            testset.inputs.cols()
        ));
    }
    let pred = forward(arch, theta, &testset.inputs)?;
    let mut hits = 0usize;
    for (r, &label) in testset.labels.iter().enumerate() {
        let row = pred.row(r);
        let mut best = 0usize;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = c;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / testset.len() as f64)
}

/// `steps` gradient-descent steps on the regularized loss from `start`,
/// optionally with a proximal pull of weight mu toward an anchor.
pub fn local_update(
    arch: &ModelArch,
    start: &ParameterVector,
    batch: &Batch,
    kind: LossKind,
    noise_var: f64,
    eta: f64,
    steps: usize,
    prox: Option<(f64, &ParameterVector)>,
) -> Result<ParameterVector> {
    let mut theta = start.clone();
    for _ in 0..steps {
        let mut g = regularized_gradient(arch, &theta, batch, kind, noise_var)?;
        if let Some((mu, anchor)) = prox {
            let gv = g.values_mut();
            for (gi, (ti, ai)) in gv.iter_mut().zip(theta.values().iter().zip(anchor.values())) {
                *gi += mu * (ti - ai);
            }
        }
        axpy(theta.values_mut(), -eta, g.values());
    }
    Ok(theta)
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Local steps the ICpC variant runs at t=0: one per dataset block that the
/// slowest inactive upload needs.
pub fn icpc_local_steps(max_inactive_symbols: u64, q_symbols: u64) -> Result<usize> {
    if max_inactive_symbols == 0 {
        return Ok(1);
    }
    if q_symbols == 0 {
        return config_err("block size q_symbols must be positive");
    }
    Ok(max_inactive_symbols.div_ceil(q_symbols) as usize)
}

/// Samples of one inactive client available to the server at round t under
/// sequential dataset transmission: blocks sent at rounds 0..t have landed,
/// and everything has landed once t exceeds the block count.
pub fn sdt_window(t: usize, n_blocks: usize, q_samples: usize, d_samples: usize) -> usize {
    if t == 0 {
        0
    } else if t > n_blocks {
        d_samples
    } else {
        (t * q_samples).min(d_samples)
    }
}

/// The ledger a run will produce, computed without training. The engine
/// charges the same events as it goes; integration tests hold the two equal.
pub fn plan_ledger(
    scheme: Scheme,
    clients: &[ClientSpec],
    rounds: usize,
    q_symbols: u64,
    cl_dataset_symbols: u64,
) -> Result<OverheadLedger> {
    let mut ledger = OverheadLedger::new();
    if scheme == Scheme::Cl {
        ledger.record(0, None, Direction::Uplink, Phase::BeforeTraining, cl_dataset_symbols);
        return Ok(ledger);
    }
    let actives: Vec<&ClientSpec> = clients.iter().filter(|c| c.role == Role::Active).collect();
    let inactives: Vec<&ClientSpec> = clients.iter().filter(|c| c.role == Role::Inactive).collect();
    for t in 0..rounds {
        if t == 0 && scheme.is_hybrid() {
            for c in &inactives {
                let symbols = match scheme {
                    Scheme::HfclSdt => q_symbols.min(c.d_k),
                    _ => c.d_k,
                };
                ledger.record(0, Some(c.id), Direction::Uplink, Phase::BeforeTraining, symbols);
            }
        }
        if t > 0 && scheme == Scheme::HfclSdt {
            for c in &inactives {
                let sent = (t as u64).saturating_mul(q_symbols);
                if sent < c.d_k {
                    let block = q_symbols.min(c.d_k - sent);
                    ledger.record(t, Some(c.id), Direction::Uplink, Phase::DuringTraining, block);
                }
            }
        }
        for c in &actives {
            ledger.record(t, Some(c.id), Direction::Uplink, Phase::DuringTraining, c.d_k);
            ledger.record(t, Some(c.id), Direction::Downlink, Phase::DuringTraining, c.d_k);
        }
    }
    Ok(ledger)
}

/// Runs the scheme named in the config. `clients` must be empty for `cl`.
pub fn run_scheme(
    arch: &ModelArch,
    cfg: &SchemeConfig,
    train: &Dataset,
    test: &Dataset,
    clients: &[ClientSpec],
) -> Result<RunOutput> {
    arch.validate()?;
    cfg.validate()?;
    if arch.output_head != OutputHead::Softmax {
        return config_err("the experiment engine trains classifiers; use a softmax head");
    }
    if arch.input_dim() != train.inputs.cols() {
        return config_err(format!(
            "model takes {} inputs but the training set provides {}",
            arch.input_dim(),
            train.inputs.cols()
        ));
    }
    if arch.output_dim() != train.num_classes {
        return config_err(format!(
            "model has {} outputs but the training set has {} classes",
            arch.output_dim(),
            train.num_classes
        ));
    }
    if test.inputs.cols() != train.inputs.cols() || test.num_classes != train.num_classes {
        return config_err("test set geometry does not match the training set");
    }
    validate_roster(cfg.scheme, arch, train, clients)?;
    if cfg.scheme == Scheme::Cl {
        run_cl_inner(arch, cfg, train, test)
    } else {
        run_exchange(arch, cfg, train, test, clients)
    }
}

fn validate_roster(
    scheme: Scheme,
    arch: &ModelArch,
    train: &Dataset,
    clients: &[ClientSpec],
) -> Result<()> {
    if scheme == Scheme::Cl {
        if !clients.is_empty() {
            return config_err("centralized training runs at the server; pass no clients");
        }
        return Ok(());
    }
    if clients.is_empty() {
        return config_err("this scheme needs at least one client");
    }
    let mut ids: Vec<usize> = clients.iter().map(|c| c.id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() != clients.len() {
        return config_err("client ids must be unique");
    }
    for c in clients {
        if c.data.is_empty() {
            return config_err(format!("client {} has no samples", c.id));
        }
        if c.data.iter().any(|&i| i >= train.len()) {
            return config_err(format!("client {} references samples out of range", c.id));
        }
        match c.role {
            Role::Active => {
                if c.d_k != arch.param_count() as u64 {
                    return config_err(format!(
                        "active client {} must upload the {} model parameters, roster says {}",
                        c.id,
                        arch.param_count(),
                        c.d_k
                    ));
                }
            }
            Role::Inactive => {
                let expect = dataset_symbols(train, &c.data);
                if c.d_k != expect {
                    return config_err(format!(
                        "inactive client {} holds {expect} dataset symbols, roster says {}",
                        c.id, c.d_k
                    ));
                }
            }
        }
    }
    let active_count = clients.iter().filter(|c| c.role == Role::Active).count();
    match scheme {
        Scheme::Fl | Scheme::Fedavg | Scheme::Fedprox => {
            if active_count != clients.len() {
                return config_err(format!(
                    "{} requires every client to be active",
                    scheme.as_str()
                ));
            }
        }
        Scheme::FlPartial => {
            if active_count == 0 {
                return config_err(
                    "fl_partial has no active clients left, so no training can happen",
                );
            }
        }
        _ => {}
    }
    Ok(())
}

fn run_cl_inner(
    arch: &ModelArch,
    cfg: &SchemeConfig,
    train: &Dataset,
    test: &Dataset,
) -> Result<RunOutput> {
    let kind = LossKind::Classification;
    let hub = RngHub::new(cfg.seed);
    let mut theta = init_glorot(arch, &mut hub.stream("init"));

    // The pooled dataset as the server receives it (noisy if configured);
    // reporting always uses the clean pool.
    let mut pool = train.clone();
    if let Some(snr) = cfg.noise.snr_data_db {
        let var = dataset_noise_variance(&pool, snr, cfg.noise.variance_mode)?;
        pool = add_dataset_noise_with_var(&pool, var, &mut hub.stream("data/pool"))?;
    }
    let all: Vec<usize> = (0..train.len()).collect();
    let clean_pool = train.to_batch(&all)?;
    let total_symbols = dataset_symbols(train, &all);

    let mut batch_rng = hub.stream("cl/minibatch");
    let m = cfg.minibatch.min(pool.len());
    let full_batch = if m == pool.len() { Some(pool.to_batch(&all)?) } else { None };

    let mut ledger = OverheadLedger::new();
    ledger.record(0, None, Direction::Uplink, Phase::BeforeTraining, total_symbols);

    let mut records = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let eta = eta_at(cfg, t);
        let owned;
        let batch = match &full_batch {
            Some(b) => b,
            None => {
                let mut idx = rand::seq::index::sample(&mut batch_rng, pool.len(), m).into_vec();
                idx.sort_unstable();
                owned = pool.to_batch(&idx)?;
                &owned
            }
        };
        let g = regularized_gradient(arch, &theta, batch, kind, 0.0)?;
        axpy(theta.values_mut(), -eta, g.values());

        let train_loss = loss(arch, &theta, &clean_pool, kind)?;
        records.push(RoundRecord {
            t,
            theta_hash: bits_hash(theta.values()),
            per_client_loss: vec![train_loss],
            train_loss,
            accuracy_pct: evaluate(arch, &theta, test)?,
            uplink_symbols: 0,
            downlink_symbols: 0,
            phase: Phase::DuringTraining,
        });
    }
    Ok(RunOutput { records, ledger, final_theta: theta })
}

struct ActiveState<'a> {
    spec: &'a ClientSpec,
    pos: usize,
    theta: ParameterVector,
    batch: Batch,
    up_rng: rand_chacha::ChaCha20Rng,
    down_rng: rand_chacha::ChaCha20Rng,
    prox_rng: rand_chacha::ChaCha20Rng,
}

struct InactiveState<'a> {
    spec: &'a ClientSpec,
    pos: usize,
    /// The shard as the server received it (noisy if configured).
    data: Dataset,
    cached: Option<(usize, Batch)>,
    contribution: ParameterVector,
}

impl InactiveState<'_> {
    fn batch_for(&mut self, samples: usize) -> Result<&Batch> {
        let need = samples.clamp(1, self.data.len());
        if self.cached.as_ref().map(|(n, _)| *n) != Some(need) {
            let idx: Vec<usize> = (0..need).collect();
            self.cached = Some((need, self.data.to_batch(&idx)?));
        }
        Ok(&self.cached.as_ref().expect("just filled").1)
    }
}

fn run_exchange(
    arch: &ModelArch,
    cfg: &SchemeConfig,
    train: &Dataset,
    test: &Dataset,
    clients: &[ClientSpec],
) -> Result<RunOutput> {
    let kind = LossKind::Classification;
    let hub = RngHub::new(cfg.seed);
    let mut theta = init_glorot(arch, &mut hub.stream("init"));

    // Participation: the partial baseline drops inactive clients entirely;
    // the hybrid schemes train them at the server; fl variants verified
    // all-active already.
    let mut roster: Vec<&ClientSpec> = match cfg.scheme {
        Scheme::FlPartial => clients.iter().filter(|c| c.role == Role::Active).collect(),
        _ => clients.iter().collect(),
    };
    roster.sort_by_key(|c| c.id);

    let mut actives = Vec::new();
    let mut inactives = Vec::new();
    for (pos, spec) in roster.iter().enumerate() {
        match spec.role {
            Role::Active => actives.push(ActiveState {
                spec,
                pos,
                theta: theta.clone(),
                batch: train.to_batch(&spec.data)?,
                up_rng: hub.stream(&format!("uplink/{}", spec.id)),
                down_rng: hub.stream(&format!("downlink/{}", spec.id)),
                prox_rng: hub.stream(&format!("prox/{}", spec.id)),
            }),
            Role::Inactive => {
                let mut data = train.subset(&spec.data)?;
                if let Some(snr) = cfg.noise.snr_data_db {
                    let var = dataset_noise_variance(&data, snr, cfg.noise.variance_mode)?;
                    let mut rng = hub.stream(&format!("data/{}", spec.id));
                    data = add_dataset_noise_with_var(&data, var, &mut rng)?;
                }
                inactives.push(InactiveState {
                    spec,
                    pos,
                    data,
                    cached: None,
                    contribution: theta.clone(),
                });
            }
        }
    }

    // Hybrid-variant block geometry.
    let max_inactive_d = inactives.iter().map(|c| c.spec.d_k).max().unwrap_or(0);
    if !inactives.is_empty()
        && matches!(cfg.scheme, Scheme::HfclIcpc | Scheme::HfclSdt)
        && cfg.q_symbols == 0
    {
        return config_err("q_symbols must be positive for the block-transmission variants");
    }
    let icpc_steps = if cfg.scheme == Scheme::HfclIcpc {
        icpc_local_steps(max_inactive_d, cfg.q_symbols.max(1))?
    } else {
        1
    };
    let n_blocks = if cfg.scheme == Scheme::HfclSdt && !inactives.is_empty() {
        let n = max_inactive_d.div_ceil(cfg.q_symbols) as usize;
        if (n as f64) >= cfg.gamma * cfg.rounds as f64 {
            return config_err(format!(
                "sdt needs N = {} dataset blocks, violating N < gamma * T = {} * {}",
                n, cfg.gamma, cfg.rounds
            ));
        }
        n
    } else {
        0
    };
    let q_samples = (cfg.q_symbols / train.symbols_per_sample()).max(1) as usize;

    let d_total: u64 = roster.iter().map(|c| c.data.len() as u64).sum();
    let all: Vec<usize> = (0..train.len()).collect();
    let clean_pool = train.to_batch(&all)?;

    let mut ledger = OverheadLedger::new();
    let mut records = Vec::with_capacity(cfg.rounds);

    for t in 0..cfg.rounds {
        let eta = eta_at(cfg, t);
        let mut row_up = 0u64;
        let mut row_down = 0u64;
        let mut per_client_loss = vec![0.0; roster.len()];

        // Noise budgets from the round-start global model.
        let mut sigma_k = Vec::with_capacity(actives.len());
        for a in &actives {
            sigma_k.push(link_noise_variance(&theta, a.spec.link.snr_db, cfg.noise.variance_mode)?);
        }
        let weighted: Vec<(u64, f64)> = actives
            .iter()
            .zip(&sigma_k)
            .map(|(a, &v)| (a.spec.data.len() as u64, v))
            .collect();
        let sigma_tilde = if cfg.noise.paper_variance_formula {
            paper_uplink_variance(&weighted, d_total)?
        } else {
            aggregated_uplink_variance(&weighted, d_total)?
        };
        let budget = NoiseBudget { sigma_tilde_sq: sigma_tilde, sigma_k_sq: sigma_k };

        // Active side: local steps, then the noisy quantized upload.
        let mut uploads: Vec<(usize, u64, ParameterVector)> = Vec::with_capacity(actives.len());
        for (i, a) in actives.iter_mut().enumerate() {
            let noise_var = budget.sigma_tilde_sq + budget.sigma_k_sq[i];
            let steps = match cfg.scheme {
                Scheme::Fedavg => cfg.local_updates,
                Scheme::Fedprox => a.prox_rng.random_range(1..=cfg.local_updates),
                Scheme::HfclIcpc if t == 0 => icpc_steps,
                _ => 1,
            };
            let prox_anchor;
            let prox = if cfg.scheme == Scheme::Fedprox {
                prox_anchor = a.theta.clone();
                Some((cfg.mu, &prox_anchor))
            } else {
                None
            };
            a.theta = local_update(arch, &a.theta, &a.batch, kind, noise_var, eta, steps, prox)?;
            per_client_loss[a.pos] = loss(arch, &a.theta, &a.batch, kind)?;

            let mut sent = perturb(&a.theta, budget.sigma_k_sq[i], &mut a.up_rng)?;
            if let Some(bits) = a.spec.link.quant_bits {
                sent = quantize(&sent, bits)?;
            }
            ledger.record(t, Some(a.spec.id), Direction::Uplink, Phase::DuringTraining, a.spec.d_k);
            row_up += a.spec.d_k;
            uploads.push((a.spec.id, a.spec.data.len() as u64, sent));
        }

        // Dataset traffic owed by inactive clients.
        if cfg.scheme.is_hybrid() {
            for c in &inactives {
                if t == 0 {
                    let symbols = match cfg.scheme {
                        Scheme::HfclSdt => cfg.q_symbols.min(c.spec.d_k),
                        _ => c.spec.d_k,
                    };
                    ledger.record(0, Some(c.spec.id), Direction::Uplink, Phase::BeforeTraining, symbols);
                } else if cfg.scheme == Scheme::HfclSdt {
                    let sent = (t as u64).saturating_mul(cfg.q_symbols);
                    if sent < c.spec.d_k {
                        let block = cfg.q_symbols.min(c.spec.d_k - sent);
                        ledger.record(t, Some(c.spec.id), Direction::Uplink, Phase::DuringTraining, block);
                        row_up += block;
                    }
                }
            }
        }

        // Server-side steps for inactive clients on the data received so far.
        for c in &mut inactives {
            let window = match cfg.scheme {
                Scheme::HfclSdt => sdt_window(t, n_blocks, q_samples, c.data.len()),
                _ => {
                    if t == 0 {
                        0
                    } else {
                        c.data.len()
                    }
                }
            };
            if window == 0 {
                c.contribution = theta.clone();
                let batch = c.batch_for(c.data.len())?;
                per_client_loss[c.pos] = loss(arch, &theta, batch, kind)?;
            } else {
                let pos = c.pos;
                let batch = c.batch_for(window)?;
                let g = regularized_gradient(arch, &theta, batch, kind, budget.sigma_tilde_sq)?;
                let mut stepped = theta.clone();
                axpy(stepped.values_mut(), -eta, g.values());
                per_client_loss[pos] = loss(arch, &stepped, batch, kind)?;
                c.contribution = stepped;
            }
        }

        // Aggregate every participant by sample count, in client-id order.
        {
            let mut items: Vec<(usize, u64, &ParameterVector)> = Vec::with_capacity(roster.len());
            for (id, weight, sent) in &uploads {
                items.push((*id, *weight, sent));
            }
            for c in &inactives {
                items.push((c.spec.id, c.spec.data.len() as u64, &c.contribution));
            }
            items.sort_by_key(|&(id, _, _)| id);
            let weighted: Vec<(u64, &ParameterVector)> =
                items.iter().map(|&(_, w, v)| (w, v)).collect();
            theta = aggregate(&weighted)?;
        }

        // Downlink to active clients only.
        for (i, a) in actives.iter_mut().enumerate() {
            a.theta = perturb(&theta, budget.sigma_k_sq[i], &mut a.down_rng)?;
            ledger.record(t, Some(a.spec.id), Direction::Downlink, Phase::DuringTraining, a.spec.d_k);
            row_down += a.spec.d_k;
        }

        records.push(RoundRecord {
            t,
            theta_hash: bits_hash(theta.values()),
            per_client_loss,
            train_loss: loss(arch, &theta, &clean_pool, kind)?,
            accuracy_pct: evaluate(arch, &theta, test)?,
            uplink_symbols: row_up,
            downlink_symbols: row_down,
            phase: Phase::DuringTraining,
        });
    }
    Ok(RunOutput { records, ledger, final_theta: theta })
}

pub fn run_cl(arch: &ModelArch, cfg: &SchemeConfig, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    run_scheme(arch, &SchemeConfig { scheme: Scheme::Cl, ..cfg.clone() }, train, test, &[])
}

pub fn run_fl(
    arch: &ModelArch,
    cfg: &SchemeConfig,
    train: &Dataset,
    test: &Dataset,
    clients: &[ClientSpec],
) -> Result<RunOutput> {
    run_scheme(arch, &SchemeConfig { scheme: Scheme::Fl, ..cfg.clone() }, train, test, clients)
}

pub fn run_fedavg(
    arch: &ModelArch,
    cfg: &SchemeConfig,
    train: &Dataset,
    test: &Dataset,
    clients: &[ClientSpec],
) -> Result<RunOutput> {
    run_scheme(arch, &SchemeConfig { scheme: Scheme::Fedavg, ..cfg.clone() }, train, test, clients)
}

pub fn run_fedprox(
    arch: &ModelArch,
    cfg: &SchemeConfig,
    train: &Dataset,
    test: &Dataset,
    clients: &[ClientSpec],
) -> Result<RunOutput> {
    run_scheme(arch, &SchemeConfig { scheme: Scheme::Fedprox, ..cfg.clone() }, train, test, clients)
}

pub fn run_fl_partial(
    arch: &ModelArch,
    cfg: &SchemeConfig,
    train: &Dataset,
    test: &Dataset,
    clients: &[ClientSpec],
) -> Result<RunOutput> {
    run_scheme(arch, &SchemeConfig { scheme: Scheme::FlPartial, ..cfg.clone() }, train, test, clients)
}

pub fn run_hfcl(
    arch: &ModelArch,
    cfg: &SchemeConfig,
    train: &Dataset,
    test: &Dataset,
    clients: &[ClientSpec],
) -> Result<RunOutput> {
    run_scheme(arch, &SchemeConfig { scheme: Scheme::Hfcl, ..cfg.clone() }, train, test, clients)
}

pub fn run_hfcl_icpc(
    arch: &ModelArch,
    cfg: &SchemeConfig,
    train: &Dataset,
    test: &Dataset,
    clients: &[ClientSpec],
) -> Result<RunOutput> {
    run_scheme(arch, &SchemeConfig { scheme: Scheme::HfclIcpc, ..cfg.clone() }, train, test, clients)
}

pub fn run_hfcl_sdt(
    arch: &ModelArch,
    cfg: &SchemeConfig,
    train: &Dataset,
    test: &Dataset,
    clients: &[ClientSpec],
) -> Result<RunOutput> {
    run_scheme(arch, &SchemeConfig { scheme: Scheme::HfclSdt, ..cfg.clone() }, train, test, clients)
}
