//! Link delays, min-max bandwidth allocation, and the symbol-exact
//! overhead ledger.
//!
//! Overhead is counted in transmission symbols: one symbol per dataset
//! entry (input element or label) and one per model parameter. The ledger
//! splits totals into a before-training phase (dataset uploads at t=0) and
//! a during-training phase (model exchange), which is the distinction the
//! delay analysis cares about.

use serde::Serialize;

use crate::error::{config_err, Result};

/// One client's traffic demand and link quality.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkBudget {
    /// Total bandwidth shared by all clients, in Hz.
    pub total_bandwidth: f64,
    /// Per client: symbols to move and link SNR in dB.
    pub clients: Vec<(u64, f64)>,
}

fn snr_linear(snr_db: f64) -> f64 {
    10f64.powf(snr_db / 10.0)
}

/// Transmission time for `symbols` over a link of rate `bandwidth * ln(1 + SNR)`.
pub fn delay(symbols: u64, bandwidth: f64, snr_db: f64) -> Result<f64> {
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return config_err(format!("bandwidth must be positive and finite, got {bandwidth}"));
    }
    if !snr_db.is_finite() {
        return config_err(format!("snr_db must be finite, got {snr_db}"));
    }
    Ok(symbols as f64 / (bandwidth * (1.0 + snr_linear(snr_db)).ln()))
}

/// Splits the total bandwidth so every client finishes at the same time,
/// which minimizes the maximum delay: each delay is strictly decreasing in
/// its own bandwidth share, so at the optimum no client can be slower than
/// another.
pub fn allocate_bandwidth(budget: &LinkBudget) -> Result<Vec<f64>> {
    if !(budget.total_bandwidth > 0.0) || !budget.total_bandwidth.is_finite() {
        return config_err(format!(
            "total bandwidth must be positive and finite, got {}",
            budget.total_bandwidth
        ));
    }
    if budget.clients.is_empty() {
        return config_err("bandwidth allocation needs at least one client");
    }
    let mut weights = Vec::with_capacity(budget.clients.len());
    for &(symbols, snr_db) in &budget.clients {
        if symbols == 0 {
            return config_err("every client must have at least one symbol to send");
        }
        if !snr_db.is_finite() {
            return config_err(format!("snr_db must be finite, got {snr_db}"));
        }
        weights.push(symbols as f64 / (1.0 + snr_linear(snr_db)).ln());
    }
    let sum: f64 = weights.iter().sum();
    Ok(weights.iter().map(|w| budget.total_bandwidth * w / sum).collect())
}

fn to_symbols(value: u128) -> Result<u64> {
    u64::try_from(value).map_err(|_| crate::Error::Config("overhead count exceeds u64".into()))
}

/// Centralized learning ships every dataset once: the total dataset symbol
/// count, all before training.
pub fn overhead_cl(dataset_symbols: u64) -> u64 {
    dataset_symbols
}

/// Federated learning exchanges the model up and down every round for
/// every client.
pub fn overhead_fl(rounds: u64, params: u64, clients: u64) -> Result<u64> {
    to_symbols(2 * rounds as u128 * params as u128 * clients as u128)
}

/// Hybrid: inactive clients upload their datasets once, the remaining
/// active clients exchange models every round.
pub fn overhead_hfcl(
    inactive: u64,
    inactive_dataset_symbols: u64,
    rounds: u64,
    params: u64,
    clients: u64,
) -> Result<u64> {
    if inactive > clients {
        return config_err(format!("{inactive} inactive clients out of {clients} total"));
    }
    let model_traffic = 2 * rounds as u128 * params as u128 * (clients - inactive) as u128;
    to_symbols(inactive as u128 * inactive_dataset_symbols as u128 + model_traffic)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BeforeTraining,
    DuringTraining,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::BeforeTraining => "before_training",
            Phase::DuringTraining => "during_training",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerEntry {
    pub round: usize,
    /// None for pooled transfers that have no single owner (the CL upload).
    pub client: Option<usize>,
    pub direction: Direction,
    pub phase: Phase,
    pub symbols: u64,
}

/// Append-only record of every transmission in a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct OverheadLedger {
    entries: Vec<LedgerEntry>,
}

impl OverheadLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(
        &mut self,
        round: usize,
        client: Option<usize>,
        direction: Direction,
        phase: Phase,
        symbols: u64,
    ) {
        if symbols == 0 {
            return;
        }
        self.entries.push(LedgerEntry { round, client, direction, phase, symbols });
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn phase_total(&self, phase: Phase) -> u64 {
        self.entries.iter().filter(|e| e.phase == phase).map(|e| e.symbols).sum()
    }

    pub fn before_training(&self) -> u64 {
        self.phase_total(Phase::BeforeTraining)
    }

    pub fn during_training(&self) -> u64 {
        self.phase_total(Phase::DuringTraining)
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.symbols).sum()
    }

    /// During-training (uplink, downlink) symbols charged at one round.
    pub fn round_symbols(&self, round: usize) -> (u64, u64) {
        let mut up = 0;
        let mut down = 0;
        for e in &self.entries {
            if e.round == round && e.phase == Phase::DuringTraining {
                match e.direction {
                    Direction::Uplink => up += e.symbols,
                    Direction::Downlink => down += e.symbols,
                }
            }
        }
        (up, down)
    }
}
