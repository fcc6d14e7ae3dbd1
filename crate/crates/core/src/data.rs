//! Datasets, partitioning across clients, and symbol accounting.
//!
//! A dataset is a row-major input matrix plus integer labels. Symbol counts
//! treat every input entry as one transmission symbol and each label as one
//! more, which is what the overhead ledgers charge when an inactive client
//! uploads its data.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, format_err, numeric_err, Result};
use crate::mat::Mat;
use crate::model::Batch;
use crate::rng::RngHub;

/// Euclidean norm of every synthetic cluster mean.
pub const CLUSTER_MEAN_NORM: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One sample per row, `rows * cols` input symbols each.
    pub inputs: Mat,
    pub labels: Vec<usize>,
    /// One-hot width used when forming batches.
    pub num_classes: usize,
    /// Logical shape of one input sample, e.g. `(28, 28)` for images or
    /// `(1, dim)` for flat features.
    pub input_shape: (usize, usize),
    /// Symbols needed to transmit one label.
    pub label_symbols: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Symbols needed to transmit one full sample (inputs plus label).
    pub fn symbols_per_sample(&self) -> u64 {
        (self.input_shape.0 * self.input_shape.1 + self.label_symbols) as u64
    }

    /// Copy of the picked samples as a standalone dataset (a client's local
    /// shard, say), preserving class count and shape metadata.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        if indices.is_empty() {
            return config_err("subset needs at least one sample");
        }
        if indices.iter().any(|&i| i >= self.len()) {
            return config_err("sample index out of range");
        }
        Ok(Dataset {
            inputs: self.inputs.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            input_shape: self.input_shape,
            label_symbols: self.label_symbols,
        })
    }

    /// Batch with one-hot targets for the picked sample indices.
    pub fn to_batch(&self, indices: &[usize]) -> Result<Batch> {
        if indices.iter().any(|&i| i >= self.len()) {
            return config_err("sample index out of range");
        }
        let inputs = self.inputs.gather(indices);
        let mut targets = Mat::zeros(indices.len(), self.num_classes);
        for (r, &i) in indices.iter().enumerate() {
            targets.set(r, self.labels[i], 1.0);
        }
        Batch::new(inputs, targets)
    }
}

/// Gaussian-cluster classification data: class means of fixed norm plus
/// unit-variance noise, labels assigned round-robin so classes stay
/// balanced within one sample.
pub fn synth_classification(n: usize, classes: usize, dim: usize, seed: u64) -> Result<Dataset> {
    let (train, _) = synth_classification_pair(n, 0, classes, dim, seed)?;
    Ok(train)
}

/// Train and held-out test sets drawn around the same class means.
pub fn synth_classification_pair(
    n_train: usize,
    n_test: usize,
    classes: usize,
    dim: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if classes < 2 {
        return config_err("synthetic data needs at least two classes");
    }
    if n_train < classes {
        return config_err("synthetic data needs at least one sample per class");
    }
    if dim == 0 {
        return config_err("synthetic data needs a positive dimension");
    }
    let hub = RngHub::new(seed);
    let mut mean_rng = hub.stream("synth/means");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let mut m: Vec<f64> = (0..dim).map(|_| normal.sample(&mut mean_rng)).collect();
            let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for v in &mut m {
                *v *= CLUSTER_MEAN_NORM / norm;
            }
            m
        })
        .collect();

    let draw = |n: usize, stream: &str| -> Dataset {
        let mut rng = hub.stream(stream);
        let mut inputs = Mat::zeros(n, dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % classes;
            labels.push(label);
            let row = inputs.row_mut(i);
            for (v, m) in row.iter_mut().zip(&means[label]) {
                *v = m + normal.sample(&mut rng);
            }
        }
        Dataset {
            inputs,
            labels,
            num_classes: classes,
            input_shape: (1, dim),
            label_symbols: 1,
        }
    };

    Ok((draw(n_train, "synth/train"), draw(n_test, "synth/test")))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    let Some(window) = bytes.get(offset..offset + 4) else {
        return format_err(format!("{path}: truncated at offset {offset}, expected 4 more bytes"));
    };
    Ok(u32::from_be_bytes(window.try_into().unwrap()))
}

/// Loads an IDX image/label file pair (the MNIST container format).
/// Pixels are scaled to `[0, 1]`.
pub fn load_idx(images_path: &str, labels_path: &str) -> Result<Dataset> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;

    let magic = be_u32(&image_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return format_err(format!(
            "{images_path}: bad magic 0x{magic:08x} at offset 0, expected 0x{IDX_IMAGES_MAGIC:08x}"
        ));
    }
    let count = be_u32(&image_bytes, 4, images_path)? as usize;
    let rows = be_u32(&image_bytes, 8, images_path)? as usize;
    let cols = be_u32(&image_bytes, 12, images_path)? as usize;
    let pixel_bytes = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| crate::Error::Format(format!("{images_path}: image dimensions overflow")))?;
    if image_bytes.len() != 16 + pixel_bytes {
        return format_err(format!(
            "{images_path}: expected {} bytes of pixel data at offset 16, found {}",
            pixel_bytes,
            image_bytes.len().saturating_sub(16)
        ));
    }

    let label_magic = be_u32(&label_bytes, 0, labels_path)?;
    if label_magic != IDX_LABELS_MAGIC {
        return format_err(format!(
            "{labels_path}: bad magic 0x{label_magic:08x} at offset 0, expected 0x{IDX_LABELS_MAGIC:08x}"
        ));
    }
    let label_count = be_u32(&label_bytes, 4, labels_path)? as usize;
    if label_bytes.len() != 8 + label_count {
        return format_err(format!(
            "{labels_path}: expected {} label bytes at offset 8, found {}",
            label_count,
            label_bytes.len().saturating_sub(8)
        ));
    }
    if label_count != count {
        return format_err(format!(
            "{images_path} holds {count} images but {labels_path} holds {label_count} labels"
        ));
    }
    if count == 0 {
        return format_err(format!("{images_path}: empty dataset"));
    }

    let data: Vec<f64> = image_bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().copied().unwrap_or(0) + 1;
    Ok(Dataset {
        inputs: Mat::from_vec(count, rows * cols, data)?,
        labels,
        num_classes: num_classes.max(2),
        input_shape: (rows, cols),
        label_symbols: 1,
    })
}

/// How samples are split across clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionMode {
    /// Uniform random split into near-equal shares.
    Iid,
    /// Label-skewed: every client holds exactly this many distinct labels
    /// (where divisibility permits).
    NonIid(usize),
    /// Label-skewed with one or two labels per client, drawn per client.
    NonIidMixed,
}

/// Per-client sample indices, each list sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }
}

/// Splits `dataset` across `k` clients. Every sample is assigned to exactly
/// one client and every client gets at least one sample.
pub fn partition(dataset: &Dataset, k: usize, mode: PartitionMode, seed: u64) -> Result<Partition> {
    if k == 0 {
        return config_err("partition needs at least one client");
    }
    if k > dataset.len() {
        return config_err(format!(
            "cannot split {} samples across {k} clients",
            dataset.len()
        ));
    }
    let hub = RngHub::new(seed);
    match mode {
        PartitionMode::Iid => {
            let mut idx: Vec<usize> = (0..dataset.len()).collect();
            idx.shuffle(&mut hub.stream("partition/iid"));
            let base = dataset.len() / k;
            let extra = dataset.len() % k;
            let mut clients = Vec::with_capacity(k);
            let mut cursor = 0;
            for c in 0..k {
                let take = base + usize::from(c < extra);
                let mut part: Vec<usize> = idx[cursor..cursor + take].to_vec();
                part.sort_unstable();
                clients.push(part);
                cursor += take;
            }
            Ok(Partition { clients })
        }
        PartitionMode::NonIid(m) => {
            let labels_per_client = vec![m; k];
            non_iid_partition(dataset, &labels_per_client, &hub)
        }
        PartitionMode::NonIidMixed => {
            let mut rng = hub.stream("partition/mixed");
            let labels_per_client: Vec<usize> =
                (0..k).map(|_| rng.random_range(1..=2usize)).collect();
            non_iid_partition(dataset, &labels_per_client, &hub)
        }
    }
}

/// Sort-by-label sharding: each label's samples are cut into as many shards
/// as that label has client slots, then dealt so client `i` receives
/// `labels_per_client[i]` distinct labels.
fn non_iid_partition(dataset: &Dataset, labels_per_client: &[usize], hub: &RngHub) -> Result<Partition> {
    let classes = dataset.num_classes;
    let k = labels_per_client.len();
    let total_slots: usize = labels_per_client.iter().sum();
    if labels_per_client.iter().any(|&m| m == 0 || m > classes) {
        return config_err(format!(
            "labels per client must be between 1 and the class count {classes}"
        ));
    }
    if total_slots < classes {
        return config_err(format!(
            "{total_slots} label slots cannot cover {classes} labels; raise clients or labels per client"
        ));
    }

    // Slot counts per label: as even as possible, remainder to a seeded
    // random subset. When classes divide the slots this is exactly uniform.
    let mut slots = vec![total_slots / classes; classes];
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut hub.stream("partition/slot-order"));
    for &label in order.iter().take(total_slots % classes) {
        slots[label] += 1;
    }

    // Deal labels to clients, most-loaded label first, so every client ends
    // up with distinct labels. Retry with a reshuffled tiebreak if a deal
    // paints itself into a corner.
    let mut assignment: Option<Vec<Vec<usize>>> = None;
    let mut deal_rng = hub.stream("partition/deal");
    for _attempt in 0..100 {
        let mut remaining = slots.clone();
        let mut tiebreak: Vec<usize> = (0..classes).collect();
        tiebreak.shuffle(&mut deal_rng);
        let mut per_client: Vec<Vec<usize>> = Vec::with_capacity(k);
        let mut ok = true;
        for &m in labels_per_client {
            let mut avail: Vec<usize> = (0..classes).filter(|&l| remaining[l] > 0).collect();
            if avail.len() < m {
                ok = false;
                break;
            }
            avail.sort_by_key(|&l| (std::cmp::Reverse(remaining[l]), tiebreak[l]));
            let chosen: Vec<usize> = avail[..m].to_vec();
            for &l in &chosen {
                remaining[l] -= 1;
            }
            per_client.push(chosen);
        }
        if ok && remaining.iter().all(|&r| r == 0) {
            assignment = Some(per_client);
            break;
        }
    }
    let Some(per_client) = assignment else {
        return config_err("could not deal distinct labels to every client; adjust clients or labels per client");
    };

    // Shard each label's (shuffled) samples into its slot count.
    let mut by_label: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        if l >= classes {
            return config_err(format!("label {l} out of range for {classes} classes"));
        }
        by_label[l].push(i);
    }
    let mut shard_rng = hub.stream("partition/shards");
    let mut shards: Vec<std::collections::VecDeque<Vec<usize>>> = Vec::with_capacity(classes);
    for (label, mut idx) in by_label.into_iter().enumerate() {
        let want = slots[label];
        if want == 0 {
            shards.push(Default::default());
            continue;
        }
        if idx.len() < want {
            return config_err(format!(
                "label {label} has {} samples but needs {want} shards",
                idx.len()
            ));
        }
        idx.shuffle(&mut shard_rng);
        let base = idx.len() / want;
        let extra = idx.len() % want;
        let mut cursor = 0;
        let mut queue = std::collections::VecDeque::with_capacity(want);
        for s in 0..want {
            let take = base + usize::from(s < extra);
            queue.push_back(idx[cursor..cursor + take].to_vec());
            cursor += take;
        }
        shards.push(queue);
    }

    let mut clients = Vec::with_capacity(k);
    for chosen in &per_client {
        let mut part = Vec::new();
        for &label in chosen {
            part.extend(shards[label].pop_front().expect("slot counts match deals"));
        }
        part.sort_unstable();
        clients.push(part);
    }
    Ok(Partition { clients })
}

/// Symbols needed to upload the picked samples: `count * (inputs + label)`.
pub fn dataset_symbols(dataset: &Dataset, indices: &[usize]) -> u64 {
    indices.len() as u64 * dataset.symbols_per_sample()
}

/// Per-entry noise variance implied by a dataset-transmission SNR, using
/// the same convention as the parameter channel applied to the input
/// matrix norm.
pub fn dataset_noise_variance(
    dataset: &Dataset,
    snr_db: f64,
    mode: crate::channel::VarianceMode,
) -> Result<f64> {
    if snr_db.is_nan() {
        return config_err("snr_db must not be NaN");
    }
    let norm_sq: f64 = dataset.inputs.as_slice().iter().map(|v| v * v).sum();
    if norm_sq == 0.0 {
        return numeric_err("degenerate dataset: zero-norm inputs have no defined SNR");
    }
    let var = norm_sq * 10f64.powf(-snr_db / 20.0);
    Ok(match mode {
        crate::channel::VarianceMode::TotalNorm => var,
        crate::channel::VarianceMode::PerElement => {
            var / (dataset.inputs.rows() * dataset.inputs.cols()) as f64
        }
    })
}

/// Adds AWGN to the inputs only, with variance derived from the input
/// matrix norm by the same SNR convention as the parameter channel.
pub fn add_dataset_noise(dataset: &Dataset, snr_db: f64, rng: &mut impl Rng) -> Result<Dataset> {
    let var = dataset_noise_variance(dataset, snr_db, crate::channel::VarianceMode::TotalNorm)?;
    add_dataset_noise_with_var(dataset, var, rng)
}

/// Adds AWGN of an explicit per-entry variance to the inputs only.
pub fn add_dataset_noise_with_var(dataset: &Dataset, variance: f64, rng: &mut impl Rng) -> Result<Dataset> {
    if !variance.is_finite() || variance < 0.0 {
        return config_err(format!("noise variance must be finite and nonnegative, got {variance}"));
    }
    let mut out = dataset.clone();
    if variance == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("validated std");
    for v in out.inputs.as_mut_slice() {
        *v += normal.sample(rng);
    }
    Ok(out)
}
