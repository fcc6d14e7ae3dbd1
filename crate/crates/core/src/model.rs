//! Dense feed-forward model: forward pass, losses, analytic gradients, and
//! the noise-regularized objectives used by the training schemes.
//!
//! Parameters live in one flat `f64` vector laid out layer by layer (weights
//! row-major, then biases), with span metadata so per-layer operations like
//! quantization can find layer boundaries.

use rand_distr::{Distribution, Normal};

use crate::error::{config_err, numeric_err, Result};
use crate::mat::Mat;

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// Output-layer head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    Softmax,
    Linear,
}

/// Which loss to evaluate. Must match the head: regression pairs with a
/// linear head, classification with softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Regression,
    Classification,
}

/// Architecture of a dense network, e.g. `[64, 32, 10]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelArch {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub output_head: OutputHead,
}

impl ModelArch {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, output_head: OutputHead) -> Result<Self> {
        let arch = ModelArch { layer_sizes, activation, output_head };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return config_err("arch needs at least an input and an output layer");
        }
        if self.layer_sizes.iter().any(|&s| s == 0) {
            return config_err("arch layer sizes must be positive");
        }
        Ok(())
    }

    /// Total parameter count: sum of `in*out + out` over consecutive layers.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// One `(offset, len)` span per layer, each covering that layer's
    /// weights and bias.
    pub fn layer_spans(&self) -> Vec<(usize, usize)> {
        let mut spans = Vec::with_capacity(self.layer_sizes.len() - 1);
        let mut off = 0;
        for w in self.layer_sizes.windows(2) {
            let len = w[0] * w[1] + w[1];
            spans.push((off, len));
            off += len;
        }
        spans
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }
}

/// Flat parameter vector plus layer-span metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    layer_spans: Vec<(usize, usize)>,
}

impl ParameterVector {
    /// Spans must be contiguous, disjoint, and cover `values` exactly;
    /// values must be finite.
    pub fn new(values: Vec<f64>, layer_spans: Vec<(usize, usize)>) -> Result<Self> {
        let mut expect = 0;
        for &(off, len) in &layer_spans {
            if off != expect || len == 0 {
                return config_err(format!(
                    "layer spans must tile the vector: span ({off}, {len}) at offset {expect}"
                ));
            }
            expect = off + len;
        }
        if expect != values.len() {
            return config_err(format!(
                "layer spans cover {expect} values but the vector has {}",
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return numeric_err(format!("non-finite parameter at index {i}"));
        }
        Ok(ParameterVector { values, layer_spans })
    }

    pub fn from_arch(arch: &ModelArch, values: Vec<f64>) -> Result<Self> {
        Self::new(values, arch.layer_spans())
    }

    pub fn zeros(arch: &ModelArch) -> Self {
        ParameterVector {
            values: vec![0.0; arch.param_count()],
            layer_spans: arch.layer_spans(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layer_spans(&self) -> &[(usize, usize)] {
        &self.layer_spans
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

/// Inputs and targets for one loss/gradient evaluation. Targets are raw
/// values for regression and one-hot rows for classification.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Mat,
    pub targets: Mat,
}

impl Batch {
    pub fn new(inputs: Mat, targets: Mat) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return config_err(format!(
                "batch has {} input rows but {} target rows",
                inputs.rows(),
                targets.rows()
            ));
        }
        if inputs.rows() == 0 {
            return config_err("batch must contain at least one sample");
        }
        Ok(Batch { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// Copy of the first `n` samples.
    pub fn head(&self, n: usize) -> Batch {
        Batch { inputs: self.inputs.head(n), targets: self.targets.head(n) }
    }
}

/// Glorot-normal initialization; biases start at zero.
pub fn init_glorot(arch: &ModelArch, rng: &mut impl rand::Rng) -> ParameterVector {
    let mut values = Vec::with_capacity(arch.param_count());
    for w in arch.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        values.extend((0..fan_in * fan_out).map(|_| normal.sample(rng)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParameterVector { values, layer_spans: arch.layer_spans() }
}

fn check_theta(arch: &ModelArch, theta: &ParameterVector) -> Result<()> {
    if theta.len() != arch.param_count() {
        return config_err(format!(
            "parameter vector has {} values but the arch needs {}",
            theta.len(),
            arch.param_count()
        ));
    }
    Ok(())
}

fn check_kind(arch: &ModelArch, kind: LossKind) -> Result<()> {
    match (kind, arch.output_head) {
        (LossKind::Regression, OutputHead::Linear) => Ok(()),
        (LossKind::Classification, OutputHead::Softmax) => Ok(()),
        (LossKind::Regression, OutputHead::Softmax) => {
            config_err("regression loss requires a linear output head")
        }
        (LossKind::Classification, OutputHead::Linear) => {
            config_err("classification loss requires a softmax output head")
        }
    }
}

fn check_batch(arch: &ModelArch, batch: &Batch) -> Result<()> {
    if batch.inputs.cols() != arch.input_dim() {
        return config_err(format!(
            "batch inputs have {} columns but the arch expects {}",
            batch.inputs.cols(),
            arch.input_dim()
        ));
    }
    if batch.targets.cols() != arch.output_dim() {
        return config_err(format!(
            "batch targets have {} columns but the arch expects {}",
            batch.targets.cols(),
            arch.output_dim()
        ));
    }
    Ok(())
}

/// `z = a W + b` for one layer; `w` is row-major `in x out`.
fn affine(a: &Mat, w: &[f64], b: &[f64], out: usize) -> Mat {
    let mut z = Mat::zeros(a.rows(), out);
    for n in 0..a.rows() {
        let a_row = a.row(n);
        let z_row = z.row_mut(n);
        z_row.copy_from_slice(b);
        for (i, &s) in a_row.iter().enumerate() {
            if s != 0.0 {
                let w_row = &w[i * out..(i + 1) * out];
                for (zj, &wj) in z_row.iter_mut().zip(w_row) {
                    *zj += s * wj;
                }
            }
        }
    }
    z
}

fn softmax_rows(z: &mut Mat) {
    for n in 0..z.rows() {
        let row = z.row_mut(n);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// All layer activations, inputs included; the last entry is the output.
fn forward_pass(arch: &ModelArch, theta: &[f64], inputs: &Mat) -> Vec<Mat> {
    let depth = arch.layer_sizes.len() - 1;
    let spans = arch.layer_spans();
    let mut acts = Vec::with_capacity(depth + 1);
    acts.push(inputs.clone());
    for l in 0..depth {
        let (off, _) = spans[l];
        let (fan_in, fan_out) = (arch.layer_sizes[l], arch.layer_sizes[l + 1]);
        let w = &theta[off..off + fan_in * fan_out];
        let b = &theta[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
        let mut z = affine(acts.last().unwrap(), w, b, fan_out);
        if l + 1 < depth {
            if arch.activation == Activation::Relu {
                for v in z.as_mut_slice() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        } else {
            match arch.output_head {
                OutputHead::Softmax => softmax_rows(&mut z),
                OutputHead::Linear => {}
            }
        }
        acts.push(z);
    }
    acts
}

/// Network output for a batch of inputs: class probabilities under a softmax
/// head, raw values under a linear head.
pub fn forward(arch: &ModelArch, theta: &ParameterVector, inputs: &Mat) -> Result<Mat> {
    arch.validate()?;
    check_theta(arch, theta)?;
    if inputs.cols() != arch.input_dim() {
        return config_err(format!(
            "inputs have {} columns but the arch expects {}",
            inputs.cols(),
            arch.input_dim()
        ));
    }
    Ok(forward_pass(arch, theta.values(), inputs).pop().unwrap())
}

/// Probabilities this close to 0 or 1 are clamped inside the cross-entropy
/// so saturated predictions stay finite; the gradient masks the same region.
const PROB_CLAMP: f64 = 1e-12;

fn loss_from_predictions(pred: &Mat, targets: &Mat, kind: LossKind) -> Result<f64> {
    let n = pred.rows() as f64;
    if let Some(i) = pred.as_slice().iter().position(|v| !v.is_finite()) {
        return numeric_err(format!(
            "non-finite prediction at row {} column {}",
            i / pred.cols(),
            i % pred.cols()
        ));
    }
    let total: f64 = match kind {
        LossKind::Regression => pred
            .as_slice()
            .iter()
            .zip(targets.as_slice())
            .map(|(p, y)| (p - y) * (p - y))
            .sum(),
        LossKind::Classification => pred
            .as_slice()
            .iter()
            .zip(targets.as_slice())
            .map(|(&p, &y)| {
                let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum(),
    };
    Ok(total / n)
}

/// Mean loss over the batch: squared error for regression, per-class binary
/// cross-entropy summed over classes for classification.
pub fn loss(arch: &ModelArch, theta: &ParameterVector, batch: &Batch, kind: LossKind) -> Result<f64> {
    arch.validate()?;
    check_theta(arch, theta)?;
    check_kind(arch, kind)?;
    check_batch(arch, batch)?;
    let pred = forward_pass(arch, theta.values(), &batch.inputs).pop().unwrap();
    loss_from_predictions(&pred, &batch.targets, kind)
}

fn gradient_unchecked(arch: &ModelArch, theta: &[f64], batch: &Batch, kind: LossKind) -> Result<Vec<f64>> {
    let depth = arch.layer_sizes.len() - 1;
    let spans = arch.layer_spans();
    let acts = forward_pass(arch, theta, &batch.inputs);
    let pred = acts.last().unwrap();
    let n = batch.len();
    let n_f = n as f64;
    let out_dim = arch.output_dim();

    if let Some(i) = pred.as_slice().iter().position(|v| !v.is_finite()) {
        return numeric_err(format!(
            "non-finite prediction at row {} column {}",
            i / out_dim,
            i % out_dim
        ));
    }

    // Loss derivative with respect to the output-layer pre-activations.
    let mut delta = Mat::zeros(n, out_dim);
    match kind {
        LossKind::Regression => {
            for i in 0..n * out_dim {
                delta.as_mut_slice()[i] =
                    2.0 * (pred.as_slice()[i] - batch.targets.as_slice()[i]) / n_f;
            }
        }
        LossKind::Classification => {
            // d/dz of -sum_c [y_c ln p_c + (1-y_c) ln(1-p_c)] with p = softmax(z)
            // is p_j * sum_c a_c - a_j, where a_c = y_c - (1-y_c) p_c/(1-p_c).
            // Terms clamped in the loss contribute zero, matching its value.
            for r in 0..n {
                let p_row = pred.row(r);
                let y_row = batch.targets.row(r);
                let mut a = vec![0.0; out_dim];
                let mut s = 0.0;
                for c in 0..out_dim {
                    let p = p_row[c];
                    if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                        a[c] = y_row[c] - (1.0 - y_row[c]) * p / (1.0 - p);
                        s += a[c];
                    }
                }
                let d_row = delta.row_mut(r);
                for c in 0..out_dim {
                    d_row[c] = (p_row[c] * s - a[c]) / n_f;
                }
            }
        }
    }

    let mut grad = vec![0.0; arch.param_count()];
    for l in (0..depth).rev() {
        let (off, _) = spans[l];
        let (fan_in, fan_out) = (arch.layer_sizes[l], arch.layer_sizes[l + 1]);
        let a_in = &acts[l];
        {
            let (g_w, rest) = grad[off..].split_at_mut(fan_in * fan_out);
            let g_b = &mut rest[..fan_out];
            for r in 0..n {
                let a_row = a_in.row(r);
                let d_row = delta.row(r);
                for (i, &ai) in a_row.iter().enumerate() {
                    if ai != 0.0 {
                        let g_row = &mut g_w[i * fan_out..(i + 1) * fan_out];
                        for (g, &d) in g_row.iter_mut().zip(d_row) {
                            *g += ai * d;
                        }
                    }
                }
                for (g, &d) in g_b.iter_mut().zip(d_row) {
                    *g += d;
                }
            }
        }
        if l > 0 {
            let w = &theta[off..off + fan_in * fan_out];
            let mut prev = Mat::zeros(n, fan_in);
            for r in 0..n {
                let d_row = delta.row(r);
                let a_row = a_in.row(r);
                let p_row = prev.row_mut(r);
                for i in 0..fan_in {
                    // ReLU derivative: pass-through only where the unit fired.
                    let active = arch.activation == Activation::Identity || a_row[i] > 0.0;
                    if active {
                        let w_row = &w[i * fan_out..(i + 1) * fan_out];
                        p_row[i] = w_row.iter().zip(d_row).map(|(wj, dj)| wj * dj).sum();
                    }
                }
            }
            delta = prev;
        }
    }
    Ok(grad)
}

/// Analytic gradient of `loss` with respect to every parameter.
pub fn gradient(arch: &ModelArch, theta: &ParameterVector, batch: &Batch, kind: LossKind) -> Result<ParameterVector> {
    arch.validate()?;
    check_theta(arch, theta)?;
    check_kind(arch, kind)?;
    check_batch(arch, batch)?;
    let grad = gradient_unchecked(arch, theta.values(), batch, kind)?;
    Ok(ParameterVector { values: grad, layer_spans: theta.layer_spans().to_vec() })
}

/// A differentiable objective over a flat parameter vector. The dense net
/// and the quadratic probes in `analysis` both implement this, so the
/// regularized-objective machinery below is shared.
pub trait Objective {
    fn dim(&self) -> usize;
    fn loss_at(&self, theta: &[f64]) -> Result<f64>;
    fn gradient_at(&self, theta: &[f64]) -> Result<Vec<f64>>;
}

/// `loss`/`gradient` on a fixed batch, viewed as an [`Objective`].
pub struct NetObjective<'a> {
    arch: &'a ModelArch,
    batch: &'a Batch,
    kind: LossKind,
}

impl<'a> NetObjective<'a> {
    pub fn new(arch: &'a ModelArch, batch: &'a Batch, kind: LossKind) -> Result<Self> {
        arch.validate()?;
        check_kind(arch, kind)?;
        check_batch(arch, batch)?;
        Ok(NetObjective { arch, batch, kind })
    }
}

impl Objective for NetObjective<'_> {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn loss_at(&self, theta: &[f64]) -> Result<f64> {
        let pred = forward_pass(self.arch, theta, &self.batch.inputs).pop().unwrap();
        loss_from_predictions(&pred, &self.batch.targets, self.kind)
    }

    fn gradient_at(&self, theta: &[f64]) -> Result<Vec<f64>> {
        gradient_unchecked(self.arch, theta, self.batch, self.kind)
    }
}

fn check_dim(obj: &impl Objective, theta: &[f64]) -> Result<()> {
    if theta.len() != obj.dim() {
        return config_err(format!(
            "parameter vector has {} values but the objective needs {}",
            theta.len(),
            obj.dim()
        ));
    }
    Ok(())
}

/// Hessian-vector product by central differences of the analytic gradient:
/// `(g(theta + eps v) - g(theta - eps v)) / (2 eps)` with
/// `eps = 1e-4 (1 + |theta|) / (|v| + 1e-12)`. A zero `v` yields zeros.
pub fn hvp_of(obj: &impl Objective, theta: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_dim(obj, theta)?;
    if v.len() != theta.len() {
        return config_err(format!(
            "direction vector has {} values but the objective needs {}",
            v.len(),
            obj.dim()
        ));
    }
    let v_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if v_norm == 0.0 {
        return Ok(vec![0.0; theta.len()]);
    }
    let theta_norm = theta.iter().map(|x| x * x).sum::<f64>().sqrt();
    let eps = 1e-4 * (1.0 + theta_norm) / (v_norm + 1e-12);
    let plus: Vec<f64> = theta.iter().zip(v).map(|(t, x)| t + eps * x).collect();
    let minus: Vec<f64> = theta.iter().zip(v).map(|(t, x)| t - eps * x).collect();
    let g_plus = obj.gradient_at(&plus)?;
    let g_minus = obj.gradient_at(&minus)?;
    Ok(g_plus
        .iter()
        .zip(&g_minus)
        .map(|(p, m)| (p - m) / (2.0 * eps))
        .collect())
}

/// Noise-regularized objective value: `F(theta) + noise_var * |grad F|^2`.
/// With `noise_var == 0` this is bit-for-bit the plain loss.
pub fn regularized_loss_of(obj: &impl Objective, theta: &[f64], noise_var: f64) -> Result<f64> {
    check_dim(obj, theta)?;
    if noise_var < 0.0 {
        return config_err("noise variance must be nonnegative");
    }
    if noise_var == 0.0 {
        return obj.loss_at(theta);
    }
    let g = obj.gradient_at(theta)?;
    let g_sq: f64 = g.iter().map(|x| x * x).sum();
    Ok(obj.loss_at(theta)? + noise_var * g_sq)
}

/// Exact chain-rule gradient of [`regularized_loss_of`]:
/// `g + 2 noise_var H g`, with `H g` from [`hvp_of`].
pub fn regularized_gradient_of(obj: &impl Objective, theta: &[f64], noise_var: f64) -> Result<Vec<f64>> {
    check_dim(obj, theta)?;
    if noise_var < 0.0 {
        return config_err("noise variance must be nonnegative");
    }
    let g = obj.gradient_at(theta)?;
    if noise_var == 0.0 {
        return Ok(g);
    }
    let hg = hvp_of(obj, theta, &g)?;
    Ok(g.iter().zip(&hg).map(|(gi, hi)| gi + 2.0 * noise_var * hi).collect())
}

/// [`hvp_of`] for the dense net on a fixed batch.
pub fn hvp(arch: &ModelArch, theta: &ParameterVector, batch: &Batch, kind: LossKind, v: &ParameterVector) -> Result<ParameterVector> {
    check_theta(arch, theta)?;
    let obj = NetObjective::new(arch, batch, kind)?;
    let out = hvp_of(&obj, theta.values(), v.values())?;
    Ok(ParameterVector { values: out, layer_spans: theta.layer_spans().to_vec() })
}

/// [`regularized_loss_of`] for the dense net on a fixed batch.
pub fn regularized_loss(arch: &ModelArch, theta: &ParameterVector, batch: &Batch, kind: LossKind, noise_var: f64) -> Result<f64> {
    check_theta(arch, theta)?;
    let obj = NetObjective::new(arch, batch, kind)?;
    regularized_loss_of(&obj, theta.values(), noise_var)
}

/// [`regularized_gradient_of`] for the dense net on a fixed batch.
pub fn regularized_gradient(arch: &ModelArch, theta: &ParameterVector, batch: &Batch, kind: LossKind, noise_var: f64) -> Result<ParameterVector> {
    check_theta(arch, theta)?;
    let obj = NetObjective::new(arch, batch, kind)?;
    let out = regularized_gradient_of(&obj, theta.values(), noise_var)?;
    Ok(ParameterVector { values: out, layer_spans: theta.layer_spans().to_vec() })
}

/// Stable 64-bit hash of the exact bit patterns, for trajectory comparisons.
pub fn bits_hash(values: &[f64]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = OFFSET;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(PRIME);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngHub;
    use rand::Rng;

    fn arch(sizes: &[usize], activation: Activation, head: OutputHead) -> ModelArch {
        ModelArch::new(sizes.to_vec(), activation, head).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale == 0.0 {
            0.0
        } else {
            (a - b).abs() / scale
        }
    }

    /// FD-vs-analytic comparison used by the gradient checks: relative
    /// error for coordinates of real magnitude, absolute floor near zero.
    fn grad_close(analytic: f64, fd: f64, tol: f64) -> bool {
        (analytic - fd).abs() <= 1e-8 || rel_err(analytic, fd) <= tol
    }

    /// Independent central-difference oracle over any scalar function.
    fn central_diff<F: Fn(&[f64]) -> f64>(f: &F, theta: &[f64], h: f64) -> Vec<f64> {
        let mut g = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let mut plus = theta.to_vec();
            let mut minus = theta.to_vec();
            plus[i] += h;
            minus[i] -= h;
            g.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
        g
    }

    #[test]
    fn param_count_examples() {
        let small = arch(&[4, 3], Activation::Identity, OutputHead::Linear);
        assert_eq!(small.param_count(), 15);
        let desk = arch(&[64, 32, 10], Activation::Relu, OutputHead::Softmax);
        assert_eq!(desk.param_count(), 2410);
        assert_eq!(desk.layer_spans(), vec![(0, 2080), (2080, 330)]);
    }

    #[test]
    fn identity_single_layer_passes_input_through() {
        let a = arch(&[3, 3], Activation::Identity, OutputHead::Linear);
        let mut theta = ParameterVector::zeros(&a);
        for i in 0..3 {
            theta.values_mut()[i * 3 + i] = 1.0;
        }
        let x = Mat::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let y = forward(&a, &theta, &x).unwrap();
        assert_eq!(y.row(0), x.row(0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let a = arch(&[4, 8, 5], Activation::Relu, OutputHead::Softmax);
        let mut rng = RngHub::new(7).stream("net");
        let theta = init_glorot(&a, &mut rng);
        let x = Mat::from_rows(&[
            (0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>(),
            (0..4).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>(),
        ])
        .unwrap();
        let p = forward(&a, &theta, &x).unwrap();
        for r in 0..p.rows() {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(r).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn uniform_softmax_two_class_loss() {
        // Zero weights over two classes give p = (1/2, 1/2); the summed
        // per-class cross-entropy is then 2 ln 2.
        let a = arch(&[1, 2], Activation::Identity, OutputHead::Softmax);
        let theta = ParameterVector::zeros(&a);
        let batch = Batch::new(
            Mat::from_rows(&[vec![0.3]]).unwrap(),
            Mat::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let l = loss(&a, &theta, &batch, LossKind::Classification).unwrap();
        assert!((l - 1.3862943611198906).abs() < 1e-15);
    }

    #[test]
    fn regression_loss_single_sample() {
        // Prediction (1, 2) against target (0, 0) costs 1^2 + 2^2 = 5.
        let a = arch(&[2, 2], Activation::Identity, OutputHead::Linear);
        let mut theta = ParameterVector::zeros(&a);
        theta.values_mut()[0] = 1.0; // w00
        theta.values_mut()[3] = 2.0; // w11
        let batch = Batch::new(
            Mat::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            Mat::from_rows(&[vec![0.0, 0.0]]).unwrap(),
        )
        .unwrap();
        let l = loss(&a, &theta, &batch, LossKind::Regression).unwrap();
        assert_eq!(l, 5.0);
    }

    #[test]
    fn kind_and_head_must_match() {
        let a = arch(&[2, 2], Activation::Identity, OutputHead::Linear);
        let theta = ParameterVector::zeros(&a);
        let batch = Batch::new(
            Mat::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            Mat::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        )
        .unwrap();
        assert!(loss(&a, &theta, &batch, LossKind::Classification).is_err());
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let a = arch(&[3, 2], Activation::Identity, OutputHead::Linear);
        let theta = ParameterVector::zeros(&a);
        let batch = Batch::new(
            Mat::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            Mat::from_rows(&[vec![0.0, 0.0]]).unwrap(),
        )
        .unwrap();
        match loss(&a, &theta, &batch, LossKind::Regression) {
            Err(crate::Error::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_prediction_names_offender() {
        let a = arch(&[2, 2], Activation::Identity, OutputHead::Linear);
        let mut theta = ParameterVector::zeros(&a);
        theta.values_mut()[0] = f64::MAX;
        theta.values_mut()[2] = f64::MAX;
        let batch = Batch::new(
            Mat::from_rows(&[vec![f64::MAX, 1.0]]).unwrap(),
            Mat::from_rows(&[vec![0.0, 0.0]]).unwrap(),
        )
        .unwrap();
        match loss(&a, &theta, &batch, LossKind::Regression) {
            Err(crate::Error::Numeric(msg)) => assert!(msg.contains("row 0")),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    /// Random small net plus batch for gradient checking.
    fn random_case(seed: u64, classification: bool) -> (ModelArch, ParameterVector, Batch) {
        let hub = RngHub::new(seed);
        let mut rng = hub.stream("case");
        let depth = rng.random_range(1..=2usize);
        let mut sizes = vec![rng.random_range(2..=6usize)];
        for _ in 0..depth {
            sizes.push(rng.random_range(2..=6usize));
        }
        let (activation, head, kind) = if classification {
            (Activation::Relu, OutputHead::Softmax, LossKind::Classification)
        } else {
            (
                if seed % 2 == 0 { Activation::Relu } else { Activation::Identity },
                OutputHead::Linear,
                LossKind::Regression,
            )
        };
        let a = arch(&sizes, activation, head);
        let mut theta = init_glorot(&a, &mut rng);
        for v in theta.values_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let n = rng.random_range(2..=5usize);
        let inputs = Mat::from_rows(
            &(0..n)
                .map(|_| (0..sizes[0]).map(|_| rng.random_range(-1.5..1.5)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let out = *sizes.last().unwrap();
        let targets = if classification {
            let mut t = Mat::zeros(n, out);
            for r in 0..n {
                t.set(r, rng.random_range(0..out), 1.0);
            }
            t
        } else {
            Mat::from_rows(
                &(0..n)
                    .map(|_| (0..out).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        (a, theta, Batch::new(inputs, targets).unwrap())
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..12u64 {
            let (a, theta, batch) = random_case(seed, seed % 2 == 0);
            let kind = if seed % 2 == 0 { LossKind::Classification } else { LossKind::Regression };
            let analytic = gradient(&a, &theta, &batch, kind).unwrap();
            let f = |t: &[f64]| {
                let pv = ParameterVector::new(t.to_vec(), a.layer_spans()).unwrap();
                loss(&a, &pv, &batch, kind).unwrap()
            };
            let fd = central_diff(&f, theta.values(), 1e-5);
            for (i, (&g, &d)) in analytic.values().iter().zip(&fd).enumerate() {
                assert!(
                    grad_close(g, d, 1e-5),
                    "seed {seed} coordinate {i}: analytic {g} vs fd {d}"
                );
            }
        }
    }

    #[test]
    fn regularized_gradient_matches_central_differences() {
        for seed in 0..6u64 {
            let (a, theta, batch) = random_case(seed, false);
            let noise_var = [0.1, 0.5, 1.0][seed as usize % 3];
            let analytic = regularized_gradient(&a, &theta, &batch, LossKind::Regression, noise_var).unwrap();
            let f = |t: &[f64]| {
                let pv = ParameterVector::new(t.to_vec(), a.layer_spans()).unwrap();
                regularized_loss(&a, &pv, &batch, LossKind::Regression, noise_var).unwrap()
            };
            let fd = central_diff(&f, theta.values(), 1e-5);
            for (i, (&g, &d)) in analytic.values().iter().zip(&fd).enumerate() {
                assert!(
                    grad_close(g, d, 1e-4),
                    "seed {seed} coordinate {i}: analytic {g} vs fd {d}"
                );
            }
        }
    }

    #[test]
    fn zero_noise_var_is_bitwise_plain() {
        let (a, theta, batch) = random_case(3, true);
        let plain = loss(&a, &theta, &batch, LossKind::Classification).unwrap();
        let reg = regularized_loss(&a, &theta, &batch, LossKind::Classification, 0.0).unwrap();
        assert_eq!(plain.to_bits(), reg.to_bits());
        let g_plain = gradient(&a, &theta, &batch, LossKind::Classification).unwrap();
        let g_reg = regularized_gradient(&a, &theta, &batch, LossKind::Classification, 0.0).unwrap();
        assert_eq!(g_plain, g_reg);
    }

    /// `(1/n) sum_i |x_i W + b|^2` is the quadratic form
    /// `(1/2) theta' A theta` with `A = (2/n) Xtilde' Xtilde`, which gives an
    /// exact oracle for the Hessian-vector product.
    #[test]
    fn hvp_on_quadratic_matches_matrix_oracle() {
        let d = 3;
        let a = arch(&[d, 1], Activation::Identity, OutputHead::Linear);
        let hub = RngHub::new(11);
        let mut rng = hub.stream("hvp");
        let n = 5;
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let batch = Batch::new(
            Mat::from_rows(&rows).unwrap(),
            Mat::zeros(n, 1),
        )
        .unwrap();
        let p = d + 1;
        let mut a_mat = vec![vec![0.0; p]; p];
        for row in &rows {
            let mut xt: Vec<f64> = row.clone();
            xt.push(1.0);
            for i in 0..p {
                for j in 0..p {
                    a_mat[i][j] += 2.0 * xt[i] * xt[j] / n as f64;
                }
            }
        }
        let theta = ParameterVector::from_arch(
            &a,
            (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let v = ParameterVector::from_arch(
            &a,
            (0..p).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let hv = hvp(&a, &theta, &batch, LossKind::Regression, &v).unwrap();
        for i in 0..p {
            let oracle: f64 = (0..p).map(|j| a_mat[i][j] * v.values()[j]).sum();
            assert!(
                (hv.values()[i] - oracle).abs() < 1e-8,
                "coordinate {i}: hvp {} vs oracle {oracle}",
                hv.values()[i]
            );
        }
    }

    #[test]
    fn hvp_zero_direction_returns_zeros() {
        let (a, theta, batch) = random_case(5, false);
        let v = ParameterVector::new(vec![0.0; theta.len()], theta.layer_spans().to_vec()).unwrap();
        let hv = hvp(&a, &theta, &batch, LossKind::Regression, &v).unwrap();
        assert!(hv.values().iter().all(|&x| x == 0.0));
    }

    /// Hand evaluation of the regularized objective on F = |theta|^2 / 2.
    #[test]
    fn regularized_loss_on_abstract_quadratic() {
        struct HalfNormSq;
        impl Objective for HalfNormSq {
            fn dim(&self) -> usize {
                2
            }
            fn loss_at(&self, theta: &[f64]) -> Result<f64> {
                Ok(0.5 * theta.iter().map(|x| x * x).sum::<f64>())
            }
            fn gradient_at(&self, theta: &[f64]) -> Result<Vec<f64>> {
                Ok(theta.to_vec())
            }
        }
        let l = regularized_loss_of(&HalfNormSq, &[1.0, 0.0], 0.5).unwrap();
        assert_eq!(l, 1.0);
        // Exact chain rule: g + 2 var H g = theta + 2 * 0.5 * theta.
        let g = regularized_gradient_of(&HalfNormSq, &[1.0, 0.0], 0.5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-9);
        assert!(g[1].abs() < 1e-12);
    }

    #[test]
    fn parameter_vector_validates_spans_and_values() {
        assert!(ParameterVector::new(vec![1.0, 2.0], vec![(0, 2)]).is_ok());
        assert!(ParameterVector::new(vec![1.0, 2.0], vec![(0, 1)]).is_err());
        assert!(ParameterVector::new(vec![1.0, 2.0], vec![(0, 1), (2, 1)]).is_err());
        assert!(ParameterVector::new(vec![f64::NAN, 2.0], vec![(0, 2)]).is_err());
    }

    #[test]
    fn bits_hash_distinguishes_values() {
        let a = bits_hash(&[1.0, 2.0]);
        let b = bits_hash(&[1.0, 2.0000000001]);
        assert_ne!(a, b);
        assert_eq!(a, bits_hash(&[1.0, 2.0]));
    }
}
