//! Numerical verification of the theory track: smoothness scaling of the
//! regularized objective, the O(1/t) gradient-descent bound, uplink noise
//! ordering, and convexity probes.
//!
//! The theory statements treat the noise regularizer as a uniform curvature
//! scale: F_reg = (1 + noise_var) * F, so its gradient is (1 + noise_var)
//! times the plain one. That is the convention the smoothness-scaling and
//! convergence-bound checks are stated in, and the one verified here. The training
//! path (the model module) differentiates the regularized loss exactly
//! instead; the two agree to first order in noise_var.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::channel::{aggregated_uplink_variance, paper_uplink_variance};
use crate::error::{config_err, numeric_err, Result};
use crate::mat::Mat;
use crate::model::Objective;
use crate::rng::RngHub;

/// Quadratic test objective ½θᵀAθ with A symmetric PSD: the minimizer is 0,
/// the smoothness constant is the largest eigenvalue.
#[derive(Debug, Clone)]
pub struct ConvexProbe {
    a: Mat,
    beta: f64,
    top: Vec<f64>,
}

const SYMMETRY_TOL: f64 = 1e-12;

impl ConvexProbe {
    /// Diagonal quadratic with the given (nonnegative) curvature per axis.
    pub fn diagonal(eigens: &[f64]) -> Result<Self> {
        validate_eigens(eigens)?;
        let dim = eigens.len();
        let mut a = Mat::zeros(dim, dim);
        for (i, &e) in eigens.iter().enumerate() {
            a.set(i, i, e);
        }
        let (arg, &beta) = eigens
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .expect("nonempty");
        let mut top = vec![0.0; dim];
        top[arg] = 1.0;
        Ok(ConvexProbe { a, beta, top })
    }

    /// QΛQᵀ for a seeded random orthogonal Q: known eigenvalues, dense matrix.
    pub fn from_eigens(eigens: &[f64], seed: u64) -> Result<Self> {
        validate_eigens(eigens)?;
        let dim = eigens.len();
        let q = random_orthogonal(dim, seed);
        // A = Q diag(eigens) Qᵀ, symmetrized to kill rounding skew.
        let mut a = Mat::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                let mut sum = 0.0;
                for (l, &e) in eigens.iter().enumerate() {
                    sum += q.get(i, l) * e * q.get(j, l);
                }
                a.set(i, j, sum);
            }
        }
        for i in 0..dim {
            for j in 0..i {
                let s = 0.5 * (a.get(i, j) + a.get(j, i));
                a.set(i, j, s);
                a.set(j, i, s);
            }
        }
        let (arg, &beta) = eigens
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .expect("nonempty");
        let top: Vec<f64> = (0..dim).map(|i| q.get(i, arg)).collect();
        Ok(ConvexProbe { a, beta, top })
    }

    /// Random probe with eigenvalues uniform in [0.1, 5].
    pub fn random(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return config_err("probe dimension must be positive");
        }
        let mut rng = RngHub::new(seed).stream("probe/eigens");
        let eigens: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..5.0)).collect();
        Self::from_eigens(&eigens, seed ^ 0x9e37_79b9_7f4a_7c15)
    }

    /// Wraps an explicit symmetric matrix; the smoothness constant comes
    /// from power iteration.
    pub fn from_matrix(a: Mat) -> Result<Self> {
        if a.rows() != a.cols() || a.rows() == 0 {
            return config_err("probe matrix must be square and nonempty");
        }
        for i in 0..a.rows() {
            for j in 0..i {
                if (a.get(i, j) - a.get(j, i)).abs() > SYMMETRY_TOL {
                    return config_err(format!(
                        "probe matrix is not symmetric at ({i}, {j})"
                    ));
                }
            }
        }
        let (beta, top) = power_iteration(&a)?;
        Ok(ConvexProbe { a, beta, top })
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn matrix(&self) -> &Mat {
        &self.a
    }

    /// Largest eigenvalue: the plain-loss smoothness constant.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn top_eigenvector(&self) -> &[f64] {
        &self.top
    }

    fn apply(&self, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (i, o) in out.iter_mut().enumerate() {
            let row = self.a.row(i);
            *o = row.iter().zip(theta).map(|(a, t)| a * t).sum();
        }
        out
    }
}

impl Objective for ConvexProbe {
    fn dim(&self) -> usize {
        self.a.rows()
    }

    fn loss_at(&self, theta: &[f64]) -> Result<f64> {
        if theta.len() != self.dim() {
            return config_err(format!(
                "probe expects {} coordinates, got {}",
                self.dim(),
                theta.len()
            ));
        }
        Ok(0.5 * self.apply(theta).iter().zip(theta).map(|(g, t)| g * t).sum::<f64>())
    }

    fn gradient_at(&self, theta: &[f64]) -> Result<Vec<f64>> {
        if theta.len() != self.dim() {
            return config_err(format!(
                "probe expects {} coordinates, got {}",
                self.dim(),
                theta.len()
            ));
        }
        Ok(self.apply(theta))
    }
}

fn validate_eigens(eigens: &[f64]) -> Result<()> {
    if eigens.is_empty() {
        return config_err("probe needs at least one eigenvalue");
    }
    if eigens.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return config_err("probe eigenvalues must be finite and nonnegative");
    }
    Ok(())
}

/// Orthogonal matrix via Gram-Schmidt on a seeded Gaussian square matrix.
fn random_orthogonal(dim: usize, seed: u64) -> Mat {
    let mut rng = RngHub::new(seed).stream("probe/orthogonal");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        for c in &cols {
            let dot: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= dot * ci;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // essentially impossible; redraw
        }
        for vi in &mut v {
            *vi /= norm;
        }
        cols.push(v);
    }
    let mut q = Mat::zeros(dim, dim);
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            q.set(i, j, v);
        }
    }
    q
}

fn power_iteration(a: &Mat) -> Result<(f64, Vec<f64>)> {
    let dim = a.rows();
    let mut rng = RngHub::new(0x5eed).stream("probe/power");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
    let mut lambda = 0.0;
    for _ in 0..500 {
        let mut w = vec![0.0; dim];
        for (i, wi) in w.iter_mut().enumerate() {
            *wi = a.row(i).iter().zip(&v).map(|(x, y)| x * y).sum();
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok((0.0, v)); // zero matrix
        }
        for wi in &mut w {
            *wi /= norm;
        }
        let next: f64 = {
            let mut aw = vec![0.0; dim];
            for (i, o) in aw.iter_mut().enumerate() {
                *o = a.row(i).iter().zip(&w).map(|(x, y)| x * y).sum();
            }
            aw.iter().zip(&w).map(|(x, y)| x * y).sum()
        };
        v = w;
        if (next - lambda).abs() <= 1e-13 * next.abs().max(1.0) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    if !lambda.is_finite() {
        return numeric_err("power iteration diverged");
    }
    Ok((lambda, v))
}

/// Loss under the theory convention: a uniform (1 + noise_var) scale.
pub fn linearized_loss(obj: &impl Objective, theta: &[f64], noise_var: f64) -> Result<f64> {
    check_noise_var(noise_var)?;
    Ok((1.0 + noise_var) * obj.loss_at(theta)?)
}

/// Gradient under the theory convention.
pub fn linearized_gradient(obj: &impl Objective, theta: &[f64], noise_var: f64) -> Result<Vec<f64>> {
    check_noise_var(noise_var)?;
    let mut g = obj.gradient_at(theta)?;
    for v in &mut g {
        *v *= 1.0 + noise_var;
    }
    Ok(g)
}

fn check_noise_var(noise_var: f64) -> Result<()> {
    if !noise_var.is_finite() || noise_var < 0.0 {
        return config_err(format!("noise_var must be finite and nonnegative, got {noise_var}"));
    }
    Ok(())
}

/// Largest observed gradient-difference ratio over the probe pairs: an
/// empirical smoothness constant of the regularized objective. Coincident
/// pairs are skipped with a warning.
pub fn estimate_smoothness(
    obj: &impl Objective,
    noise_var: f64,
    pairs: &[(Vec<f64>, Vec<f64>)],
) -> Result<f64> {
    check_noise_var(noise_var)?;
    let mut best: Option<f64> = None;
    for (idx, (a, b)) in pairs.iter().enumerate() {
        let dist = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        if dist < 1e-12 {
            log::warn!("skipping coincident probe pair {idx}");
            continue;
        }
        let ga = linearized_gradient(obj, a, noise_var)?;
        let gb = linearized_gradient(obj, b, noise_var)?;
        let diff = ga
            .iter()
            .zip(&gb)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let ratio = diff / dist;
        best = Some(best.map_or(ratio, |b: f64| b.max(ratio)));
    }
    best.ok_or_else(|| crate::Error::Numeric("no distinct probe pairs to estimate smoothness".into()))
}

/// Random probe pairs plus one pair aligned with the top eigenvector, so
/// the estimate cannot undershoot the largest curvature direction.
pub fn probe_pairs(probe: &ConvexProbe, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = RngHub::new(seed).stream("smoothness/pairs");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let dim = probe.dim();
    let mut pairs = Vec::with_capacity(count + 1);
    for _ in 0..count {
        let a: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        pairs.push((a, b));
    }
    pairs.push((vec![0.0; dim], probe.top_eigenvector().to_vec()));
    pairs
}

/// One round of the convergence-bound check.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub t: usize,
    /// F_reg(θ_t) − F_reg(θ*)
    pub lhs: f64,
    /// ‖θ_0 − θ*‖² / (2ηt)
    pub rhs: f64,
    pub satisfied: bool,
}

const BOUND_SLACK: f64 = 1e-9;

/// Runs exact gradient descent on the regularized probe objective and
/// checks the O(1/t) suboptimality bound at every step.
pub fn check_theorem1(
    probe: &ConvexProbe,
    eta: f64,
    noise_var: f64,
    theta0: &[f64],
    t_max: usize,
) -> Result<Vec<BoundReport>> {
    check_noise_var(noise_var)?;
    if theta0.len() != probe.dim() {
        return config_err(format!(
            "theta0 has {} coordinates, probe expects {}",
            theta0.len(),
            probe.dim()
        ));
    }
    if t_max == 0 {
        return config_err("need at least one descent step");
    }
    let beta_bar = (1.0 + noise_var) * probe.beta();
    if beta_bar <= 0.0 {
        return config_err("probe curvature is zero; the step-size bound is vacuous");
    }
    let limit = 1.0 / beta_bar;
    if !(eta > 0.0) || eta > limit * (1.0 + 1e-12) {
        return config_err(format!(
            "step size {eta} violates eta <= 1/((1+{noise_var})*{}) = {limit}",
            probe.beta()
        ));
    }
    // θ* = 0 and F_reg(θ*) = 0 for every PSD quadratic.
    let init_dist_sq: f64 = theta0.iter().map(|x| x * x).sum();
    let mut theta = theta0.to_vec();
    let mut reports = Vec::with_capacity(t_max);
    for t in 1..=t_max {
        let g = linearized_gradient(probe, &theta, noise_var)?;
        for (x, gi) in theta.iter_mut().zip(&g) {
            *x -= eta * gi;
        }
        let lhs = linearized_loss(probe, &theta, noise_var)?;
        let rhs = init_dist_sq / (2.0 * eta * t as f64);
        reports.push(BoundReport { t, lhs, rhs, satisfied: lhs <= rhs * (1.0 + BOUND_SLACK) });
    }
    Ok(reports)
}

/// Exact aggregated uplink variances for a full-FL run vs an HFCL run where
/// only `active` clients transmit noisily.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseOrdering {
    pub var_fl: f64,
    pub var_hfcl: f64,
    /// var_hfcl <= var_fl; always true for the exact formula when the HFCL
    /// active set is a subset of the FL clients with the same variances.
    pub ordered: bool,
}

/// Compares the exact aggregate noise of FL (all clients transmit) against
/// HFCL (only the active subset transmits). `clients` is (D_k, σ_k²).
pub fn noise_ordering(clients: &[(u64, f64)], active: &[usize]) -> Result<NoiseOrdering> {
    if clients.is_empty() {
        return config_err("noise ordering needs at least one client");
    }
    let mut seen = vec![false; clients.len()];
    for &i in active {
        if i >= clients.len() {
            return config_err(format!("active index {i} out of range"));
        }
        if seen[i] {
            return config_err(format!("active index {i} listed twice"));
        }
        seen[i] = true;
    }
    let d_total: u64 = clients.iter().map(|&(d, _)| d).sum();
    let var_fl = aggregated_uplink_variance(clients, d_total)?;
    let subset: Vec<(u64, f64)> = active.iter().map(|&i| clients[i]).collect();
    let var_hfcl = aggregated_uplink_variance(&subset, d_total)?;
    Ok(NoiseOrdering { var_fl, var_hfcl, ordered: var_hfcl <= var_fl })
}

/// A configuration where the closed-form variance expression (1/D)ΣD_kσ_k²
/// for the HFCL active subset exceeds the exact FL variance, inverting the
/// expected ordering even though the exact HFCL variance stays below it.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderingInversion {
    pub d: Vec<u64>,
    pub active: Vec<usize>,
    pub sigma_sq: f64,
    pub hfcl_closed_form: f64,
    pub fl_exact: f64,
    pub hfcl_exact: f64,
}

/// Brute-force search over small client configurations for an ordering
/// inversion under the closed-form variance expression.
pub fn ordering_inversion_instance() -> Option<OrderingInversion> {
    let sigma_sq = 1.0;
    for k in 2..=4usize {
        // Data sizes from a small grid; subsets of active clients.
        let mut sizes = vec![1u64; k];
        loop {
            let d_total: u64 = sizes.iter().sum();
            for mask in 1..(1u32 << k) - 1 {
                let active: Vec<usize> = (0..k).filter(|&i| mask & (1 << i) != 0).collect();
                let all: Vec<(u64, f64)> = sizes.iter().map(|&d| (d, sigma_sq)).collect();
                let subset: Vec<(u64, f64)> = active.iter().map(|&i| all[i]).collect();
                let fl_exact = aggregated_uplink_variance(&all, d_total).ok()?;
                let hfcl_exact = aggregated_uplink_variance(&subset, d_total).ok()?;
                let hfcl_closed_form = paper_uplink_variance(&subset, d_total).ok()?;
                if hfcl_closed_form > fl_exact && hfcl_exact <= fl_exact {
                    return Some(OrderingInversion {
                        d: sizes.clone(),
                        active,
                        sigma_sq,
                        hfcl_closed_form,
                        fl_exact,
                        hfcl_exact,
                    });
                }
            }
            // Advance the size grid: odometer over {1, ..., 9}^k.
            let mut i = 0;
            loop {
                if i == k {
                    break;
                }
                sizes[i] += 1;
                if sizes[i] <= 9 {
                    break;
                }
                sizes[i] = 1;
                i += 1;
            }
            if i == k {
                break;
            }
        }
    }
    None
}

/// Checks F((1−λ)θ + λθ′) ≤ (1−λ)F(θ) + λF(θ′) + 1e-9 on every triple.
pub fn convexity_probe(
    obj: &impl Objective,
    triples: &[(Vec<f64>, Vec<f64>, f64)],
) -> Result<bool> {
    if triples.len() < 10 {
        return config_err(format!(
            "convexity probe needs at least 10 triples, got {}",
            triples.len()
        ));
    }
    for (a, b, lambda) in triples {
        if !(0.0..=1.0).contains(lambda) {
            return config_err(format!("lambda must lie in [0, 1], got {lambda}"));
        }
        let mid: Vec<f64> = a
            .iter()
            .zip(b)
            .map(|(x, y)| (1.0 - lambda) * x + lambda * y)
            .collect();
        let lhs = obj.loss_at(&mid)?;
        let rhs = (1.0 - lambda) * obj.loss_at(a)? + lambda * obj.loss_at(b)?;
        if lhs > rhs + 1e-9 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Seeded random triples for the convexity probe.
pub fn convexity_triples(dim: usize, count: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>, f64)> {
    let mut rng = RngHub::new(seed).stream("convexity/triples");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..count)
        .map(|_| {
            let a: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            let b: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
            (a, b, rng.random_range(0.0..=1.0))
        })
        .collect()
}

/// Random search for a convexity violation; returns the first offending
/// triple, if any.
pub fn find_nonconvex_triple(
    obj: &impl Objective,
    tries: usize,
    seed: u64,
) -> Result<Option<(Vec<f64>, Vec<f64>, f64)>> {
    let mut rng = RngHub::new(seed).stream("convexity/search");
    let normal = Normal::new(0.0, 2.0).expect("normal");
    for _ in 0..tries {
        let a: Vec<f64> = (0..obj.dim()).map(|_| normal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..obj.dim()).map(|_| normal.sample(&mut rng)).collect();
        let lambda: f64 = rng.random_range(0.05..0.95);
        let mid: Vec<f64> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| (1.0 - lambda) * x + lambda * y)
            .collect();
        let lhs = obj.loss_at(&mid)?;
        let rhs = (1.0 - lambda) * obj.loss_at(&a)? + lambda * obj.loss_at(&b)?;
        if lhs > rhs + 1e-7 {
            return Ok(Some((a, b, lambda)));
        }
    }
    Ok(None)
}
