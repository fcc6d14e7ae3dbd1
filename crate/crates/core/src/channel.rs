//! Noisy-link model: SNR-derived noise variances, AWGN perturbation,
//! per-layer uniform quantization, and weighted model aggregation.

use rand_distr::{Distribution, Normal};

use crate::error::{config_err, numeric_err, Result};
use crate::model::ParameterVector;

/// One client's channel: signal-to-noise ratio in dB (`None` means a clean
/// link) and uplink quantization depth (`None` disables quantization).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkSpec {
    pub snr_db: Option<f64>,
    pub quant_bits: Option<u32>,
}

/// Noise variances in effect for one communication round.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBudget {
    /// Variance of the aggregated uplink noise seen by the global model.
    pub sigma_tilde_sq: f64,
    /// Per-active-client downlink noise variance.
    pub sigma_k_sq: Vec<f64>,
}

/// How an SNR maps to a per-element noise variance.
///
/// `TotalNorm` applies `noise_variance_from_snr` directly, so each element
/// gets a variance derived from the full vector norm. `PerElement` divides
/// that by the vector length, keeping the per-element signal-to-noise ratio
/// at the configured value; training runs default to this mode because the
/// total-norm reading swamps every element once vectors grow long.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    TotalNorm,
    #[default]
    PerElement,
}

/// Noise variance implied by a parameter vector and an SNR in dB:
/// `|theta|^2 * 10^(-snr_db / 20)`, interpreted as per-element variance.
/// An infinite SNR yields zero; a zero-norm vector is degenerate.
pub fn noise_variance_from_snr(theta: &ParameterVector, snr_db: f64) -> Result<f64> {
    if snr_db.is_nan() {
        return config_err("snr_db must not be NaN");
    }
    let norm_sq = theta.norm_sq();
    if norm_sq == 0.0 {
        return numeric_err("degenerate model: zero-norm parameter vector has no defined SNR");
    }
    Ok(norm_sq * 10f64.powf(-snr_db / 20.0))
}

/// Per-element noise variance for a link, honoring the variance mode.
/// A `None` SNR means a clean link (zero variance).
pub fn link_noise_variance(theta: &ParameterVector, snr_db: Option<f64>, mode: VarianceMode) -> Result<f64> {
    match snr_db {
        None => Ok(0.0),
        Some(snr) => {
            let var = noise_variance_from_snr(theta, snr)?;
            Ok(match mode {
                VarianceMode::TotalNorm => var,
                VarianceMode::PerElement => var / theta.len() as f64,
            })
        }
    }
}

/// Adds i.i.d. zero-mean Gaussian noise of the given variance to every
/// element. Zero variance returns the input unchanged without consuming
/// randomness.
pub fn perturb(theta: &ParameterVector, variance: f64, rng: &mut impl rand::Rng) -> Result<ParameterVector> {
    if !variance.is_finite() || variance < 0.0 {
        return config_err(format!("noise variance must be finite and nonnegative, got {variance}"));
    }
    let mut out = theta.clone();
    if variance == 0.0 {
        return Ok(out);
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("validated std");
    for v in out.values_mut() {
        *v += normal.sample(rng);
    }
    Ok(out)
}

/// Uniform `bits`-bit quantization applied independently to each layer span:
/// `2^bits` levels spanning that layer's `[min, max]`, each value mapped to
/// the nearest level. A constant span is left untouched. Idempotent.
pub fn quantize(theta: &ParameterVector, bits: u32) -> Result<ParameterVector> {
    if bits == 0 {
        return config_err("quantization needs at least one bit");
    }
    if bits > 52 {
        return config_err("quantization beyond 52 bits exceeds f64 integer range");
    }
    let levels_minus_one = ((1u64 << bits) - 1) as f64;
    let mut out = theta.clone();
    for &(off, len) in theta.layer_spans() {
        let span = &mut out.values_mut()[off..off + len];
        let min = span.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = span.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == min {
            continue;
        }
        let step = (max - min) / levels_minus_one;
        for v in span.iter_mut() {
            let idx = ((*v - min) / step).round();
            // min + n*step can land an ulp past max; pin the top level.
            *v = if idx >= levels_minus_one { max } else { min + idx * step };
        }
    }
    Ok(out)
}

/// Dataset-size-weighted average: `(1/D) sum_k D_k theta_k`. Bit-identical
/// inputs are returned unchanged so noise-free degenerate runs stay exact.
pub fn aggregate(items: &[(u64, &ParameterVector)]) -> Result<ParameterVector> {
    let Some(((_, first), rest)) = items.split_first() else {
        return config_err("aggregation needs at least one model");
    };
    if items.iter().any(|&(d, _)| d == 0) {
        return config_err("aggregation weights must be positive sample counts");
    }
    if rest.iter().any(|(_, t)| t.len() != first.len()) {
        return config_err("aggregation requires same-length parameter vectors");
    }
    if rest.iter().all(|(_, t)| t.values() == first.values()) {
        return Ok((*first).clone());
    }
    let d_total: u64 = items.iter().map(|&(d, _)| d).sum();
    let mut sum = vec![0.0; first.len()];
    for &(d, theta) in items {
        let w = d as f64;
        for (s, &v) in sum.iter_mut().zip(theta.values()) {
            *s += w * v;
        }
    }
    let inv = 1.0 / d_total as f64;
    for s in &mut sum {
        *s *= inv;
    }
    ParameterVector::new(sum, first.layer_spans().to_vec())
}

/// Variance of the aggregated uplink noise, exact form:
/// `(1/D^2) sum_k D_k^2 sigma_k^2` over the active clients.
pub fn aggregated_uplink_variance(active: &[(u64, f64)], d_total: u64) -> Result<f64> {
    if d_total == 0 {
        return config_err("total dataset size must be positive");
    }
    let d = d_total as f64;
    Ok(active
        .iter()
        .map(|&(dk, var)| {
            let dk = dk as f64;
            dk * dk * var
        })
        .sum::<f64>()
        / (d * d))
}

/// The published closed form for the same quantity,
/// `(1/D) sum_k D_k sigma_k^2`, kept for comparison runs; it overweights
/// large clients relative to the exact expression.
pub fn paper_uplink_variance(active: &[(u64, f64)], d_total: u64) -> Result<f64> {
    if d_total == 0 {
        return config_err("total dataset size must be positive");
    }
    Ok(active
        .iter()
        .map(|&(dk, var)| dk as f64 * var)
        .sum::<f64>()
        / d_total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, ModelArch, OutputHead};
    use crate::rng::RngHub;

    fn pv(values: Vec<f64>) -> ParameterVector {
        let len = values.len();
        ParameterVector::new(values, vec![(0, len)]).unwrap()
    }

    #[test]
    fn snr_examples() {
        let unit = pv(vec![1.0]);
        assert!((noise_variance_from_snr(&unit, 20.0).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(noise_variance_from_snr(&unit, 0.0).unwrap(), 1.0);
        let four = pv(vec![2.0]);
        assert!((noise_variance_from_snr(&four, 20.0).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(noise_variance_from_snr(&unit, f64::INFINITY).unwrap(), 0.0);
        assert!(noise_variance_from_snr(&pv(vec![0.0]), 20.0).is_err());
    }

    #[test]
    fn per_element_mode_divides_by_length() {
        let theta = pv(vec![1.0, 1.0, 1.0, 1.0]);
        let total = link_noise_variance(&theta, Some(20.0), VarianceMode::TotalNorm).unwrap();
        let per = link_noise_variance(&theta, Some(20.0), VarianceMode::PerElement).unwrap();
        assert!((total - 0.4).abs() < 1e-15);
        assert!((per - 0.1).abs() < 1e-15);
        assert_eq!(link_noise_variance(&theta, None, VarianceMode::TotalNorm).unwrap(), 0.0);
    }

    #[test]
    fn perturb_zero_variance_is_identity() {
        let theta = pv(vec![0.25, -1.5, 3.0]);
        let mut rng = RngHub::new(1).stream("noise");
        let out = perturb(&theta, 0.0, &mut rng).unwrap();
        assert_eq!(out, theta);
    }

    #[test]
    fn perturb_matches_requested_variance() {
        let n = 20_000;
        let theta = pv(vec![0.0; n]);
        let mut rng = RngHub::new(2).stream("noise");
        let out = perturb(&theta, 0.25, &mut rng).unwrap();
        let mean: f64 = out.values().iter().sum::<f64>() / n as f64;
        let var: f64 = out.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 0.25).abs() / 0.25 < 0.05, "variance {var}");
    }

    #[test]
    fn perturb_rejects_bad_variance() {
        let theta = pv(vec![1.0]);
        let mut rng = RngHub::new(3).stream("noise");
        assert!(perturb(&theta, -0.1, &mut rng).is_err());
        assert!(perturb(&theta, f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn one_bit_quantization_snaps_to_span_ends() {
        let theta = pv(vec![-1.0, 0.2, 1.0]);
        let q = quantize(&theta, 1).unwrap();
        assert_eq!(q.values(), &[-1.0, 1.0, 1.0]);
    }

    #[test]
    fn quantization_is_idempotent_and_bounded() {
        let arch = ModelArch::new(vec![4, 3, 2], Activation::Relu, OutputHead::Softmax).unwrap();
        let mut rng = RngHub::new(4).stream("q");
        let theta = crate::model::init_glorot(&arch, &mut rng);
        for bits in [1, 2, 5, 8] {
            let q1 = quantize(&theta, bits).unwrap();
            let q2 = quantize(&q1, bits).unwrap();
            assert_eq!(q1, q2, "bits {bits}");
            let levels_minus_one = ((1u64 << bits) - 1) as f64;
            for &(off, len) in theta.layer_spans() {
                let span = &theta.values()[off..off + len];
                let min = span.iter().cloned().fold(f64::INFINITY, f64::min);
                let max = span.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let half_step = (max - min) / levels_minus_one / 2.0;
                for (q, v) in q1.values()[off..off + len].iter().zip(span) {
                    assert!((q - v).abs() <= half_step + 1e-12);
                }
            }
        }
    }

    #[test]
    fn constant_span_is_untouched() {
        let theta = pv(vec![0.7, 0.7, 0.7]);
        let q = quantize(&theta, 3).unwrap();
        assert_eq!(q, theta);
    }

    #[test]
    fn quantize_rejects_zero_bits() {
        assert!(quantize(&pv(vec![1.0]), 0).is_err());
    }

    #[test]
    fn aggregate_weighted_mean_matches_oracle() {
        let a = pv(vec![0.0, 2.0]);
        let b = pv(vec![4.0, -2.0]);
        let out = aggregate(&[(1, &a), (3, &b)]).unwrap();
        assert!((out.values()[0] - 3.0).abs() < 1e-12);
        assert!((out.values()[1] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn aggregate_identical_inputs_returns_them_exactly() {
        let a = pv(vec![0.1, 0.2, 0.3]);
        let out = aggregate(&[(3, &a), (5, &a), (9, &a)]).unwrap();
        assert_eq!(out, a);
        let single = aggregate(&[(7, &a)]).unwrap();
        assert_eq!(single, a);
    }

    #[test]
    fn aggregate_validates_inputs() {
        let a = pv(vec![1.0]);
        let b = pv(vec![1.0, 2.0]);
        assert!(aggregate(&[]).is_err());
        assert!(aggregate(&[(0, &a)]).is_err());
        assert!(aggregate(&[(1, &a), (1, &b)]).is_err());
    }

    #[test]
    fn aggregated_variance_formulas() {
        // Ten equal clients, all active, sigma^2 = 0.1 each.
        let active: Vec<(u64, f64)> = (0..10).map(|_| (500u64, 0.1)).collect();
        let exact = aggregated_uplink_variance(&active, 5000).unwrap();
        assert!((exact - 0.01).abs() < 1e-15);
        let paper = paper_uplink_variance(&active, 5000).unwrap();
        assert!((paper - 0.1).abs() < 1e-15);
        // Empty active set: nothing reaches the server over the air.
        assert_eq!(aggregated_uplink_variance(&[], 5000).unwrap(), 0.0);
    }
}
