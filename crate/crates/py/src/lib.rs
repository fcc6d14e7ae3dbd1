//! Python bindings for the simulator core: overhead formulas, the channel
//! primitives, deterministic named RNG streams, and an in-memory runner
//! that takes the same JSON configs as the CLI.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::Rng as _;

use hfcl_core::channel::{link_noise_variance, quantize as quantize_pv, VarianceMode};
use hfcl_core::cli::{parse_config_str, run_config_seed};
use hfcl_core::comms;
use hfcl_core::model::ParameterVector;
use hfcl_core::rng::RngHub;

fn err(e: hfcl_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Symbols a centralized run uploads before training.
#[pyfunction]
fn overhead_cl(dataset_symbols: u64) -> u64 {
    comms::overhead_cl(dataset_symbols)
}

/// Symbols a federated run exchanges over `rounds` rounds.
#[pyfunction]
fn overhead_fl(rounds: u64, params: u64, clients: u64) -> PyResult<u64> {
    comms::overhead_fl(rounds, params, clients).map_err(err)
}

/// Symbols a hybrid run exchanges: dataset uploads plus model traffic.
#[pyfunction]
fn overhead_hfcl(
    inactive: u64,
    inactive_dataset_symbols: u64,
    rounds: u64,
    params: u64,
    clients: u64,
) -> PyResult<u64> {
    comms::overhead_hfcl(inactive, inactive_dataset_symbols, rounds, params, clients).map_err(err)
}

/// Uniform `bits`-bit quantization of a flat parameter vector.
#[pyfunction]
fn quantize(values: Vec<f64>, bits: u32) -> PyResult<Vec<f64>> {
    let len = values.len();
    let pv = ParameterVector::new(values, vec![(0, len)]).map_err(err)?;
    let q = quantize_pv(&pv, bits).map_err(err)?;
    Ok(q.values().to_vec())
}

/// Noise variance implied by an SNR (dB) for the given parameter vector.
#[pyfunction]
#[pyo3(signature = (values, snr_db, per_element = true))]
fn noise_variance(values: Vec<f64>, snr_db: f64, per_element: bool) -> PyResult<f64> {
    let len = values.len();
    let pv = ParameterVector::new(values, vec![(0, len)]).map_err(err)?;
    let mode = if per_element { VarianceMode::PerElement } else { VarianceMode::TotalNorm };
    link_noise_variance(&pv, Some(snr_db), mode).map_err(err)
}

/// Draws from the named deterministic stream; pure in (seed, name).
#[pyfunction]
fn stream_u64(seed: u64, name: &str, count: usize) -> Vec<u64> {
    let mut rng = RngHub::new(seed).stream(name);
    (0..count).map(|_| rng.random()).collect()
}

/// Runs one seed of a JSON experiment config in memory and returns the
/// per-round rows as (t, accuracy_pct, train_loss, uplink, downlink).
#[pyfunction]
fn run_rounds(config_json: &str, seed: u64) -> PyResult<Vec<(usize, f64, f64, u64, u64)>> {
    let cfg = parse_config_str(config_json).map_err(err)?;
    let out = run_config_seed(&cfg, seed).map_err(err)?;
    Ok(out
        .records
        .iter()
        .map(|r| (r.t, r.accuracy_pct, r.train_loss, r.uplink_symbols, r.downlink_symbols))
        .collect())
}

#[pymodule]
fn hfcl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(overhead_cl, m)?)?;
    m.add_function(wrap_pyfunction!(overhead_fl, m)?)?;
    m.add_function(wrap_pyfunction!(overhead_hfcl, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(noise_variance, m)?)?;
    m.add_function(wrap_pyfunction!(stream_u64, m)?)?;
    m.add_function(wrap_pyfunction!(run_rounds, m)?)?;
    Ok(())
}
