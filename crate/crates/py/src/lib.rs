//! Python bindings: presets, training, dataset generation and the tabular
//! bound check. Validation errors raise `ValueError`, failed runs `RuntimeError`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use isep_core::config::{normalize_key, parse_key_values, PolicyKind, TrainConfig};
use isep_core::envs_data::{generate_dataset as gen, EnvId};
use isep_core::theory_checks::{expectile_bisect, theorem_sweep, TheoremSweepConfig};
use isep_core::trainer::{run_training, EvalSummary};
use isep_core::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn resolve(overrides: BTreeMap<String, String>) -> PyResult<TrainConfig> {
    let pairs: Vec<(String, String)> = overrides.into_iter().collect();
    TrainConfig::resolve(EnvId::DangerBandit, PolicyKind::Gaussian, &pairs).map_err(to_py)
}

fn summary(e: &EvalSummary) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("reward_mean", e.reward_mean),
        ("danger_rate", e.danger_rate),
        ("opt_island_rate", e.opt_island_rate),
        ("subopt_island_rate", e.subopt_island_rate),
        ("dist_to_opt", e.dist_to_opt),
    ])
}

/// Fully resolved config for the given overrides, as key -> value strings.
#[pyfunction]
#[pyo3(signature = (overrides = BTreeMap::new()))]
fn config(overrides: BTreeMap<String, String>) -> PyResult<BTreeMap<String, String>> {
    let cfg = resolve(overrides)?;
    let text = cfg.to_key_values();
    let pairs = parse_key_values(&text, &PathBuf::from("<config>")).map_err(to_py)?;
    Ok(pairs.into_iter().map(|(k, v)| (normalize_key(&k), v)).collect())
}

/// Train one agent; returns the final evaluation and the metrics CSV text.
#[pyfunction]
#[pyo3(signature = (overrides = BTreeMap::new(), out_dir = None))]
fn train(
    py: Python<'_>,
    overrides: BTreeMap<String, String>,
    out_dir: Option<PathBuf>,
) -> PyResult<(BTreeMap<&'static str, f64>, String)> {
    let cfg = resolve(overrides)?;
    let run = py
        .detach(|| run_training(&cfg, out_dir.as_deref()))
        .map_err(to_py)?;
    Ok((summary(&run.final_eval), run.metrics.to_csv()))
}

/// Write a generated dataset file and return its transition count.
#[pyfunction]
fn generate_dataset(env: &str, n: usize, seed: u64, path: PathBuf) -> PyResult<usize> {
    let env: EnvId = env.parse().map_err(PyValueError::new_err)?;
    let ds = gen(env, n, seed).map_err(to_py)?;
    ds.save(&path).map_err(to_py)?;
    Ok(ds.len())
}

/// Per-instance `(seed, p_bound_min, violations)` of the tabular bound check.
#[pyfunction]
#[pyo3(signature = (instances = 50, seed = 0))]
fn theory_check(instances: usize, seed: u64) -> PyResult<Vec<(u64, f64, usize)>> {
    let cfg = TheoremSweepConfig {
        instances,
        seed,
        ..TheoremSweepConfig::default()
    };
    let reports = theorem_sweep(&cfg).map_err(to_py)?;
    Ok(reports.iter().map(|r| (r.seed, r.p_bound_min, r.violations)).collect())
}

#[pyfunction]
fn expectile(samples: Vec<f64>, tau: f64) -> PyResult<f64> {
    if samples.is_empty() || !(tau > 0.0 && tau < 1.0) {
        return Err(PyValueError::new_err("need samples and tau in (0, 1)"));
    }
    Ok(expectile_bisect(&samples, tau))
}

#[pymodule]
fn isep(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(theory_check, m)?)?;
    m.add_function(wrap_pyfunction!(expectile, m)?)?;
    Ok(())
}
