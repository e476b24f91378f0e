//! Python module `framebudget_py`.

use framebudget::budget::{overhead_model, speedup_model, temporal_capacity, ComplexityConfig};
use framebudget::capo::{capo_advantages, correctness_from_reward, CapoConfig};
use framebudget::config::ExperimentConfig;
use framebudget::numerics::{beta_log_pdf, BetaParams};
use framebudget::rewards::{
    combined_scalar_reward, parse_option_letter, task_reward, Prediction, Segment, TaskKind,
    TaskSpec, DEFAULT_FORMAT_WEIGHT,
};
use framebudget::scenarios::{run_scenario, Scenario};
use framebudget::trainer::run_training;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

fn py_err(e: framebudget::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Validated experiment configuration.
#[pyclass(name = "Config", module = "framebudget_py")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = "", overrides = Vec::new()))]
    fn new(toml: &str, overrides: Vec<String>) -> PyResult<Self> {
        ExperimentConfig::from_toml_str(toml, &overrides)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    /// A copy with `key=value` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        let text = self.inner.to_toml().map_err(py_err)?;
        Self::new(&text, overrides)
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(py_err)
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let hash = self.inner.hash().unwrap_or_default();
        format!("Config(hash={})", &hash[..hash.len().min(12)])
    }
}

/// CAPO advantages for one prompt group with default constants, optionally
/// overridden by keyword (`gamma`, `lambda_capo`, ...).
#[pyfunction]
#[pyo3(signature = (rewards, correct, costs, **overrides))]
fn capo<'py>(
    py: Python<'py>,
    rewards: Vec<Vec<f64>>,
    correct: Vec<Vec<bool>>,
    costs: Vec<f64>,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut cfg = CapoConfig::default();
    if let Some(kw) = overrides {
        for (k, v) in kw.iter() {
            let key: String = k.extract()?;
            let val: f64 = v.extract()?;
            let slot = match key.as_str() {
                "kappa_mix" => &mut cfg.kappa_mix,
                "tau_fix" => &mut cfg.tau_fix,
                "tau_s" => &mut cfg.tau_s,
                "lambda_plus" => &mut cfg.lambda_plus,
                "lambda_minus" => &mut cfg.lambda_minus,
                "lambda_capo" => &mut cfg.lambda_capo,
                "gamma" => &mut cfg.gamma,
                "eps_plus" => &mut cfg.eps_plus,
                "group_norm_eps" => &mut cfg.group_norm_eps,
                other => return Err(PyValueError::new_err(format!("unknown CAPO constant `{other}`"))),
            };
            *slot = val;
        }
    }
    cfg.validate().map_err(py_err)?;
    let b = capo_advantages(&rewards, &correct, &costs, &cfg).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("base", b.base)?;
    d.set_item("shaping", b.shaping)?;
    d.set_item("pre_floor", b.pre_floor)?;
    d.set_item("final", b.final_adv)?;
    d.set_item("per_allocation", b.per_allocation)?;
    d.set_item("pivot", b.pivot)?;
    d.set_item("group_mean_cost", b.group_mean_cost)?;
    Ok(d)
}

#[pyfunction]
fn beta_logpdf(a: f64, alpha: f64, beta: f64) -> PyResult<f64> {
    beta_log_pdf(a, BetaParams::new(alpha, beta).map_err(py_err)?).map_err(py_err)
}

fn segments(pairs: Vec<(f64, f64)>) -> PyResult<Vec<Segment>> {
    pairs.into_iter().map(|(a, b)| Segment::new(a, b).map_err(py_err)).collect()
}

/// `(task_reward, correct, scalar_reward)` for one prediction.
#[pyfunction]
#[pyo3(signature = (kind, answer, gold, predicted_segments = Vec::new(), gold_segments = Vec::new(), format_ok = true))]
fn score(
    kind: &str,
    answer: &str,
    gold: &str,
    predicted_segments: Vec<(f64, f64)>,
    gold_segments: Vec<(f64, f64)>,
    format_ok: bool,
) -> PyResult<(f64, bool, f64)> {
    let kind: TaskKind = kind.parse().map_err(py_err)?;
    let spec = TaskSpec { kind, gold_answer: gold.to_string(), gold_segments: segments(gold_segments)? };
    let pred = Prediction {
        answer_text: answer.to_string(),
        predicted_segments: segments(predicted_segments)?,
        format_ok,
    };
    let r = task_reward(&pred, &spec).map_err(py_err)?;
    let u = correctness_from_reward(r, kind).map_err(py_err)?;
    Ok((r, u, combined_scalar_reward(r, format_ok, DEFAULT_FORMAT_WEIGHT)))
}

#[pyfunction]
fn option_letter(text: &str) -> Option<char> {
    parse_option_letter(text)
}

#[pyfunction]
fn speedup(retention: f64) -> PyResult<f64> {
    speedup_model(retention).map_err(py_err)
}

#[pyfunction]
fn allocator_overhead() -> PyResult<f64> {
    overhead_model(&ComplexityConfig::default()).map_err(py_err)
}

/// `(base_frames, adaptive_frames)` that fit in `token_budget`.
#[pyfunction]
#[pyo3(signature = (token_budget, retention, height = 448, width = 448))]
fn frame_capacity(token_budget: u64, retention: f64, height: u32, width: u32) -> PyResult<(u64, u64)> {
    let patch = ComplexityConfig::default().patch;
    let cap = temporal_capacity(token_budget, (height, width), patch, retention).map_err(py_err)?;
    Ok((cap.base_frames, cap.adaptive_frames))
}

/// Trains with `config.train` and returns the per-iteration metrics as dicts.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &PyConfig) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let cfg = config.inner.train.clone();
    let out = py.detach(|| run_training(&cfg)).map_err(py_err)?;
    out.history
        .iter()
        .map(|m| {
            let d = PyDict::new(py);
            d.set_item("iteration", m.iteration)?;
            d.set_item("mean_scale", m.mean_scale)?;
            d.set_item("proxy_cost", m.proxy_cost)?;
            d.set_item("accuracy", m.accuracy)?;
            d.set_item("loss_alloc", m.loss_alloc)?;
            d.set_item("decisive_scale", m.decisive_scale)?;
            d.set_item("other_scale", m.other_scale)?;
            Ok(d)
        })
        .collect()
}

/// Runs a named scenario and returns `{passed, checks, artifacts}`.
#[pyfunction]
#[pyo3(signature = (scenario, config, out_dir, seeds = vec![0]))]
fn run<'py>(
    py: Python<'py>,
    scenario: &str,
    config: &PyConfig,
    out_dir: PathBuf,
    seeds: Vec<u64>,
) -> PyResult<Bound<'py, PyDict>> {
    let scenario: Scenario = scenario.parse().map_err(py_err)?;
    let cfg = config.inner.clone();
    let outcome = py.detach(|| run_scenario(scenario, &cfg, &seeds, &out_dir)).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("passed", outcome.passed())?;
    let checks: Vec<(String, bool, String)> =
        outcome.checks.into_iter().map(|c| (c.name, c.passed, c.detail)).collect();
    d.set_item("checks", checks)?;
    d.set_item("artifacts", outcome.artifacts)?;
    Ok(d)
}

#[pymodule]
fn framebudget_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(capo, m)?)?;
    m.add_function(wrap_pyfunction!(beta_logpdf, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(option_letter, m)?)?;
    m.add_function(wrap_pyfunction!(speedup, m)?)?;
    m.add_function(wrap_pyfunction!(allocator_overhead, m)?)?;
    m.add_function(wrap_pyfunction!(frame_capacity, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
