//! Python bindings for the `cosched` simulator.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyList;

use cosched::baselines::PolicyKind;
use cosched::config::ExperimentConfig;
use cosched::engine::kv::KvPool as CoreKvPool;
use cosched::experiment::{run_dir, run_policy, RunResult as CoreRunResult, Workload as CoreWorkload};
use cosched::metrics::{compute_goodput, percentile as core_percentile, CompletionRecord, GoodputConfig};
use cosched::report::{compare, find_runs, read_summary, write_run};
use cosched::workload::{trace_hash, SessionTrace};

create_exception!(cosched_py, CoschedError, PyException);

fn err(e: cosched::Error) -> PyErr {
    CoschedError::new_err(e.to_string())
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| err(e.into()))
}

/// An experiment configuration loaded from TOML.
#[pyclass(module = "cosched_py", skip_from_py_object)]
#[derive(Clone)]
struct Config {
    inner: ExperimentConfig,
}

#[pymethods]
impl Config {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml_str(text).map(|inner| Self { inner }).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn policy(&self) -> String {
        self.inner.policy.name().to_string()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.run_seeds()
    }

    fn config_hash(&self) -> String {
        self.inner.config_hash()
    }

    /// A copy running `policy` with the given mechanisms disabled.
    #[pyo3(signature = (policy=None, ablate=Vec::new()))]
    fn with_policy(&self, policy: Option<&str>, ablate: Vec<String>) -> PyResult<Self> {
        let mut inner = self.inner.clone();
        inner.sweep = None;
        if let Some(p) = policy {
            inner.policy = PolicyKind::from_name(p).map_err(err)?;
        }
        for a in &ablate {
            inner.ablation.disable(a).map_err(err)?;
        }
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    /// One config per run of the configured sweep.
    fn expand(&self) -> PyResult<Vec<Config>> {
        Ok(self.inner.expand().map_err(err)?.into_iter().map(|inner| Config { inner }).collect())
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Config(name={:?}, policy={:?})", self.inner.name, self.inner.policy.name())
    }
}

/// A validated session trace with its resolved KV pool size.
#[pyclass(module = "cosched_py")]
struct Workload {
    inner: CoreWorkload,
}

#[pymethods]
impl Workload {
    #[new]
    #[pyo3(signature = (config, seed=None))]
    fn new(config: &Config, seed: Option<u64>) -> PyResult<Self> {
        let seed = seed.unwrap_or_else(|| config.inner.run_seeds()[0]);
        CoreWorkload::prepare(&config.inner, seed).map(|inner| Self { inner }).map_err(err)
    }

    /// Build from a list of session dicts, as produced by `sessions()`.
    #[staticmethod]
    #[pyo3(signature = (config, sessions, seed=0))]
    fn from_sessions(py: Python<'_>, config: &Config, sessions: &Bound<'_, PyList>, seed: u64) -> PyResult<Self> {
        let traces: Vec<SessionTrace> = from_py(py, sessions.as_any())?;
        CoreWorkload::from_traces(&config.inner, seed, traces).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn trace_hash(&self) -> String {
        self.inner.trace_hash.clone()
    }

    #[getter]
    fn substrate_hash(&self) -> String {
        self.inner.substrate_hash.clone()
    }

    #[getter]
    fn total_blocks(&self) -> u64 {
        self.inner.total_blocks
    }

    fn sessions(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.traces)
    }

    fn ideal_times(&self) -> Vec<(u64, f64)> {
        self.inner.ideals.iter().map(|(k, v)| (*k, *v)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.traces.len()
    }
}

/// Outcome of one simulated run.
#[pyclass(module = "cosched_py")]
struct RunResult {
    inner: CoreRunResult,
}

#[pymethods]
impl RunResult {
    #[getter]
    fn label(&self) -> String {
        self.inner.summary.label.clone()
    }

    #[getter]
    fn audits_passed(&self) -> bool {
        self.inner.audits_passed()
    }

    fn summary(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.summary)
    }

    fn audits(&self) -> Vec<(String, bool, String)> {
        self.inner.audits.iter().map(|a| (a.name.to_string(), a.passed, a.detail.clone())).collect()
    }

    fn completions(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.records)
    }

    fn latencies(&self) -> Vec<f64> {
        self.inner.records.iter().map(|r| r.latency).collect()
    }

    fn eviction_series(&self) -> Vec<u64> {
        self.inner.eviction.clone()
    }

    fn events_jsonl(&self) -> PyResult<String> {
        cosched::log::to_jsonl(&self.inner.output.log).map_err(err)
    }

    /// Write all artifacts under `root` and return the run directory.
    fn write(&self, root: PathBuf) -> PyResult<PathBuf> {
        let dir = run_dir(&root, &self.inner.summary);
        write_run(&dir, &self.inner).map_err(err)?;
        Ok(dir)
    }
}

/// Simulate `config` on `workload` (generated from the config when omitted).
#[pyfunction]
#[pyo3(signature = (config, workload=None))]
fn run(py: Python<'_>, config: &Config, workload: Option<&Workload>) -> PyResult<RunResult> {
    let owned;
    let w = match workload {
        Some(w) => &w.inner,
        None => {
            owned = CoreWorkload::prepare(&config.inner, config.inner.run_seeds()[0]).map_err(err)?;
            &owned
        }
    };
    let cfg = config.inner.clone();
    let result = py.detach(|| run_policy(&cfg, w)).map_err(err)?;
    Ok(RunResult { inner: result })
}

/// Comparison rows over every run directory found below `roots`.
#[pyfunction]
fn compare_runs(py: Python<'_>, roots: Vec<PathBuf>) -> PyResult<Py<PyAny>> {
    let mut summaries = Vec::new();
    for root in &roots {
        for dir in find_runs(root).map_err(err)? {
            summaries.push(read_summary(&dir).map_err(err)?);
        }
    }
    let rows = compare(&summaries).map_err(err)?;
    to_py(py, &rows)
}

#[pyfunction]
fn session_trace_hash(py: Python<'_>, sessions: &Bound<'_, PyList>) -> PyResult<String> {
    let traces: Vec<SessionTrace> = from_py(py, sessions.as_any())?;
    Ok(trace_hash(&traces))
}

/// Windowed goodput over `(arrival, completion, ideal)` triples.
#[pyfunction]
#[pyo3(signature = (completions, horizon_s, alpha=3.0, window_s=60.0))]
fn goodput(py: Python<'_>, completions: Vec<(f64, f64, f64)>, horizon_s: f64, alpha: f64, window_s: f64) -> PyResult<Py<PyAny>> {
    let records: Vec<CompletionRecord> = completions
        .iter()
        .enumerate()
        .map(|(i, &(a, c, ideal))| CompletionRecord {
            session_id: i as u64,
            arrival_time: a,
            completion_time: c,
            latency: c - a,
            ttft: Vec::new(),
            ideal_time: Some(ideal),
            tau: Some(alpha * ideal),
        })
        .collect();
    let config = GoodputConfig { slo_slack_alpha: alpha, window_s };
    config.validate().map_err(err)?;
    let series = compute_goodput(&records, &config, horizon_s).map_err(err)?;
    to_py(py, &series)
}

#[pyfunction]
fn percentile(values: Vec<f64>, p: f64) -> PyResult<f64> {
    core_percentile(&values, p).map_err(err)
}

/// Block-granular KV pool.
#[pyclass(module = "cosched_py")]
struct KvPool {
    inner: CoreKvPool,
}

#[pymethods]
impl KvPool {
    #[new]
    #[pyo3(signature = (total_blocks, block_size=16))]
    fn new(total_blocks: u64, block_size: u64) -> PyResult<Self> {
        CoreKvPool::new(total_blocks, block_size).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn total_blocks(&self) -> u64 {
        self.inner.total_blocks()
    }

    #[getter]
    fn free_blocks(&self) -> u64 {
        self.inner.free_blocks()
    }

    fn blocks_for(&self, tokens: u64) -> u64 {
        self.inner.blocks_for(tokens)
    }

    fn allocate(&mut self, session: u64, blocks: u64) -> PyResult<bool> {
        self.inner.allocate(session, blocks).map_err(err)
    }

    fn free(&mut self, session: u64) -> u64 {
        self.inner.free(session)
    }

    fn pin(&mut self, session: u64) -> PyResult<u64> {
        self.inner.pin(session).map_err(err)
    }

    fn unpin(&mut self, session: u64) -> PyResult<u64> {
        self.inner.unpin(session).map_err(err)
    }

    fn held_by(&self, session: u64) -> u64 {
        self.inner.held_by(session)
    }

    fn check_conservation(&self) -> bool {
        self.inner.check_conservation()
    }
}

#[pymodule]
fn cosched_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CoschedError", m.py().get_type::<CoschedError>())?;
    m.add_class::<Config>()?;
    m.add_class::<Workload>()?;
    m.add_class::<RunResult>()?;
    m.add_class::<KvPool>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(compare_runs, m)?)?;
    m.add_function(wrap_pyfunction!(session_trace_hash, m)?)?;
    m.add_function(wrap_pyfunction!(goodput, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    Ok(())
}
