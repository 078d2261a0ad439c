//! Python bindings for `strip_bbm_core`.
//!
//! The module exposes the model parameters, the survival profile solver,
//! the backbone rate tables, the branching simulator with its event log,
//! the martingale mean tests and the experiment runner. Library errors
//! surface as `ValueError` (bad input) or `RuntimeError` (numerical or
//! simulation failure).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use strip_bbm_core::backbone::{simulate_backbone, simulate_dressed, simulate_quasistationary, BackboneRates};
use strip_bbm_core::bvp::{solve_survival_profile, RatioConvention, SurvivalProfile};
use strip_bbm_core::cli::{run_experiment as core_run_experiment, Experiment};
use strip_bbm_core::martingales::{martingale_mean_test as core_martingale_mean_test, MartingaleKind, MartingaleSpec};
use strip_bbm_core::model::{map_csbp_mechanism as core_map_csbp, CsbpMechanism, ModelParams, OffspringLaw};
use strip_bbm_core::rng::{domain_tag, stream};
use strip_bbm_core::sim::{
    estimate_survival as core_estimate_survival, growth_rate_estimate as core_growth_rate, run_branching as core_run_branching,
    stopping_line_count as core_stopping_line_count, Dynamics, EventLog, RunOutput, SimConfig, Tag,
};

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn parse_convention(name: &str) -> PyResult<RatioConvention> {
    match name {
        "relative" => Ok(RatioConvention::Relative),
        "absolute" => Ok(RatioConvention::Absolute),
        other => Err(PyValueError::new_err(format!("unknown ratio convention {other:?}; use 'relative' or 'absolute'"))),
    }
}

fn parse_kind(name: &str) -> PyResult<MartingaleKind> {
    match name {
        "Upsilon" => Ok(MartingaleKind::Upsilon),
        "ZK" => Ok(MartingaleKind::ZK),
        "ProductExtinction" => Ok(MartingaleKind::ProductExtinction),
        "Mfstar" => Ok(MartingaleKind::Mfstar),
        "Mone" => Ok(MartingaleKind::Mone),
        other => Err(PyValueError::new_err(format!(
            "unknown martingale kind {other:?}; use Upsilon, ZK, ProductExtinction, Mfstar or Mone"
        ))),
    }
}

fn parse_tag(name: &str) -> PyResult<Tag> {
    match name {
        "plain" => Ok(Tag::Plain),
        "blue" => Ok(Tag::Blue),
        "red" => Ok(Tag::Red),
        "spine" => Ok(Tag::Spine),
        other => Err(PyValueError::new_err(format!("unknown particle colour {other:?}; use plain, blue, red or spine"))),
    }
}

/// Branching Brownian motion parameters: drift `-mu`, branching rate `beta`
/// and an offspring law given as `{count: probability}`.
#[pyclass(name = "ModelParams", module = "strip_bbm", frozen)]
pub struct PyModelParams {
    inner: ModelParams,
}

#[pymethods]
impl PyModelParams {
    #[new]
    #[pyo3(signature = (mu, beta = 1.0, offspring = None))]
    fn new(mu: f64, beta: f64, offspring: Option<BTreeMap<usize, f64>>) -> PyResult<Self> {
        let law = match offspring {
            Some(pairs) => OffspringLaw::new(pairs).map_err(value_err)?,
            None => OffspringLaw::dyadic(),
        };
        Ok(Self { inner: ModelParams::new(mu, beta, law).map_err(value_err)? })
    }

    /// Binary branching at rate `beta`.
    #[staticmethod]
    #[pyo3(signature = (mu, beta = 1.0))]
    fn dyadic(mu: f64, beta: f64) -> Self {
        Self { inner: ModelParams::dyadic(mu, beta) }
    }

    #[getter]
    fn mu(&self) -> f64 {
        self.inner.mu
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta
    }

    #[getter]
    fn offspring(&self) -> Vec<f64> {
        self.inner.offspring.probs().to_vec()
    }

    fn mean_offspring(&self) -> f64 {
        self.inner.mean_offspring()
    }

    /// `K0`, or `None` when every width is subcritical.
    fn critical_width(&self) -> Option<f64> {
        self.inner.critical_width()
    }

    fn lambda_rate(&self, k: f64) -> PyResult<f64> {
        self.inner.lambda_rate(k).map_err(value_err)
    }

    fn asymptotic_constant(&self, k: f64) -> PyResult<f64> {
        self.inner.asymptotic_constant(k).map_err(value_err)
    }

    fn branching_mechanism(&self, s: f64) -> PyResult<f64> {
        self.inner.branching_mechanism(s).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        format!("ModelParams(mu={}, beta={}, offspring={:?})", self.inner.mu, self.inner.beta, self.inner.offspring.probs())
    }
}

/// Survival probability `p_K` on a uniform grid over `[0, K]`.
#[pyclass(name = "SurvivalProfile", module = "strip_bbm", frozen)]
pub struct PySurvivalProfile {
    inner: Arc<SurvivalProfile>,
}

#[pymethods]
impl PySurvivalProfile {
    #[getter]
    fn width(&self) -> f64 {
        self.inner.width()
    }

    #[getter]
    fn nodes(&self) -> Vec<f64> {
        self.inner.nodes()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.p.clone()
    }

    fn is_trivial(&self) -> bool {
        self.inner.is_trivial()
    }

    fn max_p(&self) -> f64 {
        self.inner.max_p()
    }

    fn p_at(&self, x: f64) -> f64 {
        self.inner.p_at(x)
    }

    fn dp_at(&self, x: f64) -> f64 {
        self.inner.dp_at(x)
    }

    /// `(lower, upper)` bounds on `lambda(K)` from the invariant densities.
    fn lambda_bounds(&self) -> (f64, f64) {
        let b = self.inner.lambda_bounds();
        (b.lower, b.upper)
    }

    #[pyo3(signature = (convention = "relative"))]
    fn asymptotic_ratio_midpoint(&self, convention: &str) -> PyResult<f64> {
        self.inner.asymptotic_ratio_midpoint(parse_convention(convention)?).map_err(value_err)
    }

    /// `(x, values)` of the eigenfunction `f*`.
    fn eigenfunction_fstar(&self) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let f = self.inner.eigenfunction_fstar().map_err(value_err)?;
        Ok((f.x, f.values))
    }

    /// `(x, values)` of the blue invariant density.
    fn invariant_density_blue(&self) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let f = self.inner.invariant_density_blue().map_err(value_err)?;
        Ok((f.x, f.values))
    }

    fn integral_identity_residual(&self) -> f64 {
        self.inner.integral_identity_residual()
    }

    fn __repr__(&self) -> String {
        format!("SurvivalProfile(K={}, n={}, max_p={})", self.inner.width(), self.inner.p.len() - 2, self.inner.max_p())
    }
}

/// Solves the survival boundary value problem on `n` interior nodes.
#[pyfunction]
#[pyo3(signature = (params, k, n = 2000, tol = 1e-10))]
fn solve_profile(params: &PyModelParams, k: f64, n: usize, tol: f64) -> PyResult<PySurvivalProfile> {
    let profile = solve_survival_profile(&params.inner, k, n, tol).map_err(runtime_err)?;
    Ok(PySurvivalProfile { inner: Arc::new(profile) })
}

/// Rates of the backbone decomposition at a position `y`.
#[pyclass(name = "BackboneRates", module = "strip_bbm", frozen)]
pub struct PyBackboneRates {
    inner: BackboneRates,
}

#[pymethods]
impl PyBackboneRates {
    #[new]
    fn new(profile: &PySurvivalProfile) -> PyResult<Self> {
        Ok(Self { inner: BackboneRates::from_profile(profile.inner.clone()).map_err(value_err)? })
    }

    fn beta_b(&self, y: f64) -> f64 {
        self.inner.beta_b(y)
    }

    fn q_b(&self, y: f64) -> Vec<f64> {
        self.inner.q_b(y)
    }

    fn beta_r(&self, y: f64) -> f64 {
        self.inner.beta_r(y)
    }

    fn q_r(&self, y: f64) -> Vec<f64> {
        self.inner.q_r(y)
    }

    fn beta_i(&self, n: usize, y: f64) -> f64 {
        self.inner.beta_i(n, y)
    }

    fn q_i(&self, k: usize, y: f64) -> Vec<f64> {
        self.inner.q_i(k, y)
    }

    fn beta_d(&self, y: f64) -> f64 {
        self.inner.beta_d(y)
    }
}

/// Genealogical event log of one run.
#[pyclass(name = "EventLog", module = "strip_bbm", frozen)]
pub struct PyEventLog {
    inner: EventLog,
}

#[pymethods]
impl PyEventLog {
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self { inner: EventLog::from_bytes(data).map_err(value_err)? })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn population_at(&self, t: f64) -> usize {
        self.inner.population_at(t)
    }

    #[getter]
    fn truncated(&self) -> bool {
        self.inner.truncated
    }

    fn __len__(&self) -> usize {
        self.inner.events.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// Summary of one branching run.
#[pyclass(name = "RunResult", module = "strip_bbm", frozen, get_all)]
pub struct PyRunResult {
    /// Observation times.
    times: Vec<f64>,
    /// Population size at each observation time.
    counts: Vec<usize>,
    /// Particle positions at each observation time.
    positions: Vec<Vec<f64>>,
    alive: usize,
    truncated: bool,
    extinction_time: Option<f64>,
    created: u64,
    kills: (usize, usize),
    log: Py<PyEventLog>,
}

fn run_result(py: Python<'_>, out: RunOutput) -> PyResult<PyRunResult> {
    Ok(PyRunResult {
        times: out.snapshots.iter().map(|s| s.time).collect(),
        counts: out.snapshots.iter().map(|s| s.count()).collect(),
        positions: out.snapshots.iter().map(|s| s.positions()).collect(),
        alive: out.alive,
        truncated: out.truncated,
        extinction_time: out.extinction_time,
        created: out.created,
        kills: (out.kills[0], out.kills[1]),
        log: Py::new(py, PyEventLog { inner: out.log })?,
    })
}

#[allow(clippy::too_many_arguments)]
fn sim_config(x0: f64, tag: Tag, horizon: f64, dt: f64, seed: u64, times: &[f64], record: bool, cap: usize) -> SimConfig {
    let cfg = SimConfig::new(x0, tag, horizon, dt, seed).observing(times).capped(cap);
    if record {
        cfg.recording()
    } else {
        cfg
    }
}

/// One run of the plain process in the strip `(0, K)` from `x0`.
#[pyfunction]
#[pyo3(signature = (params, k, x0, horizon, dt = 0.01, seed = 0, index = 0, times = vec![], record = true, max_particles = 1_000_000))]
#[allow(clippy::too_many_arguments)]
fn run_branching(
    py: Python<'_>,
    params: &PyModelParams,
    k: f64,
    x0: f64,
    horizon: f64,
    dt: f64,
    seed: u64,
    index: u64,
    times: Vec<f64>,
    record: bool,
    max_particles: usize,
) -> PyResult<PyRunResult> {
    let cfg = sim_config(x0, Tag::Plain, horizon, dt, seed, &times, record, max_particles);
    let dynamics = Dynamics::plain(&params.inner, k).map_err(value_err)?;
    let out = py
        .detach(|| core_run_branching(&cfg, &dynamics, stream(seed, domain_tag("python-run"), index)))
        .map_err(runtime_err)?;
    run_result(py, out)
}

/// One run of the blue tree, the dressed tree (root colour `blue` or `red`)
/// or the quasi-stationary process (`kind` = `backbone`, `dressed` or
/// `quasistationary`).
#[pyfunction]
#[pyo3(signature = (kind, x0, horizon, profile = None, params = None, root = "blue", dt = 0.01, seed = 0, index = 0, times = vec![], record = true, max_particles = 1_000_000))]
#[allow(clippy::too_many_arguments)]
fn run_backbone(
    py: Python<'_>,
    kind: &str,
    x0: f64,
    horizon: f64,
    profile: Option<&PySurvivalProfile>,
    params: Option<&PyModelParams>,
    root: &str,
    dt: f64,
    seed: u64,
    index: u64,
    times: Vec<f64>,
    record: bool,
    max_particles: usize,
) -> PyResult<PyRunResult> {
    let rng = stream(seed, domain_tag(&format!("python-{kind}")), index);
    let rates = || -> PyResult<BackboneRates> {
        let p = profile.ok_or_else(|| PyValueError::new_err(format!("{kind} runs need a profile")))?;
        BackboneRates::from_profile(p.inner.clone()).map_err(value_err)
    };
    let out = match kind {
        "backbone" => {
            let rates = rates()?;
            let cfg = sim_config(x0, Tag::Blue, horizon, dt, seed, &times, record, max_particles);
            py.detach(|| simulate_backbone(&rates, x0, &cfg, rng))
        }
        "dressed" => {
            let rates = rates()?;
            let tag = parse_tag(root)?;
            let cfg = sim_config(x0, tag, horizon, dt, seed, &times, record, max_particles);
            py.detach(|| simulate_dressed(&rates, x0, tag, &cfg, rng))
        }
        "quasistationary" => {
            let p = params.ok_or_else(|| PyValueError::new_err("quasistationary runs need params"))?;
            let cfg = sim_config(x0, Tag::Spine, horizon, dt, seed, &times, record, max_particles);
            py.detach(|| simulate_quasistationary(&p.inner, x0, &cfg, rng))
        }
        other => return Err(PyValueError::new_err(format!("unknown run kind {other:?}"))),
    }
    .map_err(runtime_err)?;
    run_result(py, out)
}

/// Monte Carlo survival to `horizon` from `x0`; capped runs count as alive.
#[pyfunction]
#[pyo3(signature = (params, k, x0, horizon, replicates, dt = 0.01, seed = 0, max_particles = 1_000_000))]
#[allow(clippy::too_many_arguments)]
fn estimate_survival<'py>(
    py: Python<'py>,
    params: &PyModelParams,
    k: f64,
    x0: f64,
    horizon: f64,
    replicates: usize,
    dt: f64,
    seed: u64,
    max_particles: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = SimConfig::new(x0, Tag::Plain, horizon, dt, seed).capped(max_particles);
    let dynamics = Dynamics::plain(&params.inner, k).map_err(value_err)?;
    let est = py.detach(|| core_estimate_survival(&cfg, &dynamics, replicates)).map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("estimate", est.at_horizon.estimate)?;
    d.set_item("stderr", est.at_horizon.stderr)?;
    d.set_item("half_horizon_estimate", est.at_half_horizon.estimate)?;
    d.set_item("half_horizon_stderr", est.at_half_horizon.stderr)?;
    d.set_item("censored_fraction", est.censored_fraction)?;
    d.set_item("replicates", est.replicates)?;
    Ok(d)
}

/// Size of the stopping line at level `y` for a start at `x` in `(0, y)`.
#[pyfunction]
#[pyo3(signature = (params, y, x, dt = 0.005, seed = 0, index = 0))]
fn stopping_line_count(py: Python<'_>, params: &PyModelParams, y: f64, x: f64, dt: f64, seed: u64, index: u64) -> PyResult<usize> {
    py.detach(|| core_stopping_line_count(&params.inner, y, x, dt, stream(seed, domain_tag("python-stopping-line"), index)))
        .map_err(runtime_err)
}

/// Least-squares growth rate of `log |N_t|` over surviving backbone runs.
#[pyfunction]
#[pyo3(signature = (profile, x0, horizon, replicates, fit_points = 11, dt = 0.01, seed = 0, max_particles = 1_000_000))]
#[allow(clippy::too_many_arguments)]
fn backbone_growth_rate<'py>(
    py: Python<'py>,
    profile: &PySurvivalProfile,
    x0: f64,
    horizon: f64,
    replicates: usize,
    fit_points: usize,
    dt: f64,
    seed: u64,
    max_particles: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let rates = BackboneRates::from_profile(profile.inner.clone()).map_err(value_err)?;
    let dynamics = strip_bbm_core::backbone::backbone_dynamics(&rates).map_err(value_err)?;
    let cfg = SimConfig::new(x0, Tag::Blue, horizon, dt, seed).capped(max_particles);
    let est = py.detach(|| core_growth_rate(&cfg, &dynamics, replicates, fit_points)).map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("slope", est.slope)?;
    d.set_item("stderr", est.stderr)?;
    d.set_item("surviving", est.surviving)?;
    d.set_item("replicates", est.replicates)?;
    Ok(d)
}

/// Mean-constancy test of a martingale functional; returns the report as a
/// dict with a `verdict` of `Pass`, `Fail` or `Inconclusive`.
#[pyfunction]
#[pyo3(signature = (kind, params, k, x0, times, replicates, dt = 0.01, seed = 0, profile = None))]
#[allow(clippy::too_many_arguments)]
fn martingale_mean_test<'py>(
    py: Python<'py>,
    kind: &str,
    params: &PyModelParams,
    k: f64,
    x0: f64,
    times: Vec<f64>,
    replicates: usize,
    dt: f64,
    seed: u64,
    profile: Option<&PySurvivalProfile>,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = MartingaleSpec::new(parse_kind(kind)?, params.inner.clone(), k, profile.map(|p| p.inner.clone())).map_err(value_err)?;
    let r = py.detach(|| core_martingale_mean_test(&spec, x0, &times, replicates, dt, seed)).map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("kind", kind)?;
    d.set_item("target", r.target)?;
    d.set_item("times", r.times)?;
    d.set_item("means", r.means)?;
    d.set_item("stderrs", r.stderrs)?;
    d.set_item("z_scores", r.z_scores)?;
    d.set_item("medians", r.medians)?;
    d.set_item("threshold", r.threshold)?;
    d.set_item("replicates", r.replicates)?;
    d.set_item("censored_fraction", r.censored_fraction)?;
    d.set_item("verdict", format!("{:?}", r.verdict))?;
    Ok(d)
}

/// `(lambda_star, F values)` of the branching mechanism mapped from the
/// quadratic CSBP mechanism `psi(l) = -alpha l + b l²`, at the points `s`.
#[pyfunction]
fn map_csbp_mechanism(alpha: f64, b: f64, s: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
    let mapped = core_map_csbp(&CsbpMechanism::quadratic(alpha, b)).map_err(value_err)?;
    let values = s.iter().map(|&v| mapped.eval(v)).collect();
    Ok((mapped.lambda_star, values))
}

/// Runs a named experiment from a TOML config and writes its outputs.
/// Returns `(pass, {"csv": path, "json": path, "dat": path or None})`.
#[pyfunction]
#[pyo3(signature = (experiment, config, out = None))]
fn run_experiment<'py>(py: Python<'py>, experiment: &str, config: PathBuf, out: Option<PathBuf>) -> PyResult<(bool, Bound<'py, PyDict>)> {
    let exp = Experiment::ALL
        .into_iter()
        .find(|e| e.name() == experiment)
        .ok_or_else(|| PyValueError::new_err(format!("unknown experiment {experiment:?}")))?;
    let (outcome, files) = py.detach(|| core_run_experiment(exp, &config, out.as_deref())).map_err(runtime_err)?;
    let d = PyDict::new(py);
    d.set_item("csv", files.csv)?;
    d.set_item("json", files.json)?;
    d.set_item("dat", files.dat)?;
    Ok((outcome.pass, d))
}

#[pymodule]
fn strip_bbm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelParams>()?;
    m.add_class::<PySurvivalProfile>()?;
    m.add_class::<PyBackboneRates>()?;
    m.add_class::<PyEventLog>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(solve_profile, m)?)?;
    m.add_function(wrap_pyfunction!(run_branching, m)?)?;
    m.add_function(wrap_pyfunction!(run_backbone, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_survival, m)?)?;
    m.add_function(wrap_pyfunction!(stopping_line_count, m)?)?;
    m.add_function(wrap_pyfunction!(backbone_growth_rate, m)?)?;
    m.add_function(wrap_pyfunction!(martingale_mean_test, m)?)?;
    m.add_function(wrap_pyfunction!(map_csbp_mechanism, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
