//! Config-driven experiment runner behind the `strip-bbm` binary.
//!
//! Each experiment reads one TOML file. Only `seed` and `[model]` are
//! required; every experiment table has defaults matching the acceptance
//! configurations.
//!
//! ```text
//! seed = 42                      # mandatory, no wall-clock seeding
//! experiment = "survival-curve"  # optional, must match the subcommand
//!
//! [model]
//! mu = 0.0
//! beta = 1.0
//! offspring = { "2" = 1.0 }      # P(k children), keys are integers
//!
//! [solver]        n, tol
//! [simulation]    dt, max-particles
//! [output]        dir, dat
//! [survival-curve] / [asymptotic-constant] / ...   per-experiment settings
//! ```
//!
//! Outputs land in `<dir>/<experiment>-<hash>.{csv,json[,dat]}` where
//! `<hash>` is a prefix of the SHA-256 of the config after defaults. The
//! JSON carries the verdicts, the config echo, the full hash and the git
//! revision. Nothing time- or thread-dependent is written, so reruns are
//! byte-identical.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{
    backbone_dynamics, simulate_dressed, simulate_quasistationary, thin_population, BackboneError, BackboneRates,
};
use crate::bvp::{solve_survival_profile, BvpError, RatioConvention, SurvivalProfile};
use crate::diffusion::{sample_positions, DiffusionError, MotionSpec};
use crate::martingales::{martingale_mean_test, MartingaleError, MartingaleKind, MartingaleSpec, Verdict};
use crate::model::{ModelError, ModelParams, OffspringLaw};
use crate::rng::{domain_tag, stream, uniform};
use crate::sim::{
    estimate_survival, growth_rate_estimate, run_replicates, stopping_line_count, Dynamics, SimConfig, SimError, Tag,
};
use crate::stats::{
    bonferroni_z, chi_square_distance, chi_square_gof, chi_square_two_sample, mean_stderr, tabulate, THREE_SIGMA_ALPHA,
};

/// Environment variable holding the default worker thread count.
pub const THREADS_ENV: &str = "STRIP_BBM_THREADS";
const HASH_PREFIX_LEN: usize = 12;
const GIT_HASH: &str = match option_env!("STRIP_BBM_GIT_HASH") {
    Some(h) => h,
    None => "unknown",
};

pub mod exit_code {
    pub const PASS: u8 = 0;
    pub const ASSERTION_FAILED: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const MISSING_PROFILE: u8 = 3;
    pub const CENSORING: u8 = 4;
    pub const IO: u8 = 5;
    pub const NUMERICAL: u8 = 6;
}

const EXIT_CODES_HELP: &str = "\
Exit codes:
  0  all in-config assertions passed
  1  at least one assertion failed
  2  config schema or validation error (missing seed, unknown key, bad value)
  3  missing profile dependency (the experiment needs K > K0)
  4  censoring overrun (too many runs hit the particle cap)
  5  I/O error reading the config or writing outputs
  6  numerical failure (solver non-convergence, simulation error)";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing profile dependency: {0}")]
    MissingProfile(String),
    #[error("censoring overrun: {0}")]
    Censoring(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => exit_code::CONFIG,
            Self::MissingProfile(_) => exit_code::MISSING_PROFILE,
            Self::Censoring(_) => exit_code::CENSORING,
            Self::Io(_) => exit_code::IO,
            Self::Numerical(_) => exit_code::NUMERICAL,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        Self::Io(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<DiffusionError> for CliError {
    fn from(e: DiffusionError) -> Self {
        match e {
            DiffusionError::Model(m) => m.into(),
            DiffusionError::MissingProfile(_) => Self::MissingProfile(e.to_string()),
            other => Self::Numerical(other.to_string()),
        }
    }
}

impl From<BvpError> for CliError {
    fn from(e: BvpError) -> Self {
        match e {
            BvpError::Model(m) => m.into(),
            BvpError::TrivialProfile => Self::MissingProfile(e.to_string()),
            BvpError::GridTooSmall { .. } | BvpError::InvalidTolerance(_) => Self::Config(e.to_string()),
            BvpError::Io(_) | BvpError::Csv(_) | BvpError::Json(_) => Self::Io(e.to_string()),
            other => Self::Numerical(other.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Diffusion(d) => d.into(),
            SimError::InvalidConfig(_) => Self::Config(e.to_string()),
            SimError::Io(_) => Self::Io(e.to_string()),
            other => Self::Numerical(other.to_string()),
        }
    }
}

impl From<BackboneError> for CliError {
    fn from(e: BackboneError) -> Self {
        match e {
            BackboneError::Model(m) => m.into(),
            BackboneError::Diffusion(d) => d.into(),
            BackboneError::Sim(s) => s.into(),
            BackboneError::TrivialProfile => Self::MissingProfile(e.to_string()),
            BackboneError::NoCriticalWidth => Self::Config(e.to_string()),
            other => Self::Numerical(other.to_string()),
        }
    }
}

impl From<MartingaleError> for CliError {
    fn from(e: MartingaleError) -> Self {
        match e {
            MartingaleError::Bvp(b) => b.into(),
            MartingaleError::Sim(s) => s.into(),
            MartingaleError::Backbone(b) => b.into(),
            MartingaleError::MissingProfile(_) | MartingaleError::TrivialProfile(_) => Self::MissingProfile(e.to_string()),
            MartingaleError::TooFewReplicates { .. } | MartingaleError::InvalidTimes => Self::Config(e.to_string()),
            other => Self::Numerical(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SurvivalCurve,
    AsymptoticConstant,
    LambdaBounds,
    MartingaleSuite,
    ThinningTest,
    OccupationTest,
    StoppingLine,
    QuasistationaryCompare,
    GrowthRate,
}

impl Experiment {
    pub const ALL: [Experiment; 9] = [
        Self::SurvivalCurve,
        Self::AsymptoticConstant,
        Self::LambdaBounds,
        Self::MartingaleSuite,
        Self::ThinningTest,
        Self::OccupationTest,
        Self::StoppingLine,
        Self::QuasistationaryCompare,
        Self::GrowthRate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::SurvivalCurve => "survival-curve",
            Self::AsymptoticConstant => "asymptotic-constant",
            Self::LambdaBounds => "lambda-bounds",
            Self::MartingaleSuite => "martingale-suite",
            Self::ThinningTest => "thinning-test",
            Self::OccupationTest => "occupation-test",
            Self::StoppingLine => "stopping-line",
            Self::QuasistationaryCompare => "quasistationary-compare",
            Self::GrowthRate => "growth-rate",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Experiment config file (TOML)
    #[arg(long)]
    pub config: PathBuf,
    /// Worker threads; results do not depend on this
    #[arg(long, env = THREADS_ENV)]
    pub threads: Option<usize>,
    /// Output directory, overriding `[output] dir`
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Parser)]
#[command(name = "strip-bbm", version, about = "Branching Brownian motion in a killing strip", after_help = EXIT_CODES_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo survival against the BVP profile over a sweep of widths
    #[command(after_help = EXIT_CODES_HELP)]
    SurvivalCurve(RunArgs),
    /// Near-critical ratio p_K / (eps sin e^{mu x}) over a sweep of eps
    #[command(after_help = EXIT_CODES_HELP)]
    AsymptoticConstant(RunArgs),
    /// Invariant-density bounds on the growth rate lambda(K)
    #[command(after_help = EXIT_CODES_HELP)]
    LambdaBounds(RunArgs),
    /// Mean-constancy tests for the martingale functionals
    #[command(after_help = EXIT_CODES_HELP)]
    MartingaleSuite(RunArgs),
    /// Thinned plain population against the dressed backbone blue count
    #[command(after_help = EXIT_CODES_HELP)]
    ThinningTest(RunArgs),
    /// Occupation law of the conditioned motion against (2/K) sin²(pi x/K)
    #[command(after_help = EXIT_CODES_HELP)]
    OccupationTest(RunArgs),
    /// Mean stopping-line size against its harmonic-function value
    #[command(after_help = EXIT_CODES_HELP)]
    StoppingLine(RunArgs),
    /// Dressed backbone conditioned on survival against the quasi-stationary process
    #[command(after_help = EXIT_CODES_HELP)]
    QuasistationaryCompare(RunArgs),
    /// Backbone growth rate against lambda(K)
    #[command(after_help = EXIT_CODES_HELP)]
    GrowthRate(RunArgs),
}

impl Command {
    pub fn split(&self) -> (Experiment, &RunArgs) {
        match self {
            Self::SurvivalCurve(a) => (Experiment::SurvivalCurve, a),
            Self::AsymptoticConstant(a) => (Experiment::AsymptoticConstant, a),
            Self::LambdaBounds(a) => (Experiment::LambdaBounds, a),
            Self::MartingaleSuite(a) => (Experiment::MartingaleSuite, a),
            Self::ThinningTest(a) => (Experiment::ThinningTest, a),
            Self::OccupationTest(a) => (Experiment::OccupationTest, a),
            Self::StoppingLine(a) => (Experiment::StoppingLine, a),
            Self::QuasistationaryCompare(a) => (Experiment::QuasistationaryCompare, a),
            Self::GrowthRate(a) => (Experiment::GrowthRate, a),
        }
    }
}

// ---------------------------------------------------------------------------
// Config schema

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment: Option<String>,
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub survival_curve: SurvivalCurveConfig,
    #[serde(default)]
    pub asymptotic_constant: AsymptoticConstantConfig,
    #[serde(default)]
    pub lambda_bounds: LambdaBoundsConfig,
    #[serde(default)]
    pub martingale_suite: MartingaleSuiteConfig,
    #[serde(default)]
    pub thinning_test: ThinningTestConfig,
    #[serde(default)]
    pub occupation_test: OccupationTestConfig,
    #[serde(default)]
    pub stopping_line: StoppingLineConfig,
    #[serde(default)]
    pub quasistationary_compare: QuasistationaryCompareConfig,
    #[serde(default)]
    pub growth_rate: GrowthRateConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct ModelConfig {
    pub mu: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default = "dyadic_table")]
    pub offspring: BTreeMap<String, f64>,
}

fn one() -> f64 {
    1.0
}

fn dyadic_table() -> BTreeMap<String, f64> {
    BTreeMap::from([("2".to_string(), 1.0)])
}

impl ModelConfig {
    pub fn params(&self) -> Result<ModelParams, CliError> {
        let mut pairs = Vec::with_capacity(self.offspring.len());
        for (key, &p) in &self.offspring {
            let k: usize = key
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("offspring key {key:?} is not a non-negative integer")))?;
            pairs.push((k, p));
        }
        let law = OffspringLaw::new(pairs)?;
        let params = ModelParams::new(self.mu, self.beta, law)?;
        params.require_supercritical()?;
        Ok(params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct SolverConfig {
    pub n: usize,
    pub tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { n: 2000, tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct SimulationConfig {
    pub dt: f64,
    pub max_particles: usize,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self { dt: 0.01, max_particles: crate::sim::DEFAULT_MAX_PARTICLES }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write a whitespace-separated `.dat` table for gnuplot.
    pub dat: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), dat: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct SurvivalCurveConfig {
    /// Widths as multiples of K0.
    pub k_factors: Vec<f64>,
    /// Start position as a fraction of K.
    pub x_fraction: f64,
    pub horizon: f64,
    pub replicates: usize,
    /// Alive-particle cap; capped runs count as surviving.
    pub max_particles: usize,
    /// MC estimate bound used where the profile is trivial.
    pub trivial_threshold: f64,
}

impl Default for SurvivalCurveConfig {
    fn default() -> Self {
        Self {
            k_factors: vec![0.9, 1.05, 1.1, 1.2, 1.3, 1.4, 1.5],
            x_fraction: 0.5,
            horizon: 30.0,
            replicates: 2000,
            max_particles: 200,
            trivial_threshold: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct AsymptoticConstantConfig {
    /// Each `eps` sets `K = K0 / (1 - eps)`.
    pub epsilons: Vec<f64>,
    pub n: usize,
    pub convention: RatioConvention,
    /// Interior sample points per profile in the CSV table.
    pub points: usize,
    /// Bracket for the midpoint ratio at the smallest eps.
    pub bracket: [f64; 2],
}

impl Default for AsymptoticConstantConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.1, 0.05, 0.02],
            n: 16000,
            convention: RatioConvention::Relative,
            points: 39,
            bracket: [0.7, 1.3],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct LambdaBoundsConfig {
    pub k_factors: Vec<f64>,
    /// Allowed violation of each inequality.
    pub slack: f64,
}

impl Default for LambdaBoundsConfig {
    fn default() -> Self {
        Self { k_factors: vec![1.05, 1.2, 1.5], slack: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct MartingaleSuiteConfig {
    pub k_factor: f64,
    pub x_fraction: f64,
    pub times: Vec<f64>,
    pub replicates: usize,
    /// Functionals of the plain process (ZK, Upsilon, ProductExtinction).
    pub kinds: Vec<MartingaleKind>,
    /// Backbone width `K0 / (1 - eps)` for Mfstar and Mone.
    pub backbone_epsilon: f64,
    pub backbone_times: Vec<f64>,
    pub backbone_kinds: Vec<MartingaleKind>,
    /// Width factor below K0 for the median-collapse check; 0 disables it.
    pub subcritical_factor: f64,
    pub subcritical_time: f64,
    /// Median of ZK(t) must fall below this fraction of ZK(0).
    pub median_fraction: f64,
}

impl Default for MartingaleSuiteConfig {
    fn default() -> Self {
        Self {
            k_factor: 1.2,
            x_fraction: 0.5,
            times: vec![0.5, 1.0, 2.0],
            replicates: 10_000,
            kinds: vec![MartingaleKind::ZK, MartingaleKind::Upsilon, MartingaleKind::ProductExtinction],
            backbone_epsilon: 0.2,
            backbone_times: vec![0.5, 1.0],
            backbone_kinds: vec![MartingaleKind::Mfstar, MartingaleKind::Mone],
            subcritical_factor: 0.95,
            subcritical_time: 20.0,
            median_fraction: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct ThinningTestConfig {
    pub k_factor: f64,
    pub x_fraction: f64,
    pub times: Vec<f64>,
    pub replicates: usize,
    pub alpha: f64,
}

impl Default for ThinningTestConfig {
    fn default() -> Self {
        Self { k_factor: 1.3, x_fraction: 0.5, times: vec![1.0, 2.0], replicates: 10_000, alpha: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct OccupationTestConfig {
    /// Drift values; each replaces `model.mu` in turn.
    pub mus: Vec<f64>,
    pub k_factor: f64,
    pub trajectories: usize,
    pub horizon: f64,
    /// Samples taken before this time are discarded.
    pub burn_in: f64,
    pub interval: f64,
    pub bins: usize,
    pub dt: f64,
    pub alpha: f64,
}

impl Default for OccupationTestConfig {
    fn default() -> Self {
        Self {
            mus: vec![0.0, 1.0],
            k_factor: 1.3,
            trajectories: 200,
            horizon: 52.0,
            burn_in: 2.0,
            interval: 1.0,
            bins: 20,
            dt: 0.001,
            alpha: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct StoppingLineConfig {
    /// `(x, y)` pairs as fractions of K0.
    pub pairs: Vec<[f64; 2]>,
    pub replicates: usize,
    pub dt: f64,
}

impl Default for StoppingLineConfig {
    fn default() -> Self {
        Self { pairs: vec![[0.4, 0.8], [0.3, 0.6]], replicates: 10_000, dt: 0.005 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct QuasistationaryCompareConfig {
    pub epsilons: Vec<f64>,
    /// Start position as a fraction of K0.
    pub x_fraction: f64,
    pub time: f64,
    pub replicates: usize,
}

impl Default for QuasistationaryCompareConfig {
    fn default() -> Self {
        Self { epsilons: vec![0.2, 0.1, 0.05], x_fraction: 0.5, time: 2.0, replicates: 40_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", default)]
pub struct GrowthRateConfig {
    pub k_factor: f64,
    pub x_fraction: f64,
    pub horizon: f64,
    pub replicates: usize,
    pub fit_points: usize,
    pub relative_tolerance: f64,
}

impl Default for GrowthRateConfig {
    fn default() -> Self {
        Self { k_factor: 1.5, x_fraction: 0.5, horizon: 10.0, replicates: 300, fit_points: 11, relative_tolerance: 0.15 }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.params()?;
        if self.model.params()?.critical_width().is_none() {
            return Err(CliError::Config("model has no critical width; every width is subcritical".into()));
        }
        if !(self.simulation.dt > 0.0) || self.simulation.max_particles == 0 {
            return Err(CliError::Config("simulation dt and max-particles must be positive".into()));
        }
        let bad_factor = |f: &f64| !(*f > 0.0 && f.is_finite());
        let bad_eps = |e: &f64| !(*e > 0.0 && *e < 1.0);
        let sc = &self.survival_curve;
        let ac = &self.asymptotic_constant;
        let mg = &self.martingale_suite;
        let qs = &self.quasistationary_compare;
        let checks: [(bool, &str); 12] = [
            (sc.k_factors.iter().any(bad_factor) || sc.k_factors.is_empty(), "survival-curve k-factors"),
            (!(sc.x_fraction > 0.0 && sc.x_fraction < 1.0), "survival-curve x-fraction"),
            (ac.epsilons.iter().any(bad_eps) || ac.epsilons.is_empty(), "asymptotic-constant epsilons"),
            (ac.bracket[0] >= ac.bracket[1], "asymptotic-constant bracket"),
            (self.lambda_bounds.k_factors.iter().any(|f| !(*f > 1.0)), "lambda-bounds k-factors must exceed 1"),
            (bad_eps(&mg.backbone_epsilon) || !(mg.x_fraction > 0.0 && mg.x_fraction < 1.0), "martingale-suite widths"),
            (self.thinning_test.k_factor <= 1.0 || self.thinning_test.times.is_empty(), "thinning-test"),
            (self.occupation_test.bins < 2 || !(self.occupation_test.interval > 0.0), "occupation-test"),
            (
                self.stopping_line.pairs.iter().any(|[x, y]| !(*x > 0.0 && x < y && *y <= 1.0)),
                "stopping-line pairs need 0 < x < y <= 1",
            ),
            (qs.epsilons.iter().any(bad_eps) || !(qs.x_fraction > 0.0 && qs.x_fraction < 1.0), "quasistationary-compare"),
            (self.growth_rate.k_factor <= 1.0 || self.growth_rate.fit_points < 2, "growth-rate"),
            (self.solver.n < crate::bvp::MIN_GRID_POINTS || !(self.solver.tol > 0.0), "solver"),
        ];
        match checks.iter().find(|(bad, _)| *bad) {
            Some((_, what)) => Err(CliError::Config(format!("invalid setting: {what}"))),
            None => Ok(()),
        }
    }

    /// Hex SHA-256 of the config after defaults are filled in.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

// ---------------------------------------------------------------------------
// Results

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(headers: &[&str]) -> Self {
        Self { headers: headers.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    fn push<I: IntoIterator<Item = String>>(&mut self, row: I) {
        self.rows.push(row.into_iter().collect());
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.headers)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        w.into_inner().map_err(|e| CliError::Io(e.to_string()))
    }

    pub fn to_dat(&self) -> String {
        let mut out = format!("# {}\n", self.headers.join(" "));
        for row in &self.rows {
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assertion {
    pub name: String,
    pub pass: bool,
    pub detail: Value,
}

impl Assertion {
    fn new(name: impl Into<String>, pass: bool, detail: Value) -> Self {
        Self { name: name.into(), pass, detail }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub experiment: String,
    pub pass: bool,
    pub assertions: Vec<Assertion>,
    pub table: Table,
    pub details: Value,
}

impl ExperimentOutcome {
    fn new(experiment: Experiment, assertions: Vec<Assertion>, table: Table, details: Value) -> Self {
        let pass = assertions.iter().all(|a| a.pass);
        Self { experiment: experiment.name().to_string(), pass, assertions, table, details }
    }
}

/// Paths written by one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFiles {
    pub csv: PathBuf,
    pub json: PathBuf,
    pub dat: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Experiments

fn format_f(x: f64) -> String {
    format!("{x}")
}

fn solve(params: &ModelParams, k: f64, n: usize, tol: f64) -> Result<Arc<SurvivalProfile>, CliError> {
    Ok(Arc::new(solve_survival_profile(params, k, n, tol)?))
}

fn nontrivial(params: &ModelParams, k: f64, n: usize, tol: f64) -> Result<Arc<SurvivalProfile>, CliError> {
    let profile = solve(params, k, n, tol)?;
    if profile.is_trivial() {
        let k0 = params.critical_width().unwrap_or(f64::NAN);
        return Err(CliError::MissingProfile(format!("profile at K={k} is trivial (K0={k0})")));
    }
    Ok(profile)
}

fn k0_of(params: &ModelParams) -> Result<f64, CliError> {
    params
        .critical_width()
        .ok_or_else(|| CliError::Config("model has no critical width".into()))
}

/// Runs `experiment` with `cfg` and returns its verdicts and data table.
pub fn execute(experiment: Experiment, cfg: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    if let Some(name) = &cfg.experiment {
        if name != experiment.name() {
            return Err(CliError::Config(format!("config is for {name:?}, not {:?}", experiment.name())));
        }
    }
    cfg.validate()?;
    match experiment {
        Experiment::SurvivalCurve => survival_curve(cfg),
        Experiment::AsymptoticConstant => asymptotic_constant(cfg),
        Experiment::LambdaBounds => lambda_bounds(cfg),
        Experiment::MartingaleSuite => martingale_suite(cfg),
        Experiment::ThinningTest => thinning_test(cfg),
        Experiment::OccupationTest => occupation_test(cfg),
        Experiment::StoppingLine => stopping_line(cfg),
        Experiment::QuasistationaryCompare => quasistationary_compare(cfg),
        Experiment::GrowthRate => growth_rate(cfg),
    }
}

fn survival_curve(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let params = cfg.model.params()?;
    let k0 = k0_of(&params)?;
    let sc = &cfg.survival_curve;
    let z = bonferroni_z(THREE_SIGMA_ALPHA, sc.k_factors.len());
    let mut table = Table::new(&["K", "x", "p_bvp", "p_mc", "stderr", "p_mc_half_horizon", "censored_fraction"]);
    let mut assertions = Vec::new();
    for (i, &factor) in sc.k_factors.iter().enumerate() {
        let k = factor * k0;
        let x = sc.x_fraction * k;
        let profile = solve(&params, k, cfg.solver.n, cfg.solver.tol)?;
        let p_bvp = profile.p_at(x);
        let sim_cfg = SimConfig::new(x, Tag::Plain, sc.horizon, cfg.simulation.dt, cfg.seed.wrapping_add(i as u64))
            .capped(sc.max_particles);
        let est = estimate_survival(&sim_cfg, &Dynamics::plain(&params, k)?, sc.replicates)?;
        let mc = est.at_horizon;
        table.push([k, x, p_bvp, mc.estimate, mc.stderr, est.at_half_horizon.estimate, est.censored_fraction].map(format_f));
        let pass = if profile.is_trivial() {
            mc.estimate <= sc.trivial_threshold
        } else {
            (mc.estimate - p_bvp).abs() <= z * mc.stderr
        };
        assertions.push(Assertion::new(
            format!("survival K={factor}K0"),
            pass,
            json!({ "K": k, "p_bvp": p_bvp, "p_mc": mc.estimate, "stderr": mc.stderr, "z_threshold": z,
                    "trivial": profile.is_trivial(), "horizon_bias_ok": est.horizon_bias_ok(z) }),
        ));
    }
    Ok(ExperimentOutcome::new(Experiment::SurvivalCurve, assertions, table, json!({ "k0": k0 })))
}

fn asymptotic_constant(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let params = cfg.model.params()?;
    let k0 = k0_of(&params)?;
    let ac = &cfg.asymptotic_constant;
    let mut table = Table::new(&["eps", "K", "x", "p", "ratio"]);
    let mut mids = Vec::new();
    for &eps in &ac.epsilons {
        let k = k0 / (1.0 - eps);
        let profile = nontrivial(&params, k, ac.n, cfg.solver.tol)?;
        let ratio = profile.asymptotic_ratio(ac.convention)?;
        for j in 1..=ac.points {
            let x = k * j as f64 / (ac.points + 1) as f64;
            table.push([eps, k, x, profile.p_at(x), ratio.at(x)].map(format_f));
        }
        mids.push(profile.asymptotic_ratio_midpoint(ac.convention)?);
    }
    let mut order: Vec<usize> = (0..mids.len()).collect();
    order.sort_by(|&a, &b| ac.epsilons[b].total_cmp(&ac.epsilons[a]));
    let monotone = order.windows(2).all(|w| (mids[w[1]] - 1.0).abs() < (mids[w[0]] - 1.0).abs());
    let last = mids[*order.last().expect("nonempty")];
    let assertions = vec![
        Assertion::new("midpoint ratio approaches 1 monotonically", monotone, json!({ "epsilons": ac.epsilons, "midpoint_ratios": mids })),
        Assertion::new(
            "smallest-eps midpoint ratio within bracket",
            last >= ac.bracket[0] && last <= ac.bracket[1],
            json!({ "value": last, "bracket": ac.bracket }),
        ),
    ];
    Ok(ExperimentOutcome::new(Experiment::AsymptoticConstant, assertions, table, json!({ "k0": k0, "convention": ac.convention })))
}

fn lambda_bounds(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let params = cfg.model.params()?;
    let k0 = k0_of(&params)?;
    let lb = &cfg.lambda_bounds;
    let mut table = Table::new(&["K", "lambda", "lower", "upper", "relative_gap"]);
    let mut assertions = Vec::new();
    let mut gaps = Vec::new();
    for &factor in &lb.k_factors {
        let k = factor * k0;
        let profile = nontrivial(&params, k, cfg.solver.n, cfg.solver.tol)?;
        let lambda = params.lambda_rate(k)?;
        let b = profile.lambda_bounds();
        let gap = (b.upper - b.lower) / lambda;
        table.push([k, lambda, b.lower, b.upper, gap].map(format_f));
        let lower_ok = b.lower <= lambda + lb.slack;
        let upper_ok = lambda <= b.upper + lb.slack;
        assertions.push(Assertion::new(
            format!("lower <= lambda <= upper at K={factor}K0"),
            lower_ok && upper_ok,
            json!({ "K": k, "lambda": lambda, "lower": b.lower, "upper": b.upper, "lower_ok": lower_ok, "upper_ok": upper_ok }),
        ));
        gaps.push((factor, gap));
    }
    gaps.sort_by(|a, b| a.0.total_cmp(&b.0));
    let shrinking = gaps.windows(2).all(|w| w[0].1 < w[1].1);
    assertions.push(Assertion::new("relative gap shrinks as K decreases to K0", shrinking, json!({ "gaps": gaps })));
    Ok(ExperimentOutcome::new(Experiment::LambdaBounds, assertions, table, json!({ "k0": k0 })))
}

fn martingale_suite(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let params = cfg.model.params()?;
    let k0 = k0_of(&params)?;
    let mg = &cfg.martingale_suite;
    let dt = cfg.simulation.dt;
    let mut table = Table::new(&["kind", "K", "t", "mean", "stderr", "z", "median", "target"]);
    let mut assertions = Vec::new();
    let mut reports = Vec::new();
    let mut inconclusive = Vec::new();

    let k = mg.k_factor * k0;
    let plain_profile = solve(&params, k, cfg.solver.n, cfg.solver.tol)?;
    let kb = k0 / (1.0 - mg.backbone_epsilon);
    let backbone_profile = if mg.backbone_kinds.is_empty() {
        None
    } else {
        Some(nontrivial(&params, kb, cfg.solver.n, cfg.solver.tol)?)
    };
    let mut jobs: Vec<(MartingaleKind, f64, Arc<SurvivalProfile>, &[f64])> = Vec::new();
    for &kind in &mg.kinds {
        jobs.push((kind, k, plain_profile.clone(), &mg.times));
    }
    if let Some(profile) = &backbone_profile {
        for &kind in &mg.backbone_kinds {
            jobs.push((kind, kb, profile.clone(), &mg.backbone_times));
        }
    }
    for (i, (kind, width, profile, times)) in jobs.into_iter().enumerate() {
        let spec = MartingaleSpec::new(kind, params.clone(), width, Some(profile))?;
        let report = martingale_mean_test(&spec, mg.x_fraction * width, times, mg.replicates, dt, cfg.seed.wrapping_add(i as u64))?;
        for j in 0..report.times.len() {
            table.push(
                std::iter::once(format!("{kind:?}")).chain(
                    [width, report.times[j], report.means[j], report.stderrs[j], report.z_scores[j], report.medians[j], report.target]
                        .map(format_f),
                ),
            );
        }
        if report.verdict == Verdict::Inconclusive {
            inconclusive.push(format!("{kind:?} censored fraction {}", report.censored_fraction));
        }
        assertions.push(Assertion::new(
            format!("{kind:?} mean constancy"),
            report.verdict == Verdict::Pass,
            json!({ "spec": kind, "times": report.times, "means": report.means, "stderrs": report.stderrs, "verdict": report.verdict }),
        ));
        reports.push(report);
    }
    if mg.subcritical_factor > 0.0 {
        let ks = mg.subcritical_factor * k0;
        let spec = MartingaleSpec::new(MartingaleKind::ZK, params.clone(), ks, None)?;
        let report =
            martingale_mean_test(&spec, mg.x_fraction * ks, &[mg.subcritical_time], mg.replicates, dt, cfg.seed.wrapping_add(1000))?;
        let median = report.medians[0];
        table.push(
            std::iter::once("ZK".to_string()).chain(
                [ks, mg.subcritical_time, report.means[0], report.stderrs[0], report.z_scores[0], median, report.target].map(format_f),
            ),
        );
        assertions.push(Assertion::new(
            format!("ZK mean constancy at K={}K0", mg.subcritical_factor),
            report.verdict == Verdict::Pass,
            json!({ "spec": "ZK", "times": report.times, "means": report.means, "stderrs": report.stderrs, "verdict": report.verdict }),
        ));
        assertions.push(Assertion::new(
            "ZK median collapses below the critical width",
            median < mg.median_fraction * report.target,
            json!({ "median": median, "bound": mg.median_fraction * report.target }),
        ));
        reports.push(report);
    }
    if !inconclusive.is_empty() {
        return Err(CliError::Censoring(inconclusive.join("; ")));
    }
    Ok(ExperimentOutcome::new(Experiment::MartingaleSuite, assertions, table, json!({ "k0": k0, "reports": reports })))
}

fn thinning_test(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let params = cfg.model.params()?;
    let k0 = k0_of(&params)?;
    let tt = &cfg.thinning_test;
    let k = tt.k_factor * k0;
    let x0 = tt.x_fraction * k;
    let profile = nontrivial(&params, k, cfg.solver.n, cfg.solver.tol)?;
    let rates = BackboneRates::from_profile(profile.clone())?;
    let horizon = tt.times.iter().copied().fold(0.0, f64::max);
    let sim_cfg = SimConfig::new(x0, Tag::Plain, horizon, cfg.simulation.dt, cfg.seed)
        .observing(&tt.times)
        .capped(cfg.simulation.max_particles);
    let marks = domain_tag("thinning-marks");
    let plain: Vec<Result<Vec<usize>, CliError>> =
        run_replicates(&sim_cfg, &Dynamics::plain(&params, k)?, "thinning-plain", tt.replicates, |i, out| {
            if out.truncated {
                return Err(CliError::Censoring("plain run hit the particle cap".into()));
            }
            let mut rng = stream(cfg.seed, marks, i as u64);
            Ok(out.snapshots.iter().map(|s| thin_population(&s.positions(), &profile, &mut rng).0).collect())
        })?;
    let plain = plain.into_iter().collect::<Result<Vec<_>, _>>()?;
    let px = profile.p_at(x0);
    let coin = domain_tag("thinning-coin");
    let dressed_tag = domain_tag("thinning-dressed");
    let dressed: Vec<Vec<usize>> = {
        use rayon::prelude::*;
        (0..tt.replicates)
            .into_par_iter()
            .map(|i| -> Result<Vec<usize>, CliError> {
                let root = if uniform(&mut stream(cfg.seed, coin, i as u64)) < px { Tag::Blue } else { Tag::Red };
                let out = simulate_dressed(&rates, x0, root, &sim_cfg, stream(cfg.seed, dressed_tag, i as u64))?;
                if out.truncated {
                    return Err(CliError::Censoring("dressed run hit the particle cap".into()));
                }
                Ok(out.snapshots.iter().map(|s| s.count_tag(Tag::Blue)).collect())
            })
            .collect::<Result<_, _>>()?
    };
    let mut table = Table::new(&["t", "blue_count", "plain_thinned", "dressed"]);
    let mut assertions = Vec::new();
    for (j, &t) in tt.times.iter().enumerate() {
        let a = tabulate(&plain.iter().map(|v| v[j]).collect::<Vec<_>>());
        let b = tabulate(&dressed.iter().map(|v| v[j]).collect::<Vec<_>>());
        for c in 0..a.len().max(b.len()) {
            table.push([format_f(t), c.to_string(), a.get(c).copied().unwrap_or(0).to_string(), b.get(c).copied().unwrap_or(0).to_string()]);
        }
        let r = chi_square_two_sample(&a, &b);
        assertions.push(Assertion::new(
            format!("thinned and dressed blue counts agree at t={t}"),
            !r.significant(tt.alpha),
            json!({ "statistic": r.statistic, "df": r.df, "p_value": r.p_value, "alpha": tt.alpha }),
        ));
    }
    Ok(ExperimentOutcome::new(Experiment::ThinningTest, assertions, table, json!({ "K": k, "x": x0, "p_x": px })))
}

fn occupation_test(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let ot = &cfg.occupation_test;
    let mut table = Table::new(&["mu", "bin_lo", "bin_hi", "observed", "expected"]);
    let mut assertions = Vec::new();
    for (m, &mu) in ot.mus.iter().enumerate() {
        let mut model = cfg.model.clone();
        model.mu = mu;
        let params = model.params()?;
        let k = ot.k_factor * k0_of(&params)?;
        let motion = MotionSpec::conditioned(params, k)?;
        let skip = (ot.burn_in / ot.interval).ceil() as usize;
        let tag = domain_tag("occupation");
        let trajectories: Vec<Result<Vec<f64>, DiffusionError>> = {
            use rayon::prelude::*;
            (0..ot.trajectories)
                .into_par_iter()
                .map(|i| {
                    let mut rng = stream(cfg.seed.wrapping_add(m as u64), tag, i as u64);
                    sample_positions(&motion, 0.5 * k, ot.horizon, ot.interval, ot.dt, &mut rng)
                })
                .collect()
        };
        let mut counts = vec![0usize; ot.bins];
        for path in trajectories {
            for x in path?.into_iter().skip(skip) {
                counts[((x / k * ot.bins as f64) as usize).min(ot.bins - 1)] += 1;
            }
        }
        let cdf = |x: f64| x / k - (2.0 * PI * x / k).sin() / (2.0 * PI);
        let edges: Vec<f64> = (0..=ot.bins).map(|j| k * j as f64 / ot.bins as f64).collect();
        let probs: Vec<f64> = edges.windows(2).map(|w| cdf(w[1]) - cdf(w[0])).collect();
        let total: usize = counts.iter().sum();
        for j in 0..ot.bins {
            table.push([format_f(mu), format_f(edges[j]), format_f(edges[j + 1]), counts[j].to_string(), format_f(probs[j] * total as f64)]);
        }
        let r = chi_square_gof(&counts, &probs);
        assertions.push(Assertion::new(
            format!("conditioned occupation matches (2/K)sin² at mu={mu}"),
            !r.significant(ot.alpha),
            json!({ "K": k, "samples": total, "statistic": r.statistic, "df": r.df, "p_value": r.p_value, "alpha": ot.alpha }),
        ));
    }
    Ok(ExperimentOutcome::new(Experiment::OccupationTest, assertions, table, Value::Null))
}

fn stopping_line(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let params = cfg.model.params()?;
    let k0 = k0_of(&params)?;
    let sl = &cfg.stopping_line;
    let z = bonferroni_z(THREE_SIGMA_ALPHA, sl.pairs.len());
    let mut table = Table::new(&["x", "y", "mean", "stderr", "target", "z"]);
    let mut assertions = Vec::new();
    for (i, &[xf, yf]) in sl.pairs.iter().enumerate() {
        let (x, y) = (xf * k0, yf * k0);
        let tag = domain_tag(&format!("stopping-line-{i}"));
        let counts: Vec<Result<usize, SimError>> = {
            use rayon::prelude::*;
            (0..sl.replicates)
                .into_par_iter()
                .map(|r| stopping_line_count(&params, y, x, sl.dt, stream(cfg.seed, tag, r as u64)))
                .collect()
        };
        let values = counts.into_iter().map(|c| c.map(|v| v as f64)).collect::<Result<Vec<f64>, _>>()?;
        let est = mean_stderr(&values);
        let target = (PI * x / k0).sin() / (PI * y / k0).sin() * (params.mu * (x - y)).exp();
        let zi = (est.mean - target) / est.stderr;
        table.push([x, y, est.mean, est.stderr, target, zi].map(format_f));
        assertions.push(Assertion::new(
            format!("stopping line mean at (x, y) = ({xf}, {yf})K0"),
            zi.abs() <= z,
            json!({ "mean": est.mean, "stderr": est.stderr, "target": target, "z": zi, "threshold": z }),
        ));
    }
    Ok(ExperimentOutcome::new(Experiment::StoppingLine, assertions, table, json!({ "k0": k0 })))
}

fn quasistationary_compare(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    use rayon::prelude::*;
    let params = cfg.model.params()?;
    let k0 = k0_of(&params)?;
    let qc = &cfg.quasistationary_compare;
    let x0 = qc.x_fraction * k0;
    let sim_cfg = SimConfig::new(x0, Tag::Spine, qc.time, cfg.simulation.dt, cfg.seed)
        .observing(&[qc.time])
        .capped(cfg.simulation.max_particles);
    let count = |out: crate::sim::RunOutput| -> Result<usize, CliError> {
        if out.truncated {
            return Err(CliError::Censoring("run hit the particle cap".into()));
        }
        Ok(out.snapshots[0].count())
    };
    let qs_tag = domain_tag("quasistationary");
    let qs: Vec<usize> = (0..qc.replicates)
        .into_par_iter()
        .map(|i| count(simulate_quasistationary(&params, x0, &sim_cfg, stream(cfg.seed, qs_tag, i as u64))?))
        .collect::<Result<_, _>>()?;
    let qs_tab = tabulate(&qs);
    let mut table = Table::new(&["eps", "count", "dressed", "quasistationary"]);
    let mut distances = Vec::new();
    for (e, &eps) in qc.epsilons.iter().enumerate() {
        let k = k0 / (1.0 - eps);
        let rates = BackboneRates::from_profile(nontrivial(&params, k, cfg.solver.n, cfg.solver.tol)?)?;
        let tag = domain_tag(&format!("dressed-{e}"));
        let dressed: Vec<usize> = (0..qc.replicates)
            .into_par_iter()
            .map(|i| count(simulate_dressed(&rates, x0, Tag::Blue, &sim_cfg, stream(cfg.seed, tag, i as u64))?))
            .collect::<Result<_, _>>()?;
        let tab = tabulate(&dressed);
        for c in 0..tab.len().max(qs_tab.len()) {
            table.push([
                format_f(eps),
                c.to_string(),
                tab.get(c).copied().unwrap_or(0).to_string(),
                qs_tab.get(c).copied().unwrap_or(0).to_string(),
            ]);
        }
        distances.push((eps, chi_square_distance(&tab, &qs_tab)));
    }
    let mut sorted = distances.clone();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let monotone = sorted.windows(2).all(|w| w[1].1 < w[0].1);
    let assertions = vec![Assertion::new(
        "chi-square distance to the quasi-stationary count law decreases with eps",
        monotone,
        json!({ "distances": distances }),
    )];
    Ok(ExperimentOutcome::new(Experiment::QuasistationaryCompare, assertions, table, json!({ "k0": k0, "x": x0 })))
}

fn growth_rate(cfg: &ExperimentConfig) -> Result<ExperimentOutcome, CliError> {
    let params = cfg.model.params()?;
    let k0 = k0_of(&params)?;
    let gr = &cfg.growth_rate;
    let k = gr.k_factor * k0;
    let rates = BackboneRates::from_profile(nontrivial(&params, k, cfg.solver.n, cfg.solver.tol)?)?;
    let dynamics = backbone_dynamics(&rates)?;
    let sim_cfg = SimConfig::new(gr.x_fraction * k, Tag::Blue, gr.horizon, cfg.simulation.dt, cfg.seed)
        .capped(cfg.simulation.max_particles);
    let est = growth_rate_estimate(&sim_cfg, &dynamics, gr.replicates, gr.fit_points)?;
    let censored = 1.0 - est.surviving as f64 / est.replicates as f64;
    if censored >= crate::martingales::MAX_CENSORED_FRACTION {
        return Err(CliError::Censoring(format!("{} of {} backbone runs unusable", est.replicates - est.surviving, est.replicates)));
    }
    let lambda = params.lambda_rate(k)?;
    let rel = (est.slope - lambda) / lambda;
    let mut table = Table::new(&["K", "lambda", "slope", "stderr", "relative_error"]);
    table.push([k, lambda, est.slope, est.stderr, rel].map(format_f));
    let assertions = vec![Assertion::new(
        "backbone growth slope within tolerance of lambda(K)",
        rel.abs() <= gr.relative_tolerance,
        json!({ "slope": est.slope, "lambda": lambda, "relative_error": rel, "tolerance": gr.relative_tolerance }),
    )];
    Ok(ExperimentOutcome::new(Experiment::GrowthRate, assertions, table, json!({ "k0": k0, "surviving": est.surviving })))
}

// ---------------------------------------------------------------------------
// Output

/// Writes the outcome files into `dir`, named after the experiment and the
/// config hash.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> Result<RunFiles, CliError> {
    fs::create_dir_all(dir)?;
    let hash = cfg.hash();
    let stem = format!("{}-{}", outcome.experiment, &hash[..HASH_PREFIX_LEN]);
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, outcome.table.to_csv()?)?;
    let verdict = json!({
        "experiment": outcome.experiment,
        "pass": outcome.pass,
        "config_hash": hash,
        "git_hash": GIT_HASH,
        "assertions": outcome.assertions,
        "details": outcome.details,
        "config": cfg,
    });
    let json_path = dir.join(format!("{stem}.json"));
    let mut text = serde_json::to_string_pretty(&verdict).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    fs::write(&json_path, text)?;
    let dat = if cfg.output.dat {
        let path = dir.join(format!("{stem}.dat"));
        fs::write(&path, outcome.table.to_dat())?;
        Some(path)
    } else {
        None
    };
    Ok(RunFiles { csv, json: json_path, dat })
}

/// Loads the config, runs the experiment and writes its outputs.
pub fn run_experiment(experiment: Experiment, config: &Path, out: Option<&Path>) -> Result<(ExperimentOutcome, RunFiles), CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let outcome = execute(experiment, &cfg)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output.dir.clone());
    let files = write_outputs(&dir, &cfg, &outcome)?;
    Ok((outcome, files))
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with(cli: Cli) -> u8 {
    let (experiment, args) = cli.command.split();
    if let Some(n) = args.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("warning: could not configure {n} threads: {e}");
        }
    }
    match run_experiment(experiment, &args.config, args.out.as_deref()) {
        Ok((outcome, files)) => {
            for a in &outcome.assertions {
                println!("{} {}", if a.pass { "PASS" } else { "FAIL" }, a.name);
            }
            println!("wrote {} and {}", files.csv.display(), files.json.display());
            if outcome.pass {
                exit_code::PASS
            } else {
                exit_code::ASSERTION_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "seed = 7\n[model]\nmu = 0.0\n";

    #[test]
    fn minimal_config_gets_defaults() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.model.beta, 1.0);
        assert_eq!(cfg.model.offspring, dyadic_table());
        assert_eq!(cfg.solver.n, 2000);
        assert_eq!(cfg.asymptotic_constant.epsilons, vec![0.1, 0.05, 0.02]);
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn schema_errors_map_to_config_exit_code() {
        for text in [
            "[model]\nmu = 0.0\n",
            "seed = 1\n",
            "seed = 1\nbogus = 2\n[model]\nmu = 0.0\n",
            "seed = 1\n[model]\nmu = 0.0\noffspring = { \"two\" = 1.0 }\n",
            "seed = 1\n[model]\nmu = 0.0\noffspring = { \"1\" = 1.0 }\n",
            "seed = 1\n[model]\nmu = 3.0\n",
            "seed = 1\n[model]\nmu = 0.0\n[stopping-line]\npairs = [[0.8, 0.4]]\n",
        ] {
            let err = ExperimentConfig::parse(text).unwrap_err();
            assert_eq!(err.exit_code(), exit_code::CONFIG, "{text}: {err}");
        }
    }

    #[test]
    fn experiment_name_must_match() {
        let cfg = ExperimentConfig::parse(&format!("experiment = \"growth-rate\"\n{MINIMAL}")).unwrap();
        let err = execute(Experiment::LambdaBounds, &cfg).unwrap_err();
        assert_eq!(err.exit_code(), exit_code::CONFIG);
    }

    #[test]
    fn trivial_width_is_a_missing_profile() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let params = cfg.model.params().unwrap();
        let err = nontrivial(&params, 0.9 * params.critical_width().unwrap(), 200, 1e-10).unwrap_err();
        assert_eq!(err.exit_code(), exit_code::MISSING_PROFILE);
    }

    #[test]
    fn lambda_bounds_outputs_are_reproducible() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        let outcome = execute(Experiment::LambdaBounds, &cfg).unwrap();
        assert!(outcome.pass, "{:?}", outcome.assertions);
        let dir = tempfile::tempdir().unwrap();
        let a = write_outputs(dir.path(), &cfg, &outcome).unwrap();
        let first = (fs::read(&a.csv).unwrap(), fs::read(&a.json).unwrap());
        let again = execute(Experiment::LambdaBounds, &cfg).unwrap();
        let b = write_outputs(dir.path(), &cfg, &again).unwrap();
        assert_eq!(a, b);
        assert_eq!(first, (fs::read(&b.csv).unwrap(), fs::read(&b.json).unwrap()));
        let header = String::from_utf8(first.0).unwrap();
        assert!(header.starts_with("K,lambda,lower,upper,relative_gap\n"));
    }

    #[test]
    fn table_formats() {
        let mut t = Table::new(&["a", "b"]);
        t.push(["1".to_string(), "2.5".to_string()]);
        assert_eq!(String::from_utf8(t.to_csv().unwrap()).unwrap(), "a,b\n1,2.5\n");
        assert_eq!(t.to_dat(), "# a b\n1 2.5\n");
    }
}
