//! Experiment driver: JSON configs, the forward / invert / tdinvert / study
//! pipelines, grid metrics and result artifacts.
//!
//! Every run is a pure function of its config and seeds. Grids are written
//! as CSV (first line: dims; then one line per row of the last dimension,
//! row-major, shortest round-trip decimal), records as pretty JSON.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{gauss_legendre_rule, Field, QuadratureRule};
use crate::kernels::Point;
use crate::reference::{
    point_evals, solve_1d_explicit, solve_forward_stationary, solve_forward_timedep, synthesize_observations,
    EnvironmentSpec, TimeEnvironmentSpec, TrigPotential,
};
use crate::solver::{Diagnostics, GaussNewtonConfig, StopReason};
use crate::stationary::{
    eval_points, Constant, Coupling, KernelSpec, Observations, Penalties, PotentialSpec, Scalar, StationaryProblem,
    StationaryProblemSpec, TorusDomain,
};
use crate::timedep::{SliceData, TimeDependentProblem, TimeDependentProblemSpec, TimeObservations, TimePotential};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Forward,
    Invert,
    Tdinvert,
    Study,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Forward => "forward",
            Mode::Invert => "invert",
            Mode::Tdinvert => "tdinvert",
            Mode::Study => "study",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum CouplingConfig {
    Power {
        alpha: f64,
    },
    /// Gaussian convolution evaluated with a tensor Gauss–Legendre rule of
    /// `nodes` points per dimension over the identification box.
    Nonlocal {
        sigma: f64,
        nodes: usize,
        #[serde(default)]
        periodic: bool,
    },
}

impl CouplingConfig {
    fn parameter(&self) -> f64 {
        match self {
            CouplingConfig::Power { alpha } => *alpha,
            CouplingConfig::Nonlocal { sigma, .. } => *sigma,
        }
    }

    fn rule(&self, domain: &TorusDomain) -> Result<Option<QuadratureRule>> {
        match self {
            CouplingConfig::Power { .. } => Ok(None),
            CouplingConfig::Nonlocal { nodes, .. } => Ok(Some(gauss_legendre_rule(*nodes, &domain.lower, &domain.upper)?)),
        }
    }

    /// The coupling with its parameter known (`initial = None`) or unknown
    /// with the given starting value.
    fn build(&self, domain: &TorusDomain, initial: Option<f64>) -> Result<Coupling> {
        let p = initial.map_or(Scalar::known(self.parameter()), Scalar::unknown);
        Ok(match self {
            CouplingConfig::Power { .. } => Coupling::PowerLocal { alpha: p },
            CouplingConfig::Nonlocal { periodic, .. } => Coupling::NonlocalGaussian {
                sigma: p,
                rule: self.rule(domain)?.expect("nonlocal rule"),
                periodic: *periodic,
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub potential: TrigPotential,
    pub nu: f64,
    pub coupling: CouplingConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub horizon: f64,
    pub steps: usize,
    #[serde(default = "zero_potential")]
    pub terminal: TrigPotential,
    #[serde(default = "unit_potential")]
    pub initial: TrigPotential,
}

fn zero_potential() -> TrigPotential {
    TrigPotential::constant(0.0)
}

fn unit_potential() -> TrigPotential {
    TrigPotential::constant(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceKind {
    /// Forward GP solve with the environment known.
    Forward,
    /// The explicit first-order 1D solution (`ν = 0`, `Γ = m²`).
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub kind: ReferenceKind,
    /// Uniform collocation grid per dimension; 30 in 2D and 64 in 1D by default.
    pub grid: Option<usize>,
    pub lengthscale: f64,
    pub penalties: Penalties,
    pub eta: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { kind: ReferenceKind::Forward, grid: None, lengthscale: 1.0, penalties: Penalties::default(), eta: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    /// Random collocation points `M`.
    pub points: usize,
    /// `m` is observed at the first `I` points.
    pub m_observations: usize,
    /// `V` is observed at the first `I_V` points.
    pub v_observations: usize,
    pub gamma: f64,
    pub kernels: KernelSpec,
    /// Starting value when the viscosity is recovered; known otherwise.
    pub unknown_viscosity: Option<f64>,
    /// Starting value when the coupling parameter is recovered.
    pub unknown_coupling: Option<f64>,
    /// Append the non-local quadrature nodes to the collocation points.
    pub quadrature_points: bool,
    pub penalties: Penalties,
    pub hbar_prior_weight: f64,
    pub scalar_prior_weight: f64,
    pub eta: f64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            points: 400,
            m_observations: 40,
            v_observations: 0,
            gamma: 1e-3,
            kernels: KernelSpec::uniform(1.41),
            unknown_viscosity: None,
            unknown_coupling: None,
            quadrature_points: true,
            penalties: Penalties::default(),
            hbar_prior_weight: 1.0,
            scalar_prior_weight: 0.0,
            eta: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub observation_counts: Vec<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self { observation_counts: vec![10, 20, 40] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Optional; must agree with the mode given on the command line.
    #[serde(default)]
    pub mode: Option<Mode>,
    pub domain: TorusDomain,
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub time: Option<TimeConfig>,
    #[serde(default)]
    pub reference: ReferenceConfig,
    #[serde(default)]
    pub inversion: InversionConfig,
    #[serde(default)]
    pub study: StudyConfig,
    #[serde(default)]
    pub solver: GaussNewtonConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Metrics grid per dimension; 64 in 2D and 128 in 1D by default.
    #[serde(default)]
    pub metrics_grid: Option<usize>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config("schema_version", format!("expected {SCHEMA_VERSION}, got {}", self.schema_version)));
        }
        if let Some(m) = self.mode {
            if m != mode {
                return Err(Error::config("mode", format!("config says {}, command line says {}", m.name(), mode.name())));
            }
        }
        self.domain.validate()?;
        let dim = self.domain.dim();
        let env = &self.environment;
        env.potential.validate(dim, "environment.potential")?;
        if !(env.nu >= 0.0) || !env.nu.is_finite() {
            return Err(Error::config("environment.nu", "must be nonnegative"));
        }
        let p = env.coupling.parameter();
        if !(p > 0.0) || !p.is_finite() {
            return Err(Error::config("environment.coupling", "parameter must be positive"));
        }
        if let CouplingConfig::Nonlocal { nodes, .. } = env.coupling {
            if nodes == 0 {
                return Err(Error::config("environment.coupling.nodes", "must be positive"));
            }
        }
        let r = &self.reference;
        match r.kind {
            ReferenceKind::Explicit => {
                if dim != 1 || env.nu != 0.0 || env.coupling != (CouplingConfig::Power { alpha: 2.0 }) {
                    return Err(Error::config("reference.kind", "explicit reference needs dim 1, nu 0 and power coupling 2"));
                }
                if self.time.is_some() {
                    return Err(Error::config("reference.kind", "explicit reference is stationary"));
                }
            }
            ReferenceKind::Forward => {
                if env.nu == 0.0 {
                    return Err(Error::config("environment.nu", "forward reference needs a positive viscosity"));
                }
            }
        }
        if r.grid == Some(0) || !(r.lengthscale > 0.0) {
            return Err(Error::config("reference", "grid and lengthscale must be positive"));
        }
        let inv = &self.inversion;
        if inv.points == 0 {
            return Err(Error::config("inversion.points", "must be positive"));
        }
        if inv.m_observations > inv.points {
            return Err(Error::config("inversion.m_observations", "cannot exceed inversion.points"));
        }
        if inv.v_observations > inv.points {
            return Err(Error::config("inversion.v_observations", "cannot exceed inversion.points"));
        }
        if !(inv.gamma > 0.0) || !inv.gamma.is_finite() {
            return Err(Error::config("inversion.gamma", "must be positive"));
        }
        for (name, v) in [("inversion.unknown_viscosity", inv.unknown_viscosity), ("inversion.unknown_coupling", inv.unknown_coupling)] {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::config(name, "starting value must be positive"));
                }
            }
        }
        if mode == Mode::Tdinvert && self.time.is_none() {
            return Err(Error::config("time", "tdinvert needs a time section"));
        }
        if let Some(t) = &self.time {
            if t.steps == 0 || !(t.horizon > 0.0) {
                return Err(Error::config("time", "steps and horizon must be positive"));
            }
            t.terminal.validate(dim, "time.terminal")?;
            t.initial.validate(dim, "time.initial")?;
            if mode == Mode::Study || mode == Mode::Invert {
                return Err(Error::config("time", "invert and study are stationary; use tdinvert"));
            }
        }
        if mode == Mode::Study {
            let c = &self.study.observation_counts;
            if c.is_empty() || c.iter().any(|&i| i == 0 || i > inv.points) {
                return Err(Error::config("study.observation_counts", "counts must be in 1..=inversion.points"));
            }
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        if matches!(self.metrics_grid, Some(n) if n < 2) {
            return Err(Error::config("metrics_grid", "must be at least 2"));
        }
        Ok(())
    }

    fn metrics_n(&self) -> usize {
        self.metrics_grid.unwrap_or(if self.domain.dim() == 1 { 128 } else { 64 })
    }

    fn reference_n(&self) -> usize {
        self.reference.grid.unwrap_or(if self.domain.dim() == 1 { 64 } else { 30 })
    }
}

/// Values of a field on a uniform grid, row-major with the last coordinate fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn sample<F: Field + Sync + ?Sized>(domain: &TorusDomain, n: usize, field: &F) -> Self {
        let pts = domain.uniform_grid(n);
        Self { dims: vec![n; domain.dim()], values: eval_points(field, &pts) }
    }

    /// Stacks equally shaped grids along a new leading axis.
    pub fn stack(slices: &[Grid]) -> Result<Self> {
        let first = slices.first().ok_or_else(|| Error::invalid("nothing to stack"))?;
        if slices.iter().any(|g| g.dims != first.dims) {
            return Err(Error::invalid("stacked grids must share their shape"));
        }
        let mut dims = vec![slices.len()];
        dims.extend(&first.dims);
        Ok(Self { dims, values: slices.iter().flat_map(|g| g.values.iter().copied()).collect() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { dims: self.dims.clone(), values: self.values.iter().map(|v| f(*v)).collect() }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let row = *self.dims.last().unwrap_or(&1);
        let mut out = self.dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",");
        out.push('\n');
        for chunk in self.values.chunks(row.max(1)) {
            out.push_str(&chunk.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::invalid("empty grid file"))?;
        let dims = header
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|e| Error::invalid(format!("grid dims: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut values = Vec::with_capacity(dims.iter().product());
        for line in lines.filter(|l| !l.trim().is_empty()) {
            for s in line.split(',') {
                values.push(s.trim().parse::<f64>().map_err(|e| Error::invalid(format!("grid value `{s}`: {e}")))?);
            }
        }
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::SizeMismatch { expected: dims.iter().product(), got: values.len() });
        }
        Ok(Self { dims, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_csv())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

/// `√(mean over nodes of (A - B)²)`.
pub fn l2_grid_error(a: &Grid, b: &Grid) -> Result<f64> {
    if a.dims != b.dims || a.values.len() != b.values.len() {
        return Err(Error::invalid(format!("grid shapes differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    let s: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((s / a.values.len() as f64).sqrt())
}

/// Error of `A - ca` against `B - cb`, e.g. `V† - H̄†` against `V* - H̄*`.
pub fn l2_gauge_error(a: &Grid, ca: f64, b: &Grid, cb: f64) -> Result<f64> {
    l2_grid_error(&a.map(|v| v - ca), &b.map(|v| v - cb))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scalars {
    pub hbar: Option<f64>,
    pub nu: Option<f64>,
    pub coupling: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub iterations: usize,
    pub stop: StopReason,
    pub final_objective: f64,
}

impl From<&Diagnostics> for DiagnosticsSummary {
    fn from(d: &Diagnostics) -> Self {
        Self { iterations: d.iterations(), stop: d.stop, final_objective: d.final_objective() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub mode: Mode,
    pub status: Status,
    pub error: Option<String>,
    pub seed: Option<u64>,
    /// Number of m observations used (invert, study, tdinvert).
    pub observations: Option<usize>,
    pub config: ExperimentConfig,
    pub recovered: Scalars,
    pub reference: Scalars,
    /// L2 errors on the metrics grid: `m`, `u`, `v`, `v_minus_hbar`.
    pub errors: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, f64>,
    pub series: BTreeMap<String, Vec<f64>>,
    pub diagnostics: Option<DiagnosticsSummary>,
    pub wall_clock_seconds: f64,
    /// Grid name to file name, relative to the output directory.
    pub grids: BTreeMap<String, String>,
}

impl ResultRecord {
    fn new(config: &ExperimentConfig, mode: Mode, seed: Option<u64>, observations: Option<usize>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mode,
            status: Status::Ok,
            error: None,
            seed,
            observations,
            config: config.clone(),
            recovered: Scalars::default(),
            reference: Scalars::default(),
            errors: BTreeMap::new(),
            metrics: BTreeMap::new(),
            series: BTreeMap::new(),
            diagnostics: None,
            wall_clock_seconds: 0.0,
            grids: BTreeMap::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, serde_json::to_string_pretty(self)? + "\n")?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// One row of a study table: quantiles of an error over seeds at one `I`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub observations: usize,
    pub seeds: usize,
    pub failed: usize,
    /// Error name to `[q1, median, q3]`.
    pub quantiles: BTreeMap<String, [f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub schema_version: u32,
    pub rows: Vec<StudyRow>,
    /// Per-cell record files, relative to the output directory.
    pub records: Vec<String>,
}

/// Everything a run produced, for callers that do not want to reread files.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<ResultRecord>,
    pub study: Option<StudySummary>,
}

/// Seed of an independent random stream derived from a run seed.
fn stream_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
}

const M_NOISE: u64 = 1;
const V_NOISE: u64 = 2;
const HELD_OUT: u64 = 3;

type SharedField = Arc<dyn Field + Send + Sync>;

/// Ground truth for a stationary run.
struct StationaryTruth {
    u: SharedField,
    m: SharedField,
    hbar: f64,
    potential: TrigPotential,
}

fn stationary_env(cfg: &ExperimentConfig) -> Result<EnvironmentSpec> {
    let e = &cfg.environment;
    Ok(EnvironmentSpec { potential: e.potential.clone(), nu: e.nu, coupling: e.coupling.build(&cfg.domain, None)? })
}

fn stationary_truth(cfg: &ExperimentConfig, record: &mut ResultRecord) -> Result<StationaryTruth> {
    let potential = cfg.environment.potential.clone();
    match cfg.reference.kind {
        ReferenceKind::Explicit => {
            let sol = solve_1d_explicit(potential.clone(), 512)?;
            let hbar = sol.hbar;
            Ok(StationaryTruth { u: Arc::new(Constant(0.0)), m: Arc::new(sol), hbar, potential })
        }
        ReferenceKind::Forward => {
            let env = stationary_env(cfg)?;
            let r = &cfg.reference;
            let kernels = KernelSpec::uniform(r.lengthscale);
            let sol = solve_forward_stationary(
                &env,
                &cfg.domain,
                cfg.domain.uniform_grid(cfg.reference_n()),
                kernels,
                r.penalties,
                r.eta,
                &cfg.solver,
            )?;
            record.metrics.insert("reference_iterations".into(), sol.diagnostics.iterations() as f64);
            let held_out = cfg.domain.sample_uniform(200, stream_seed(cfg.seeds[0], HELD_OUT));
            let worst = sol.residuals_at(&env, &held_out).iter().fold(0.0f64, |a, r| a.max(r.abs()));
            record.metrics.insert("reference_heldout_residual".into(), worst);
            Ok(StationaryTruth {
                u: Arc::new(sol.fields.u.clone()),
                m: Arc::new(sol.fields.m.clone()),
                hbar: sol.fields.hbar,
                potential,
            })
        }
    }
}

/// Runs one mode of the driver, writing artifacts under `out`.
pub fn run(cfg: &ExperimentConfig, mode: Mode, out: &Path) -> Result<RunOutput> {
    cfg.validate(mode)?;
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let result = run_mode(cfg, mode, out);
    if let Err(e) = &result {
        if e.is_solver_failure() {
            let mut rec = ResultRecord::new(cfg, mode, None, None);
            rec.status = Status::Failed;
            rec.error = Some(e.to_string());
            rec.wall_clock_seconds = start.elapsed().as_secs_f64();
            rec.write(&out.join(format!("{}.json", mode.name())))?;
        }
    }
    result
}

fn run_mode(cfg: &ExperimentConfig, mode: Mode, out: &Path) -> Result<RunOutput> {
    match mode {
        Mode::Forward => run_forward(cfg, out).map(|r| RunOutput { records: vec![r], study: None }),
        Mode::Invert => {
            let mut probe = ResultRecord::new(cfg, mode, None, None);
            let truth = stationary_truth(cfg, &mut probe)?;
            let mut records = Vec::new();
            for &seed in &cfg.seeds {
                let tag = format!("invert_seed{seed}");
                let rec = invert_cell(cfg, &truth, &probe, seed, cfg.inversion.m_observations, out, &tag);
                rec.write(&out.join(format!("{tag}.json")))?;
                records.push(rec);
            }
            finish(records, None)
        }
        Mode::Tdinvert => {
            let mut records = Vec::new();
            let truth = TimeTruth::solve(cfg)?;
            for &seed in &cfg.seeds {
                let tag = format!("tdinvert_seed{seed}");
                let rec = tdinvert_cell(cfg, &truth, seed, out, &tag);
                rec.write(&out.join(format!("{tag}.json")))?;
                records.push(rec);
            }
            finish(records, None)
        }
        Mode::Study => run_study(cfg, out),
    }
}

/// Surfaces the first failed record as an error after all artifacts are written.
fn finish(records: Vec<ResultRecord>, study: Option<StudySummary>) -> Result<RunOutput> {
    if let Some(r) = records.iter().find(|r| r.status == Status::Failed) {
        return Err(Error::Solver {
            iteration: r.diagnostics.as_ref().map_or(0, |d| d.iterations),
            reason: r.error.clone().unwrap_or_default(),
        });
    }
    Ok(RunOutput { records, study })
}

fn run_forward(cfg: &ExperimentConfig, out: &Path) -> Result<ResultRecord> {
    let start = Instant::now();
    let mut rec = ResultRecord::new(cfg, Mode::Forward, None, None);
    let n = cfg.metrics_n();
    let domain = &cfg.domain;
    if cfg.time.is_some() {
        let truth = TimeTruth::solve(cfg)?;
        rec.reference = Scalars { hbar: None, nu: Some(cfg.environment.nu), coupling: Some(cfg.environment.coupling.parameter()) };
        rec.metrics.insert("reference_heldout_residual".into(), truth.heldout);
        rec.diagnostics = Some((&truth.solution.diagnostics).into());
        let f = &truth.solution.fields;
        let u = Grid::stack(&f.u.iter().map(|g| Grid::sample(domain, n, g)).collect::<Vec<_>>())?;
        let m_slices: Vec<Grid> = f.m.iter().map(|g| Grid::sample(domain, n, g)).collect();
        rec.series.insert("mass".into(), m_slices.iter().map(|g| g.mean()).collect());
        let m = Grid::stack(&m_slices)?;
        save(&mut rec, out, "forward", "u", &u)?;
        save(&mut rec, out, "forward", "m", &m)?;
        save(&mut rec, out, "forward", "v", &Grid::sample(domain, n, &cfg.environment.potential))?;
    } else {
        let truth = stationary_truth(cfg, &mut rec)?;
        rec.reference = Scalars {
            hbar: Some(truth.hbar),
            nu: Some(cfg.environment.nu),
            coupling: Some(cfg.environment.coupling.parameter()),
        };
        rec.recovered = rec.reference.clone();
        let m = Grid::sample(domain, n, truth.m.as_ref());
        rec.metrics.insert("mass".into(), m.mean());
        save(&mut rec, out, "forward", "u", &Grid::sample(domain, n, truth.u.as_ref()))?;
        save(&mut rec, out, "forward", "m", &m)?;
        save(&mut rec, out, "forward", "v", &Grid::sample(domain, n, &truth.potential))?;
    }
    rec.wall_clock_seconds = start.elapsed().as_secs_f64();
    rec.write(&out.join("forward.json"))?;
    Ok(rec)
}

fn save(rec: &mut ResultRecord, out: &Path, tag: &str, name: &str, grid: &Grid) -> Result<()> {
    let file = format!("{tag}_{name}.csv");
    grid.write(&out.join(&file))?;
    rec.grids.insert(name.to_string(), file);
    Ok(())
}

/// Collocation points of an inversion: `M` random points, then the
/// quadrature nodes for a non-local coupling when requested.
fn inversion_points(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Point>> {
    let mut pts = cfg.domain.sample_uniform(cfg.inversion.points, seed);
    if cfg.inversion.quadrature_points {
        if let Some(rule) = cfg.environment.coupling.rule(&cfg.domain)? {
            pts.extend(rule.nodes);
        }
    }
    Ok(pts)
}

fn invert_cell(
    cfg: &ExperimentConfig,
    truth: &StationaryTruth,
    base: &ResultRecord,
    seed: u64,
    observations: usize,
    out: &Path,
    tag: &str,
) -> ResultRecord {
    let start = Instant::now();
    let mut rec = ResultRecord::new(cfg, base.mode, Some(seed), Some(observations));
    rec.metrics = base.metrics.clone();
    rec.reference = Scalars {
        hbar: Some(truth.hbar),
        nu: Some(cfg.environment.nu),
        coupling: Some(cfg.environment.coupling.parameter()),
    };
    if let Err(e) = invert_into(cfg, truth, seed, observations, out, tag, &mut rec) {
        rec.status = Status::Failed;
        rec.error = Some(e.to_string());
    }
    rec.wall_clock_seconds = start.elapsed().as_secs_f64();
    rec
}

fn invert_into(
    cfg: &ExperimentConfig,
    truth: &StationaryTruth,
    seed: u64,
    observations: usize,
    out: &Path,
    tag: &str,
    rec: &mut ResultRecord,
) -> Result<()> {
    let inv = &cfg.inversion;
    let domain = &cfg.domain;
    let pts = inversion_points(cfg, seed)?;
    let m_obs = synthesize_observations(truth.m.as_ref(), point_evals(&pts[..observations]), inv.gamma, stream_seed(seed, M_NOISE))?;
    let v_obs = synthesize_observations(
        &truth.potential,
        point_evals(&pts[..inv.v_observations]),
        inv.gamma,
        stream_seed(seed, V_NOISE),
    )?;
    let viscosity = inv.unknown_viscosity.map_or(Scalar::known(cfg.environment.nu), Scalar::unknown);
    let coupling = cfg.environment.coupling.build(domain, inv.unknown_coupling)?;
    let mut spec = StationaryProblemSpec::new(domain.clone(), pts, coupling, viscosity);
    spec.kernels = inv.kernels.clone();
    spec.m_observations = m_obs.into_observations();
    spec.potential = PotentialSpec::Unknown(v_obs.into_observations());
    spec.penalties = inv.penalties;
    spec.hbar_prior_weight = inv.hbar_prior_weight;
    spec.scalar_prior_weight = inv.scalar_prior_weight;
    spec.eta = inv.eta;
    let problem = StationaryProblem::new(spec)?;
    let (state, diag) = problem.gauss_newton(&problem.initial_state(), &cfg.solver)?;
    rec.diagnostics = Some((&diag).into());
    let fields = problem.reconstruct(&state)?;
    rec.recovered = Scalars { hbar: Some(fields.hbar), nu: Some(fields.nu), coupling: Some(fields.coupling) };

    let n = cfg.metrics_n();
    let grids = [
        ("m", Grid::sample(domain, n, &fields.m)),
        ("m_ref", Grid::sample(domain, n, truth.m.as_ref())),
        ("u", Grid::sample(domain, n, &fields.u)),
        ("u_ref", Grid::sample(domain, n, truth.u.as_ref())),
        ("v", Grid::sample(domain, n, fields.v.as_ref().expect("potential is recovered"))),
        ("v_ref", Grid::sample(domain, n, &truth.potential)),
    ];
    for (name, g) in &grids {
        save(rec, out, tag, name, g)?;
    }
    let g = |name: &str| &grids.iter().find(|(n, _)| *n == name).expect("grid").1;
    rec.errors.insert("m".into(), l2_grid_error(g("m"), g("m_ref"))?);
    rec.errors.insert("u".into(), l2_grid_error(g("u"), g("u_ref"))?);
    rec.errors.insert("v".into(), l2_grid_error(g("v"), g("v_ref"))?);
    rec.errors.insert("v_minus_hbar".into(), l2_gauge_error(g("v"), fields.hbar, g("v_ref"), truth.hbar)?);
    rec.metrics.insert("mass".into(), g("m").mean());
    Ok(())
}

fn quantiles(mut v: Vec<f64>) -> [f64; 3] {
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    [q(0.25), q(0.5), q(0.75)]
}

fn run_study(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput> {
    let dir = out.join("study");
    fs::create_dir_all(&dir)?;
    let mut probe = ResultRecord::new(cfg, Mode::Study, None, None);
    let truth = stationary_truth(cfg, &mut probe)?;
    let cells: Vec<(usize, u64)> =
        cfg.study.observation_counts.iter().flat_map(|&i| cfg.seeds.iter().map(move |&s| (i, s))).collect();
    let records: Vec<ResultRecord> = cells
        .par_iter()
        .map(|&(i, seed)| {
            let tag = format!("I{i}_seed{seed}");
            let mut rec = invert_cell(cfg, &truth, &probe, seed, i, &dir, &tag);
            for f in rec.grids.values_mut() {
                *f = format!("study/{f}");
            }
            rec
        })
        .collect();
    let mut files = Vec::new();
    for r in &records {
        let file = format!("study/I{}_seed{}.json", r.observations.unwrap_or(0), r.seed.unwrap_or(0));
        r.write(&out.join(&file))?;
        files.push(file);
    }
    let mut rows = Vec::new();
    for &i in &cfg.study.observation_counts {
        let ok: Vec<&ResultRecord> =
            records.iter().filter(|r| r.observations == Some(i) && r.status == Status::Ok).collect();
        let failed = records.iter().filter(|r| r.observations == Some(i) && r.status == Status::Failed).count();
        let mut q = BTreeMap::new();
        if !ok.is_empty() {
            for key in ["m", "u", "v", "v_minus_hbar"] {
                q.insert(key.to_string(), quantiles(ok.iter().map(|r| r.errors[key]).collect()));
            }
        }
        rows.push(StudyRow { observations: i, seeds: cfg.seeds.len(), failed, quantiles: q });
    }
    let summary = StudySummary { schema_version: SCHEMA_VERSION, rows, records: files };
    fs::write(out.join("study.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    let mut csv = String::from("observations,field,q1,median,q3\n");
    for row in &summary.rows {
        for (k, [a, b, c]) in &row.quantiles {
            csv.push_str(&format!("{},{k},{a},{b},{c}\n", row.observations));
        }
    }
    fs::write(out.join("study.csv"), csv)?;
    finish(records, Some(summary))
}

/// Forward reference of a time-dependent run.
struct TimeTruth {
    env: TimeEnvironmentSpec,
    solution: crate::reference::TimeForwardSolution,
    heldout: f64,
}

impl TimeTruth {
    fn solve(cfg: &ExperimentConfig) -> Result<Self> {
        let t = cfg.time.as_ref().ok_or_else(|| Error::config("time", "missing"))?;
        let env = TimeEnvironmentSpec {
            environment: stationary_env(cfg)?,
            horizon: t.horizon,
            steps: t.steps,
            terminal: t.terminal.clone(),
            initial: t.initial.clone(),
        };
        let r = &cfg.reference;
        let solution = solve_forward_timedep(
            &env,
            &cfg.domain,
            cfg.domain.uniform_grid(cfg.reference_n()),
            KernelSpec::uniform(r.lengthscale),
            r.penalties.alpha_pen,
            r.eta,
            &cfg.solver,
        )?;
        let held_out = cfg.domain.sample_uniform(200, stream_seed(cfg.seeds[0], HELD_OUT));
        let heldout = solution.residuals_at(&env, &held_out).iter().fold(0.0f64, |a, r| a.max(r.abs()));
        Ok(Self { env, solution, heldout })
    }
}

fn tdinvert_cell(cfg: &ExperimentConfig, truth: &TimeTruth, seed: u64, out: &Path, tag: &str) -> ResultRecord {
    let start = Instant::now();
    let mut rec = ResultRecord::new(cfg, Mode::Tdinvert, Some(seed), Some(cfg.inversion.m_observations));
    rec.reference = Scalars { hbar: None, nu: Some(cfg.environment.nu), coupling: Some(cfg.environment.coupling.parameter()) };
    rec.metrics.insert("reference_heldout_residual".into(), truth.heldout);
    if let Err(e) = tdinvert_into(cfg, truth, seed, out, tag, &mut rec) {
        rec.status = Status::Failed;
        rec.error = Some(e.to_string());
    }
    rec.wall_clock_seconds = start.elapsed().as_secs_f64();
    rec
}

fn tdinvert_into(
    cfg: &ExperimentConfig,
    truth: &TimeTruth,
    seed: u64,
    out: &Path,
    tag: &str,
    rec: &mut ResultRecord,
) -> Result<()> {
    let inv = &cfg.inversion;
    let domain = &cfg.domain;
    let env = &truth.env;
    let reference = &truth.solution.fields;
    let pts = inversion_points(cfg, seed)?;
    let functionals = point_evals(&pts[..inv.m_observations]);
    let slices = (0..=env.steps)
        .map(|k| {
            let o = synthesize_observations(
                &reference.m[k],
                functionals.clone(),
                inv.gamma,
                stream_seed(seed, M_NOISE).wrapping_add(k as u64),
            )?;
            Ok(SliceData { slice: k, data: o.noisy, noise: vec![inv.gamma; functionals.len()] })
        })
        .collect::<Result<Vec<_>>>()?;
    let v_obs = synthesize_observations(&env.environment.potential, point_evals(&pts[..inv.v_observations]), inv.gamma, stream_seed(seed, V_NOISE))?;

    let viscosity = inv.unknown_viscosity.map_or(Scalar::known(env.environment.nu), Scalar::unknown);
    let coupling = cfg.environment.coupling.build(domain, inv.unknown_coupling)?;
    let mut spec = TimeDependentProblemSpec::new(
        domain.clone(),
        pts,
        env.horizon,
        env.steps,
        coupling,
        viscosity,
        &env.terminal,
        &env.initial,
    );
    spec.kernels = inv.kernels.clone();
    spec.m_observations = TimeObservations { functionals, slices };
    spec.potential = TimePotential::Shared(Observations::new(v_obs.functionals, v_obs.noisy, inv.gamma));
    spec.alpha_pen = inv.penalties.alpha_pen;
    spec.scalar_prior_weight = inv.scalar_prior_weight;
    spec.eta = inv.eta;
    let problem = TimeDependentProblem::new(spec)?;
    let (state, diag) = problem.gauss_newton(&problem.initial_state(), &cfg.solver)?;
    rec.diagnostics = Some((&diag).into());
    let fields = problem.reconstruct(&state)?;
    rec.recovered = Scalars { hbar: None, nu: Some(fields.nu), coupling: Some(fields.coupling) };

    let rows = problem.residuals(&state)?;
    let n_pts = problem.spec().collocation.len();
    let dt = problem.spec().dt();
    let tail = &rows[rows.len() - 2 * n_pts..];
    let worst = |r: &[f64]| r.iter().fold(0.0f64, |a, v| a.max((v * dt).abs()));
    rec.metrics.insert("terminal_residual".into(), worst(&tail[..n_pts]));
    rec.metrics.insert("initial_residual".into(), worst(&tail[n_pts..]));

    let n = cfg.metrics_n();
    let sample_all = |fs: &[crate::stationary::RecoveredField]| {
        Grid::stack(&fs.iter().map(|f| Grid::sample(domain, n, f)).collect::<Vec<_>>())
    };
    let m = sample_all(&fields.m)?;
    let m_ref = sample_all(&reference.m)?;
    let u = sample_all(&fields.u)?;
    let u_ref = sample_all(&reference.u)?;
    let v = Grid::sample(domain, n, fields.potential(0).expect("potential is recovered"));
    let v_ref = Grid::sample(domain, n, &env.environment.potential);
    let per_slice = n.pow(domain.dim() as u32);
    let mass = |g: &Grid| g.values.chunks(per_slice).map(|c| c.iter().sum::<f64>() / per_slice as f64).collect::<Vec<_>>();
    let (mr, mf) = (mass(&m), mass(&m_ref));
    rec.metrics.insert("mass_max_deviation".into(), mr.iter().zip(&mf).fold(0.0f64, |a, (x, y)| a.max((x - y).abs())));
    rec.series.insert("mass".into(), mr);
    rec.series.insert("mass_ref".into(), mf);
    rec.errors.insert("m".into(), l2_grid_error(&m, &m_ref)?);
    rec.errors.insert("u".into(), l2_grid_error(&u, &u_ref)?);
    rec.errors.insert("v".into(), l2_grid_error(&v, &v_ref)?);
    for (name, g) in [("m", &m), ("m_ref", &m_ref), ("u", &u), ("u_ref", &u_ref), ("v", &v), ("v_ref", &v_ref)] {
        save(rec, out, tag, name, g)?;
    }
    Ok(())
}

/// Values of a field at the nodes of the metrics grid of `cfg`.
pub fn metrics_grid(cfg: &ExperimentConfig, field: &(dyn Field + Sync)) -> Grid {
    Grid::sample(&cfg.domain, cfg.metrics_n(), field)
}

/// Output directory precedence: command line, then config, then `out`.
pub fn output_dir(cfg: &ExperimentConfig, cli: Option<&Path>) -> PathBuf {
    cli.map(Path::to_path_buf).or_else(|| cfg.output.clone()).unwrap_or_else(|| PathBuf::from("out"))
}
