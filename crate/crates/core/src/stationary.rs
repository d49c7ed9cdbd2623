//! Stationary MFG inverse problem on a flat torus with quadratic Hamiltonian
//! `H(x, p) = |p|²/2 - V(x)`:
//!
//! ```text
//! -ν Δu + |Du|²/2 + V - Γ(m) - H̄ = 0
//! -ν Δm - div(m Du)             = 0
//! ```
//!
//! Unknown fields get GP priors over feature latents; unknown scalars among
//! `ν`, `α`, `σ` are optimized in log form.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{squared_distance, Field, LinearFunctional, QuadratureRule};
use crate::gram::{GramSystem, DEFAULT_NUGGET};
use crate::kernels::{DerivOp, PeriodicKernel, Point};
use crate::solver::{self, Diagnostics, GaussNewtonConfig, PriorBlock, ResidualModel, SparseRow};

/// Identification box of a flat torus; periods are the side lengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl TorusDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let d = Self { lower, upper };
        d.validate()?;
        Ok(d)
    }

    /// `[0, 1)^dim`.
    pub fn unit(dim: usize) -> Self {
        Self { lower: vec![0.0; dim], upper: vec![1.0; dim] }
    }

    /// `[-0.5, 0.5)^dim`.
    pub fn centered(dim: usize) -> Self {
        Self { lower: vec![-0.5; dim], upper: vec![0.5; dim] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() || self.lower.len() > crate::kernels::MAX_DIM {
            return Err(Error::config("domain", "dimension must be between 1 and 4"));
        }
        if self.lower.len() != self.upper.len() {
            return Err(Error::config("domain", "lower and upper corners differ in dimension"));
        }
        if self.lower.iter().zip(&self.upper).any(|(a, b)| !(b > a) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::config("domain", "every side must have positive finite length"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn periods(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(a, b)| b - a).collect()
    }

    pub fn volume(&self) -> f64 {
        self.periods().iter().product()
    }

    /// I.i.d. uniform points from a seeded ChaCha20 stream.
    pub fn sample_uniform(&self, n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| self.lower.iter().zip(&self.upper).map(|(a, b)| rng.random_range(*a..*b)).collect())
            .collect()
    }

    /// Uniform grid with `n` cells per dimension, nodes at cell corners,
    /// last coordinate varying fastest.
    pub fn uniform_grid(&self, n: usize) -> Vec<Point> {
        self.uniform_grid_shape(&vec![n; self.dim()])
    }

    pub fn uniform_grid_shape(&self, shape: &[usize]) -> Vec<Point> {
        let total: usize = shape.iter().product();
        (0..total)
            .map(|mut flat| {
                let mut p = vec![0.0; shape.len()];
                for d in (0..shape.len()).rev() {
                    let i = flat % shape[d];
                    flat /= shape[d];
                    p[d] = self.lower[d] + (self.upper[d] - self.lower[d]) * i as f64 / shape[d] as f64;
                }
                p
            })
            .collect()
    }
}

/// A model constant that is either given or recovered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scalar {
    /// The true value when known, the initial guess otherwise.
    pub value: f64,
    pub known: bool,
}

impl Scalar {
    pub fn known(value: f64) -> Self {
        Self { value, known: true }
    }

    pub fn unknown(initial: f64) -> Self {
        Self { value: initial, known: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Coupling {
    /// `Γ(m) = sign(m)|m|^α`.
    PowerLocal { alpha: Scalar },
    /// `Γ(m)(x) = ∫ exp(-|x - y|²/(2σ²)) m(y) dy` by quadrature.
    NonlocalGaussian {
        sigma: Scalar,
        rule: QuadratureRule,
        /// Measure `|x - y|` on the torus instead of in the box.
        periodic: bool,
    },
}

impl Coupling {
    pub fn parameter(&self) -> Scalar {
        match self {
            Coupling::PowerLocal { alpha } => *alpha,
            Coupling::NonlocalGaussian { sigma, .. } => *sigma,
        }
    }
}

/// Noisy linear observations `data ≈ L(field) + noise · ε`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Observations {
    pub functionals: Vec<LinearFunctional>,
    pub data: Vec<f64>,
    /// Noise standard deviation per row.
    pub noise: Vec<f64>,
}

impl Observations {
    pub fn new(functionals: Vec<LinearFunctional>, data: Vec<f64>, noise: f64) -> Self {
        let noise = vec![noise; data.len()];
        Self { functionals, data, noise }
    }

    pub fn len(&self) -> usize {
        self.functionals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functionals.is_empty()
    }

    pub(crate) fn validate(&self, field: &str, dim: usize) -> Result<()> {
        if self.data.len() != self.functionals.len() || self.noise.len() != self.functionals.len() {
            return Err(Error::config(field, "data and noise lengths must match the number of functionals"));
        }
        if self.noise.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
            return Err(Error::config(field, "noise levels must be positive"));
        }
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(field, "data must be finite"));
        }
        for f in &self.functionals {
            if f.dim()? != dim {
                return Err(Error::config(field, "observation functional has the wrong dimension"));
            }
        }
        Ok(())
    }
}

/// The potential is either recovered (with optional observations) or given
/// by its values at the collocation points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PotentialSpec {
    Unknown(Observations),
    Known(Vec<f64>),
}

/// Per-dimension lengthscales of the three field kernels; a single entry is
/// broadcast to every dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub u: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl KernelSpec {
    pub fn uniform(lengthscale: f64) -> Self {
        Self { u: vec![lengthscale], m: vec![lengthscale], v: vec![lengthscale] }
    }

    pub fn new(u: f64, m: f64, v: f64) -> Self {
        Self { u: vec![u], m: vec![m], v: vec![v] }
    }
}

pub(crate) fn build_kernel(lengthscales: &[f64], domain: &TorusDomain, field: &str) -> Result<PeriodicKernel> {
    let ls = match lengthscales.len() {
        1 => vec![lengthscales[0]; domain.dim()],
        n if n == domain.dim() => lengthscales.to_vec(),
        _ => return Err(Error::config(field, "lengthscale count must be 1 or the domain dimension")),
    };
    PeriodicKernel::new(ls, domain.periods()).map_err(|e| Error::config(field, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    /// Weight of the mean-zero and unit-mass penalties.
    pub beta: f64,
    /// Weight of the squared PDE residuals.
    pub alpha_pen: f64,
}

impl Default for Penalties {
    fn default() -> Self {
        Self { beta: 1e4, alpha_pen: 1e6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryProblemSpec {
    pub domain: TorusDomain,
    pub collocation: Vec<Point>,
    pub coupling: Coupling,
    pub viscosity: Scalar,
    pub m_observations: Observations,
    pub potential: PotentialSpec,
    pub kernels: KernelSpec,
    pub penalties: Penalties,
    pub hbar_prior_weight: f64,
    /// Quadratic prior weight on each unknown log-scalar.
    pub scalar_prior_weight: f64,
    pub eta: f64,
}

impl StationaryProblemSpec {
    /// A spec with default penalties and nugget, no observations and unknown `V`.
    pub fn new(domain: TorusDomain, collocation: Vec<Point>, coupling: Coupling, viscosity: Scalar) -> Self {
        Self {
            domain,
            collocation,
            coupling,
            viscosity,
            m_observations: Observations::default(),
            potential: PotentialSpec::Unknown(Observations::default()),
            kernels: KernelSpec::uniform(1.0),
            penalties: Penalties::default(),
            hbar_prior_weight: 1.0,
            scalar_prior_weight: 0.0,
            eta: DEFAULT_NUGGET,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        let dim = self.domain.dim();
        if self.collocation.is_empty() {
            return Err(Error::config("collocation", "at least one collocation point is required"));
        }
        if self.collocation.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::config("collocation", "points must be finite and match the domain dimension"));
        }
        let positive = |s: Scalar, field: &str| {
            if s.value > 0.0 && s.value.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, "must be positive"))
            }
        };
        if self.viscosity.known {
            if !(self.viscosity.value >= 0.0) || !self.viscosity.value.is_finite() {
                return Err(Error::config("viscosity", "must be nonnegative"));
            }
        } else {
            positive(self.viscosity, "viscosity")?;
        }
        match &self.coupling {
            Coupling::PowerLocal { alpha } => positive(*alpha, "coupling.alpha")?,
            Coupling::NonlocalGaussian { sigma, rule, .. } => {
                positive(*sigma, "coupling.sigma")?;
                if rule.is_empty() || rule.nodes.iter().any(|p| p.len() != dim) {
                    return Err(Error::config("coupling.rule", "quadrature rule must be nonempty and match the domain"));
                }
            }
        }
        self.m_observations.validate("m_observations", dim)?;
        match &self.potential {
            PotentialSpec::Unknown(obs) => obs.validate("v_observations", dim)?,
            PotentialSpec::Known(v) => {
                if v.len() != self.collocation.len() || v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::config("potential", "known values must be finite, one per collocation point"));
                }
            }
        }
        if !(self.penalties.alpha_pen > 0.0) {
            return Err(Error::config("penalties.alpha_pen", "must be positive"));
        }
        if !(self.penalties.beta >= 0.0) {
            return Err(Error::config("penalties.beta", "must be nonnegative"));
        }
        if !(self.hbar_prior_weight >= 0.0) || !(self.scalar_prior_weight >= 0.0) {
            return Err(Error::config("prior weights", "must be nonnegative"));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::config("eta", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Feature lists of the three fields and where the extra functionals landed.
///
/// `phi_u` is block-major: values at all collocation points, then `∂_1`, …,
/// `∂_d`, then the Laplacian. `phi_m` has the same stencil followed by the
/// observation functionals and, for non-local coupling, the quadrature nodes,
/// each deduplicated against earlier entries. `phi_v` holds values at the
/// collocation points followed by the observation functionals.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSets {
    pub phi_u: Vec<LinearFunctional>,
    pub phi_m: Vec<LinearFunctional>,
    pub phi_v: Vec<LinearFunctional>,
    pub m_obs_index: Vec<usize>,
    pub v_obs_index: Vec<usize>,
    pub quad_index: Vec<usize>,
}

/// Index arithmetic for the block-major derivative stencil.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub m: usize,
    pub dim: usize,
}

impl Stencil {
    pub fn value(&self, i: usize) -> usize {
        i
    }
    pub fn partial(&self, d: usize, i: usize) -> usize {
        (1 + d) * self.m + i
    }
    pub fn laplacian(&self, i: usize) -> usize {
        (1 + self.dim) * self.m + i
    }
}

pub(crate) fn stencil_features(points: &[Point], dim: usize) -> Vec<LinearFunctional> {
    let mut out: Vec<LinearFunctional> = points.iter().map(|p| LinearFunctional::PointEval(p.clone())).collect();
    for d in 0..dim {
        out.extend(points.iter().map(|p| LinearFunctional::point_deriv(p.clone(), DerivOp::Partial(d))));
    }
    out.extend(points.iter().map(|p| LinearFunctional::point_deriv(p.clone(), DerivOp::Laplacian)));
    out
}

/// Appends `extra` to `list` unless an identical functional is already
/// present; returns the index of each extra in `list`.
pub(crate) fn append_dedup(list: &mut Vec<LinearFunctional>, extra: &[LinearFunctional]) -> Vec<usize> {
    let key = |f: &LinearFunctional| match f {
        LinearFunctional::PointEval(p) => Some(p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>()),
        _ => None,
    };
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    for (i, f) in list.iter().enumerate() {
        if let Some(k) = key(f) {
            seen.entry(k).or_insert(i);
        }
    }
    extra
        .iter()
        .map(|f| {
            if let Some(k) = key(f) {
                *seen.entry(k).or_insert_with(|| {
                    list.push(f.clone());
                    list.len() - 1
                })
            } else if let Some(i) = list.iter().position(|g| g == f) {
                i
            } else {
                list.push(f.clone());
                list.len() - 1
            }
        })
        .collect()
}

pub fn build_feature_sets(spec: &StationaryProblemSpec) -> FeatureSets {
    let dim = spec.domain.dim();
    let phi_u = stencil_features(&spec.collocation, dim);
    let mut phi_m = phi_u.clone();
    let m_obs_index = append_dedup(&mut phi_m, &spec.m_observations.functionals);
    let quad_index = match &spec.coupling {
        Coupling::NonlocalGaussian { rule, .. } => {
            let nodes: Vec<_> = rule.nodes.iter().map(|p| LinearFunctional::PointEval(p.clone())).collect();
            append_dedup(&mut phi_m, &nodes)
        }
        Coupling::PowerLocal { .. } => Vec::new(),
    };
    let (phi_v, v_obs_index) = match &spec.potential {
        PotentialSpec::Unknown(obs) => {
            let mut phi_v: Vec<_> = spec.collocation.iter().map(|p| LinearFunctional::PointEval(p.clone())).collect();
            let idx = append_dedup(&mut phi_v, &obs.functionals);
            (phi_v, idx)
        }
        PotentialSpec::Known(_) => (Vec::new(), Vec::new()),
    };
    FeatureSets { phi_u, phi_m, phi_v, m_obs_index, v_obs_index, quad_index }
}

/// Offsets of the latent blocks inside the flat optimization vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub z: Range<usize>,
    pub rho: Range<usize>,
    pub v: Range<usize>,
    pub hbar: usize,
    pub log_nu: Option<usize>,
    pub log_coupling: Option<usize>,
    pub len: usize,
}

impl Layout {
    fn new(features: &FeatureSets, nu_unknown: bool, coupling_unknown: bool) -> Self {
        let z = 0..features.phi_u.len();
        let rho = z.end..z.end + features.phi_m.len();
        let v = rho.end..rho.end + features.phi_v.len();
        let hbar = v.end;
        let mut next = hbar + 1;
        let mut take = |flag: bool| {
            flag.then(|| {
                next += 1;
                next - 1
            })
        };
        let log_nu = take(nu_unknown);
        let log_coupling = take(coupling_unknown);
        Self { z, rho, v, hbar, log_nu, log_coupling, len: next }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub rho: Vec<f64>,
    pub v: Vec<f64>,
    pub hbar: f64,
    pub log_nu: Option<f64>,
    /// `log α` or `log σ`.
    pub log_coupling: Option<f64>,
}

impl LatentState {
    /// Flattens the state in the order z, ρ, v, H̄, log ν, log of the coupling parameter.
    pub fn to_vec(&self, layout: &Layout) -> Result<Vec<f64>> {
        if self.z.len() != layout.z.len()
            || self.rho.len() != layout.rho.len()
            || self.v.len() != layout.v.len()
            || self.log_nu.is_some() != layout.log_nu.is_some()
            || self.log_coupling.is_some() != layout.log_coupling.is_some()
        {
            return Err(Error::invalid("latent state does not match the problem layout"));
        }
        let mut x = Vec::with_capacity(layout.len);
        x.extend_from_slice(&self.z);
        x.extend_from_slice(&self.rho);
        x.extend_from_slice(&self.v);
        x.push(self.hbar);
        x.extend(self.log_nu);
        x.extend(self.log_coupling);
        Ok(x)
    }

    pub(crate) fn from_vec(x: &[f64], layout: &Layout) -> Self {
        Self {
            z: x[layout.z.clone()].to_vec(),
            rho: x[layout.rho.clone()].to_vec(),
            v: x[layout.v.clone()].to_vec(),
            hbar: x[layout.hbar],
            log_nu: layout.log_nu.map(|i| x[i]),
            log_coupling: layout.log_coupling.map(|i| x[i]),
        }
    }
}

/// Constant field used to initialize value-type latents.
pub(crate) struct Constant(pub f64);

impl Field for Constant {
    fn value(&self, _: &[f64]) -> f64 {
        self.0
    }
    fn derivative(&self, _: &[f64], op: DerivOp) -> f64 {
        if op == DerivOp::Identity {
            self.0
        } else {
            0.0
        }
    }
}

/// Signed power `sign(ρ)|ρ|^α` with its derivatives in `ρ` and `log α`.
pub(crate) fn signed_power(rho: f64, alpha: f64) -> (f64, f64, f64) {
    let a = rho.abs();
    if a == 0.0 {
        let d = if alpha > 1.0 { 0.0 } else if alpha == 1.0 { 1.0 } else { 1e12 };
        return (0.0, d, 0.0);
    }
    let p = a.powf(alpha);
    (rho.signum() * p, alpha * a.powf(alpha - 1.0), alpha * a.ln() * rho.signum() * p)
}

/// Coupling values at the collocation points with their sparse sensitivities.
pub(crate) enum CouplingEval {
    Local { alpha: f64 },
    Nonlocal { sigma: f64, weights: Arc<Vec<Vec<(usize, f64, f64)>>> },
}

impl CouplingEval {
    /// `(Γ_i, [(ρ-feature, ∂Γ/∂ρ)], ∂Γ/∂log(param))` at point `i` given the
    /// m-latents and the value index of `i`.
    pub fn at(&self, rho: &[f64], i: usize, value_index: usize) -> (f64, Vec<(usize, f64)>, f64) {
        match self {
            CouplingEval::Local { alpha } => {
                let (g, dg, dlog) = signed_power(rho[value_index], *alpha);
                (g, vec![(value_index, dg)], dlog)
            }
            CouplingEval::Nonlocal { sigma, weights } => {
                let s2 = sigma * sigma;
                let mut g = 0.0;
                let mut dlog = 0.0;
                let mut d = Vec::with_capacity(weights[i].len());
                for &(q, w, d2) in &weights[i] {
                    let c = w * (-d2 / (2.0 * s2)).exp();
                    g += c * rho[q];
                    dlog += c * rho[q] * d2 / s2;
                    d.push((q, c));
                }
                (g, d, dlog)
            }
        }
    }
}

/// Quadrature weights and squared distances from each collocation point to
/// each node: `weights[i] = [(ρ-feature of node, w_q, |x_i - y_q|²)]`.
pub(crate) fn nonlocal_table(
    points: &[Point],
    rule: &QuadratureRule,
    quad_index: &[usize],
    periods: Option<&[f64]>,
) -> Vec<Vec<(usize, f64, f64)>> {
    points
        .iter()
        .map(|x| {
            rule.nodes
                .iter()
                .zip(&rule.weights)
                .zip(quad_index)
                .map(|((y, w), q)| (*q, *w, squared_distance(x, y, periods)))
                .collect()
        })
        .collect()
}

/// A spec bound to its feature sets, layout and factorized Gram systems.
#[derive(Debug, Clone)]
pub struct StationaryProblem {
    spec: StationaryProblemSpec,
    features: FeatureSets,
    layout: Layout,
    stencil: Stencil,
    gram_u: Arc<GramSystem>,
    gram_m: Arc<GramSystem>,
    gram_v: Option<Arc<GramSystem>>,
    nonlocal: Option<Arc<Vec<Vec<(usize, f64, f64)>>>>,
}

impl std::fmt::Debug for CouplingEval {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CouplingEval::Local { alpha } => write!(f, "Local({alpha})"),
            CouplingEval::Nonlocal { sigma, .. } => write!(f, "Nonlocal({sigma})"),
        }
    }
}

impl StationaryProblem {
    pub fn new(spec: StationaryProblemSpec) -> Result<Self> {
        spec.validate()?;
        let features = build_feature_sets(&spec);
        let layout = Layout::new(&features, !spec.viscosity.known, !spec.coupling.parameter().known);
        let stencil = Stencil { m: spec.collocation.len(), dim: spec.domain.dim() };
        let ku = build_kernel(&spec.kernels.u, &spec.domain, "kernels.u")?;
        let km = build_kernel(&spec.kernels.m, &spec.domain, "kernels.m")?;
        let kv = build_kernel(&spec.kernels.v, &spec.domain, "kernels.v")?;
        let eta = spec.eta;
        let ((gram_u, gram_m), gram_v) = rayon::join(
            || rayon::join(|| GramSystem::new(ku, features.phi_u.clone(), eta), || GramSystem::new(km, features.phi_m.clone(), eta)),
            || (!features.phi_v.is_empty()).then(|| GramSystem::new(kv, features.phi_v.clone(), eta)).transpose(),
        );
        let nonlocal = match &spec.coupling {
            Coupling::NonlocalGaussian { rule, periodic, .. } => {
                let periods = spec.domain.periods();
                Some(Arc::new(nonlocal_table(
                    &spec.collocation,
                    rule,
                    &features.quad_index,
                    periodic.then_some(periods.as_slice()),
                )))
            }
            Coupling::PowerLocal { .. } => None,
        };
        Ok(Self {
            spec,
            features,
            layout,
            stencil,
            gram_u: Arc::new(gram_u?),
            gram_m: Arc::new(gram_m?),
            gram_v: gram_v?.map(Arc::new),
            nonlocal,
        })
    }

    pub fn spec(&self) -> &StationaryProblemSpec {
        &self.spec
    }

    pub fn features(&self) -> &FeatureSets {
        &self.features
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn gram_u(&self) -> &GramSystem {
        &self.gram_u
    }

    pub fn gram_m(&self) -> &GramSystem {
        &self.gram_m
    }

    pub fn gram_v(&self) -> Option<&GramSystem> {
        self.gram_v.as_deref()
    }

    /// Number of collocation points.
    pub fn num_points(&self) -> usize {
        self.stencil.m
    }

    /// Default starting point: `m ≡ 1` with observed values replaced by the
    /// data, everything else zero, unknown scalars at their spec values.
    pub fn initial_state(&self) -> LatentState {
        let one = Constant(1.0);
        let mut rho: Vec<f64> = self.features.phi_m.iter().map(|f| f.apply(&one)).collect();
        for (k, &j) in self.features.m_obs_index.iter().enumerate() {
            if matches!(self.spec.m_observations.functionals[k], LinearFunctional::PointEval(_)) {
                rho[j] = self.spec.m_observations.data[k];
            }
        }
        LatentState {
            z: vec![0.0; self.layout.z.len()],
            rho,
            v: vec![0.0; self.layout.v.len()],
            hbar: 0.0,
            log_nu: (!self.spec.viscosity.known).then(|| self.spec.viscosity.value.ln()),
            log_coupling: (!self.spec.coupling.parameter().known).then(|| self.spec.coupling.parameter().value.ln()),
        }
    }

    fn nu(&self, x: &[f64]) -> f64 {
        self.layout.log_nu.map_or(self.spec.viscosity.value, |i| x[i].exp())
    }

    fn coupling_eval(&self, x: &[f64]) -> CouplingEval {
        let p = self.layout.log_coupling.map_or(self.spec.coupling.parameter().value, |i| x[i].exp());
        match &self.nonlocal {
            None => CouplingEval::Local { alpha: p },
            Some(w) => CouplingEval::Nonlocal { sigma: p, weights: w.clone() },
        }
    }

    /// Unweighted HJB rows then FP rows, optionally with sparse Jacobians
    /// over the flat latent vector.
    fn pde_rows(&self, x: &[f64], mut jac: Option<&mut Vec<SparseRow>>) -> Vec<f64> {
        let st = self.stencil;
        let (z, rho) = (&x[self.layout.z.clone()], &x[self.layout.rho.clone()]);
        let (oz, or) = (self.layout.z.start, self.layout.rho.start);
        let nu = self.nu(x);
        let coupling = self.coupling_eval(x);
        let mut hjb = Vec::with_capacity(st.m);
        let mut fp = Vec::with_capacity(st.m);
        let mut jh = Vec::new();
        let mut jf = Vec::new();
        for i in 0..st.m {
            let lap_u = z[st.laplacian(i)];
            let lap_m = rho[st.laplacian(i)];
            let m_i = rho[st.value(i)];
            let mut grad_sq = 0.0;
            let mut transport = 0.0;
            for d in 0..st.dim {
                grad_sq += z[st.partial(d, i)].powi(2);
                transport += z[st.partial(d, i)] * rho[st.partial(d, i)];
            }
            let (v_i, v_col) = match &self.spec.potential {
                PotentialSpec::Known(v) => (v[i], None),
                PotentialSpec::Unknown(_) => (x[self.layout.v.start + i], Some(self.layout.v.start + i)),
            };
            let (gamma, dgamma, dgamma_log) = coupling.at(rho, i, st.value(i));
            let hbar = x[self.layout.hbar];
            hjb.push(-nu * lap_u + 0.5 * grad_sq + v_i - gamma - hbar);
            fp.push(-nu * lap_m - (lap_u * m_i + transport));

            if jac.is_some() {
                let mut rh: SparseRow = Vec::with_capacity(st.dim + 4 + dgamma.len());
                rh.push((oz + st.laplacian(i), -nu));
                for d in 0..st.dim {
                    rh.push((oz + st.partial(d, i), z[st.partial(d, i)]));
                }
                if let Some(c) = v_col {
                    rh.push((c, 1.0));
                }
                rh.extend(dgamma.iter().map(|(q, g)| (or + q, -g)));
                rh.push((self.layout.hbar, -1.0));
                if let Some(c) = self.layout.log_nu {
                    rh.push((c, -nu * lap_u));
                }
                if let Some(c) = self.layout.log_coupling {
                    rh.push((c, -dgamma_log));
                }
                jh.push(rh);

                let mut rf: SparseRow = Vec::with_capacity(2 * st.dim + 4);
                rf.push((or + st.laplacian(i), -nu));
                rf.push((oz + st.laplacian(i), -m_i));
                rf.push((or + st.value(i), -lap_u));
                for d in 0..st.dim {
                    rf.push((oz + st.partial(d, i), -rho[st.partial(d, i)]));
                    rf.push((or + st.partial(d, i), -z[st.partial(d, i)]));
                }
                if let Some(c) = self.layout.log_nu {
                    rf.push((c, -nu * lap_m));
                }
                jf.push(rf);
            }
        }
        if let Some(j) = jac.as_deref_mut() {
            j.extend(jh);
            j.extend(jf);
        }
        hjb.extend(fp);
        hjb
    }

    /// Weighted residual vector: PDE rows, m observations, V observations,
    /// then the two mean penalties.
    fn stacked(&self, x: &[f64], jac: Option<&mut Vec<SparseRow>>) -> Vec<f64> {
        let want_jac = jac.is_some();
        let mut rows = Vec::new();
        let mut r = self.pde_rows(x, want_jac.then_some(&mut rows));
        let s = self.spec.penalties.alpha_pen.sqrt();
        r.iter_mut().for_each(|v| *v *= s);
        for row in rows.iter_mut() {
            row.iter_mut().for_each(|(_, v)| *v *= s);
        }
        let obs = &self.spec.m_observations;
        for (k, &j) in self.features.m_obs_index.iter().enumerate() {
            let g = obs.noise[k];
            r.push((x[self.layout.rho.start + j] - obs.data[k]) / g);
            rows.push(vec![(self.layout.rho.start + j, 1.0 / g)]);
        }
        if let PotentialSpec::Unknown(vobs) = &self.spec.potential {
            for (k, &j) in self.features.v_obs_index.iter().enumerate() {
                let g = vobs.noise[k];
                r.push((x[self.layout.v.start + j] - vobs.data[k]) / g);
                rows.push(vec![(self.layout.v.start + j, 1.0 / g)]);
            }
        }
        let m = self.stencil.m as f64;
        let sb = self.spec.penalties.beta.sqrt();
        let u_mean: f64 = (0..self.stencil.m).map(|i| x[self.layout.z.start + i]).sum::<f64>() / m;
        let m_mean: f64 = (0..self.stencil.m).map(|i| x[self.layout.rho.start + i]).sum::<f64>() / m;
        r.push(sb * u_mean);
        r.push(sb * (m_mean - 1.0));
        if want_jac {
            rows.push((0..self.stencil.m).map(|i| (self.layout.z.start + i, sb / m)).collect());
            rows.push((0..self.stencil.m).map(|i| (self.layout.rho.start + i, sb / m)).collect());
            if let Some(j) = jac {
                *j = rows;
            }
        }
        r
    }

    /// HJB rows at every collocation point followed by FP rows.
    pub fn pde_residuals(&self, state: &LatentState) -> Result<Vec<f64>> {
        Ok(self.pde_rows(&state.to_vec(&self.layout)?, None))
    }

    pub fn objective(&self, state: &LatentState) -> Result<f64> {
        Ok(solver::objective(self, &state.to_vec(&self.layout)?))
    }

    pub fn gradient(&self, state: &LatentState) -> Result<Vec<f64>> {
        Ok(solver::gradient(self, &state.to_vec(&self.layout)?))
    }

    pub fn gauss_newton(&self, init: &LatentState, config: &GaussNewtonConfig) -> Result<(LatentState, Diagnostics)> {
        let (x, diag) = solver::gauss_newton(self, &init.to_vec(&self.layout)?, config)?;
        Ok((LatentState::from_vec(&x, &self.layout), diag))
    }

    pub fn reconstruct(&self, state: &LatentState) -> Result<RecoveredFields> {
        state.to_vec(&self.layout)?;
        let u = RecoveredField::new(self.gram_u.clone(), &state.z)?;
        let m = RecoveredField::new(self.gram_m.clone(), &state.rho)?;
        let v = match &self.gram_v {
            Some(g) => Some(RecoveredField::new(g.clone(), &state.v)?),
            None => None,
        };
        Ok(RecoveredFields {
            u,
            m,
            v,
            hbar: state.hbar,
            nu: state.log_nu.map_or(self.spec.viscosity.value, f64::exp),
            coupling: state.log_coupling.map_or(self.spec.coupling.parameter().value, f64::exp),
        })
    }
}

impl ResidualModel for StationaryProblem {
    fn dim(&self) -> usize {
        self.layout.len
    }

    fn prior_blocks(&self) -> Vec<PriorBlock<'_>> {
        let mut b = vec![
            PriorBlock { offset: self.layout.z.start, gram: &self.gram_u },
            PriorBlock { offset: self.layout.rho.start, gram: &self.gram_m },
        ];
        if let Some(g) = &self.gram_v {
            b.push(PriorBlock { offset: self.layout.v.start, gram: g });
        }
        b
    }

    fn free_priors(&self) -> Vec<(usize, f64)> {
        let mut f = vec![(self.layout.hbar, self.spec.hbar_prior_weight)];
        f.extend(self.layout.log_nu.map(|i| (i, self.spec.scalar_prior_weight)));
        f.extend(self.layout.log_coupling.map(|i| (i, self.spec.scalar_prior_weight)));
        f
    }

    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        self.stacked(x, None)
    }

    fn jacobian(&self, x: &[f64]) -> Vec<SparseRow> {
        let mut j = Vec::new();
        self.stacked(x, Some(&mut j));
        j
    }
}

/// A field given by representer coefficients over a Gram system's features.
#[derive(Debug, Clone)]
pub struct RecoveredField {
    gram: Arc<GramSystem>,
    coefficients: Vec<f64>,
}

impl RecoveredField {
    pub fn new(gram: Arc<GramSystem>, latents: &[f64]) -> Result<Self> {
        let coefficients = gram.solve(latents)?;
        Ok(Self { gram, coefficients })
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn gram(&self) -> &GramSystem {
        &self.gram
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len()).map(|d| self.derivative(x, DerivOp::Partial(d))).collect()
    }

    pub fn laplacian(&self, x: &[f64]) -> f64 {
        self.derivative(x, DerivOp::Laplacian)
    }
}

impl Field for RecoveredField {
    fn value(&self, x: &[f64]) -> f64 {
        self.derivative(x, DerivOp::Identity)
    }

    /// Panics if `x` or `op` does not fit the kernel dimension.
    fn derivative(&self, x: &[f64], op: DerivOp) -> f64 {
        self.gram.representer_eval(&self.coefficients, x, op).expect("evaluation point matches the field dimension")
    }
}

/// Evaluates a field at many points in parallel.
pub fn eval_points<F: Field + Sync + ?Sized>(field: &F, points: &[Point]) -> Vec<f64> {
    use rayon::prelude::*;
    points.par_iter().map(|p| field.value(p)).collect()
}

#[derive(Debug, Clone)]
pub struct RecoveredFields {
    pub u: RecoveredField,
    pub m: RecoveredField,
    /// `None` when the potential was given.
    pub v: Option<RecoveredField>,
    pub hbar: f64,
    pub nu: f64,
    /// `α` or `σ`.
    pub coupling: f64,
}

impl RecoveredFields {
    /// The optimal feedback `-D_p H(x, Du) = -Du`.
    pub fn strategy(&self, x: &[f64]) -> Vec<f64> {
        self.u.gradient(x).into_iter().map(|g| -g).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn small_spec(coupling: Coupling) -> StationaryProblemSpec {
        let domain = TorusDomain::centered(2);
        let pts = domain.sample_uniform(12, 3);
        let mut spec = StationaryProblemSpec::new(domain, pts, coupling, Scalar::known(1.0));
        spec.kernels = KernelSpec::uniform(0.8);
        spec
    }

    fn local(alpha: f64) -> Coupling {
        Coupling::PowerLocal { alpha: Scalar::known(alpha) }
    }

    #[test]
    fn feature_counts_and_dedup() {
        let domain = TorusDomain::centered(2);
        let pts = domain.sample_uniform(400, 1);
        let mut spec = StationaryProblemSpec::new(domain, pts.clone(), local(2.0), Scalar::known(0.1));
        let obs: Vec<_> = pts[..40].iter().map(|p| LinearFunctional::PointEval(p.clone())).collect();
        spec.m_observations = Observations::new(obs, vec![1.0; 40], 1e-3);
        let f = build_feature_sets(&spec);
        assert_eq!((f.phi_u.len(), f.phi_m.len(), f.phi_v.len()), (1600, 1600, 400));
        assert_eq!(f.m_obs_index, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn one_dim_stencil_is_value_derivative_laplacian() {
        let domain = TorusDomain::unit(1);
        let spec = StationaryProblemSpec::new(domain, vec![vec![0.1], vec![0.6]], local(2.0), Scalar::known(1.0));
        let f = build_feature_sets(&spec);
        assert_eq!(f.phi_u.len(), 6);
        assert_eq!(f.phi_u[2], LinearFunctional::point_deriv(vec![0.1], DerivOp::Partial(0)));
        assert_eq!(f.phi_u[5], LinearFunctional::point_deriv(vec![0.6], DerivOp::Laplacian));
    }

    #[test]
    fn nonlocal_nodes_extend_phi_m() {
        let domain = TorusDomain::unit(2);
        let rule = crate::functionals::gauss_legendre_rule(30, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let mut pts = rule.nodes.clone();
        let extra = domain.sample_uniform(50, 9);
        pts.extend(extra.iter().cloned());
        let mut spec = StationaryProblemSpec::new(
            domain,
            pts,
            Coupling::NonlocalGaussian { sigma: Scalar::unknown(1.0), rule, periodic: false },
            Scalar::known(1.0),
        );
        let obs: Vec<_> = extra.iter().map(|p| LinearFunctional::PointEval(p.clone())).collect();
        spec.m_observations = Observations::new(obs, vec![1.0; 50], 1e-3);
        let f = build_feature_sets(&spec);
        // nodes and observation points are already collocation values
        assert_eq!(f.phi_m.len(), 950 * 4);
        assert_eq!(f.quad_index, (0..900).collect::<Vec<_>>());
        assert_eq!(f.m_obs_index, (900..950).collect::<Vec<_>>());
    }

    #[test]
    fn zero_state_has_zero_residuals() {
        let p = StationaryProblem::new(small_spec(local(2.0))).unwrap();
        let mut s = p.initial_state();
        s.rho.iter_mut().for_each(|v| *v = 0.0);
        assert!(p.pde_residuals(&s).unwrap().iter().all(|r| *r == 0.0));
    }

    #[test]
    fn zero_state_objective_is_mass_deficit() {
        let p = StationaryProblem::new(small_spec(local(2.0))).unwrap();
        let mut s = p.initial_state();
        s.rho.iter_mut().for_each(|v| *v = 0.0);
        assert!((p.objective(&s).unwrap() - 1e4).abs() < 1e-9);
    }

    #[test]
    fn hbar_shift_moves_only_hjb_rows() {
        let p = StationaryProblem::new(small_spec(local(2.0))).unwrap();
        let mut s = p.initial_state();
        s.z.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        let r0 = p.pde_residuals(&s).unwrap();
        s.hbar += 0.75;
        let r1 = p.pde_residuals(&s).unwrap();
        let m = p.num_points();
        for i in 0..m {
            assert!((r1[i] - (r0[i] - 0.75)).abs() < 1e-14);
            assert_eq!(r1[m + i], r0[m + i]);
        }
    }

    #[test]
    fn signed_power_derivatives() {
        let (g, dg, dl) = signed_power(1.3, 2.5);
        let h = 1e-6;
        assert!((g - 1.3f64.powf(2.5)).abs() < 1e-14);
        assert!((dg - (signed_power(1.3 + h, 2.5).0 - signed_power(1.3 - h, 2.5).0) / (2.0 * h)).abs() < 1e-6);
        let fd = (signed_power(1.3, 2.5 * h.exp()).0 - signed_power(1.3, 2.5 * (-h).exp()).0) / (2.0 * h);
        assert!((dl - fd).abs() < 1e-6);
        assert_eq!(signed_power(-2.0, 2.0).0, -4.0);
    }

    /// `1 + 0.1 cos(2π x_0)`.
    struct Wave;
    impl Field for Wave {
        fn value(&self, x: &[f64]) -> f64 {
            1.0 + 0.1 * (2.0 * PI * x[0]).cos()
        }
        fn derivative(&self, x: &[f64], op: DerivOp) -> f64 {
            let w = 2.0 * PI;
            match op {
                DerivOp::Identity => self.value(x),
                DerivOp::Partial(0) => -0.1 * w * (w * x[0]).sin(),
                DerivOp::SecondPartial(0, 0) | DerivOp::Laplacian => -0.1 * w * w * (w * x[0]).cos(),
                _ => 0.0,
            }
        }
    }

    #[test]
    fn reconstruct_interpolates_latents() {
        let p = StationaryProblem::new(small_spec(local(2.0))).unwrap();
        let mut s = p.initial_state();
        s.rho = p.features().phi_m.iter().map(|f| f.apply(&Wave)).collect();
        s.hbar = -0.4;
        let f = p.reconstruct(&s).unwrap();
        for (i, x) in p.spec().collocation.iter().enumerate() {
            assert!((f.m.value(x) - s.rho[i]).abs() < 1e-6);
        }
        assert_eq!(f.hbar, -0.4);
    }

    #[test]
    fn grid_shape_and_order() {
        let d = TorusDomain::unit(2);
        let g = d.uniform_grid_shape(&[2, 4]);
        assert_eq!(g.len(), 8);
        assert_eq!(g[1], vec![0.0, 0.25]);
        assert_eq!(g[4], vec![0.5, 0.0]);
    }

    #[test]
    fn sampling_is_seeded() {
        let d = TorusDomain::centered(2);
        assert_eq!(d.sample_uniform(5, 7), d.sample_uniform(5, 7));
        assert_ne!(d.sample_uniform(5, 7), d.sample_uniform(5, 8));
        assert!(d.sample_uniform(100, 1).iter().flatten().all(|v| (-0.5..0.5).contains(v)));
    }
}
