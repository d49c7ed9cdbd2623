//! Time-dependent MFG inverse problem on a flat torus, discretized in time
//! with the mixed scheme that pairs `u_k` with `m_{k+1}`:
//!
//! ```text
//! -(u_{k+1} - u_k)/Δt - ν Δu_k + |Du_k|²/2 - Γ(m_{k+1}) + V = 0
//!  (m_{k+1} - m_k)/Δt - ν Δm_{k+1} - div(m_{k+1} Du_k)    = 0
//!  u_{N_T} = φ*,  m_0 = μ*
//! ```
//!
//! Each of the `N_T + 1` slices carries its own u and m latents over one
//! shared set of collocation points. The terminal and initial conditions
//! are penalized rows scaled by `1/Δt`, like the time differences they
//! close, so that they bind as tightly as the scheme rows. There is no mass
//! penalty.

use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{Field, LinearFunctional};
use crate::gram::{GramSystem, DEFAULT_NUGGET};
use crate::kernels::Point;
use crate::solver::{self, Diagnostics, GaussNewtonConfig, PriorBlock, ResidualModel, SparseRow};
use crate::stationary::{
    append_dedup, build_kernel, nonlocal_table, stencil_features, Constant, Coupling, CouplingEval,
    KernelSpec, Observations, RecoveredField, Scalar, Stencil, TorusDomain,
};

/// Data of the shared m-observation functionals at one time slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceData {
    pub slice: usize,
    pub data: Vec<f64>,
    /// Noise standard deviation per row.
    pub noise: Vec<f64>,
}

/// Observations of `m` through functionals that are the same at every
/// observed slice.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimeObservations {
    pub functionals: Vec<LinearFunctional>,
    pub slices: Vec<SliceData>,
}

impl TimeObservations {
    /// Total number of observation rows.
    pub fn len(&self) -> usize {
        self.slices.iter().map(|s| s.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TimePotential {
    /// Values at the collocation points.
    Known(Vec<f64>),
    /// One time-independent unknown `V` shared by all slices.
    Shared(Observations),
    /// An unknown `V_k` per slice `k = 0..=N_T`, each with its own observations.
    PerSlice(Vec<Observations>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeDependentProblemSpec {
    pub domain: TorusDomain,
    pub collocation: Vec<Point>,
    /// Final time `T`.
    pub horizon: f64,
    /// Number of intervals `N_T`.
    pub steps: usize,
    pub coupling: Coupling,
    pub viscosity: Scalar,
    /// `φ*` at the collocation points.
    pub terminal: Vec<f64>,
    /// `μ*` at the collocation points.
    pub initial: Vec<f64>,
    pub m_observations: TimeObservations,
    pub potential: TimePotential,
    pub kernels: KernelSpec,
    /// Per-slice kernels (`N_T + 1` entries) overriding `kernels` for u and m.
    pub slice_kernels: Option<Vec<KernelSpec>>,
    pub alpha_pen: f64,
    pub scalar_prior_weight: f64,
    pub eta: f64,
}

impl TimeDependentProblemSpec {
    /// A spec with unknown shared `V`, no observations and default weights.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        domain: TorusDomain,
        collocation: Vec<Point>,
        horizon: f64,
        steps: usize,
        coupling: Coupling,
        viscosity: Scalar,
        terminal: &dyn Field,
        initial: &dyn Field,
    ) -> Self {
        let terminal = collocation.iter().map(|x| terminal.value(x)).collect();
        let initial = collocation.iter().map(|x| initial.value(x)).collect();
        Self {
            domain,
            collocation,
            horizon,
            steps,
            coupling,
            viscosity,
            terminal,
            initial,
            m_observations: TimeObservations::default(),
            potential: TimePotential::Shared(Observations::default()),
            kernels: KernelSpec::uniform(1.0),
            slice_kernels: None,
            alpha_pen: 1e6,
            scalar_prior_weight: 0.0,
            eta: DEFAULT_NUGGET,
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate()?;
        let dim = self.domain.dim();
        let n = self.collocation.len();
        if n == 0 {
            return Err(Error::config("collocation", "at least one collocation point is required"));
        }
        if self.collocation.iter().any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite())) {
            return Err(Error::config("collocation", "points must be finite and match the domain dimension"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::config("horizon", "must be positive"));
        }
        if self.terminal.len() != n || self.terminal.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("terminal", "need one finite value per collocation point"));
        }
        if self.initial.len() != n || self.initial.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("initial", "need one finite value per collocation point"));
        }
        if !(self.viscosity.value >= 0.0) || !self.viscosity.value.is_finite() {
            return Err(Error::config("viscosity", "must be nonnegative"));
        }
        if !self.viscosity.known && self.viscosity.value == 0.0 {
            return Err(Error::config("viscosity", "an unknown viscosity needs a positive initial value"));
        }
        let p = self.coupling.parameter();
        if !(p.value > 0.0) || !p.value.is_finite() {
            return Err(Error::config("coupling", "parameter must be positive"));
        }
        if let Coupling::NonlocalGaussian { rule, .. } = &self.coupling {
            if rule.is_empty() || rule.nodes.iter().any(|q| q.len() != dim) {
                return Err(Error::config("coupling.rule", "quadrature rule must be nonempty and match the domain"));
            }
        }
        let obs = &self.m_observations;
        for f in &obs.functionals {
            if f.dim()? != dim {
                return Err(Error::config("m_observations", "observation functional has the wrong dimension"));
            }
        }
        let mut seen = vec![false; self.steps + 1];
        for s in &obs.slices {
            if s.slice > self.steps {
                return Err(Error::config("m_observations", format!("slice {} is outside 0..={}", s.slice, self.steps)));
            }
            if std::mem::replace(&mut seen[s.slice], true) {
                return Err(Error::config("m_observations", format!("slice {} is given twice", s.slice)));
            }
            if s.data.len() != obs.functionals.len() || s.noise.len() != obs.functionals.len() {
                return Err(Error::config("m_observations", "each slice needs one datum and noise per functional"));
            }
            if s.data.iter().any(|v| !v.is_finite()) || s.noise.iter().any(|g| !(*g > 0.0) || !g.is_finite()) {
                return Err(Error::config("m_observations", "data must be finite and noise positive"));
            }
        }
        match &self.potential {
            TimePotential::Known(v) => {
                if v.len() != n || v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::config("potential", "known values must be finite, one per collocation point"));
                }
            }
            TimePotential::Shared(o) => o.validate("v_observations", dim)?,
            TimePotential::PerSlice(list) => {
                if list.len() != self.steps + 1 {
                    return Err(Error::config("v_observations", "per-slice potential needs steps + 1 observation sets"));
                }
                for o in list {
                    o.validate("v_observations", dim)?;
                }
            }
        }
        if let Some(k) = &self.slice_kernels {
            if k.len() != self.steps + 1 {
                return Err(Error::config("slice_kernels", "need steps + 1 entries"));
            }
        }
        if !(self.alpha_pen > 0.0) {
            return Err(Error::config("alpha_pen", "must be positive"));
        }
        if !(self.scalar_prior_weight >= 0.0) {
            return Err(Error::config("scalar_prior_weight", "must be nonnegative"));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::config("eta", "must be nonnegative"));
        }
        Ok(())
    }

    fn kernels_at(&self, k: usize) -> &KernelSpec {
        self.slice_kernels.as_ref().map_or(&self.kernels, |s| &s[k])
    }
}

/// Offsets of the per-slice blocks in the flat latent vector: all u slices,
/// all m slices, the potential blocks, then the unknown log-scalars.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeLayout {
    pub z: Vec<Range<usize>>,
    pub rho: Vec<Range<usize>>,
    pub v: Vec<Range<usize>>,
    pub log_nu: Option<usize>,
    pub log_coupling: Option<usize>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSlicedLatentState {
    pub z: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
    /// Empty for a known potential, one block when shared.
    pub v: Vec<Vec<f64>>,
    pub log_nu: Option<f64>,
    pub log_coupling: Option<f64>,
}

impl TimeSlicedLatentState {
    pub fn to_vec(&self, layout: &TimeLayout) -> Result<Vec<f64>> {
        let fits = |blocks: &[Vec<f64>], ranges: &[Range<usize>]| {
            blocks.len() == ranges.len() && blocks.iter().zip(ranges).all(|(b, r)| b.len() == r.len())
        };
        if !fits(&self.z, &layout.z)
            || !fits(&self.rho, &layout.rho)
            || !fits(&self.v, &layout.v)
            || self.log_nu.is_some() != layout.log_nu.is_some()
            || self.log_coupling.is_some() != layout.log_coupling.is_some()
        {
            return Err(Error::invalid("latent state does not match the problem layout"));
        }
        let mut x = Vec::with_capacity(layout.len);
        for b in self.z.iter().chain(&self.rho).chain(&self.v) {
            x.extend_from_slice(b);
        }
        x.extend(self.log_nu);
        x.extend(self.log_coupling);
        Ok(x)
    }

    pub fn from_vec(x: &[f64], layout: &TimeLayout) -> Self {
        let take = |r: &[Range<usize>]| r.iter().map(|r| x[r.clone()].to_vec()).collect();
        Self {
            z: take(&layout.z),
            rho: take(&layout.rho),
            v: take(&layout.v),
            log_nu: layout.log_nu.map(|i| x[i]),
            log_coupling: layout.log_coupling.map(|i| x[i]),
        }
    }
}

/// Feature lists shared by every slice plus the per-block potential features.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeFeatureSets {
    pub phi_u: Vec<LinearFunctional>,
    pub phi_m: Vec<LinearFunctional>,
    pub phi_v: Vec<Vec<LinearFunctional>>,
    pub m_obs_index: Vec<usize>,
    pub v_obs_index: Vec<Vec<usize>>,
    pub quad_index: Vec<usize>,
}

fn build_features(spec: &TimeDependentProblemSpec) -> TimeFeatureSets {
    let phi_u = stencil_features(&spec.collocation, spec.domain.dim());
    let mut phi_m = phi_u.clone();
    let m_obs_index = append_dedup(&mut phi_m, &spec.m_observations.functionals);
    let quad_index = match &spec.coupling {
        Coupling::NonlocalGaussian { rule, .. } => {
            let nodes: Vec<_> = rule.nodes.iter().map(|p| LinearFunctional::PointEval(p.clone())).collect();
            append_dedup(&mut phi_m, &nodes)
        }
        Coupling::PowerLocal { .. } => Vec::new(),
    };
    let values: Vec<_> = spec.collocation.iter().map(|p| LinearFunctional::PointEval(p.clone())).collect();
    let with_obs = |o: &Observations| {
        let mut phi = values.clone();
        let idx = append_dedup(&mut phi, &o.functionals);
        (phi, idx)
    };
    let (phi_v, v_obs_index) = match &spec.potential {
        TimePotential::Known(_) => (Vec::new(), Vec::new()),
        TimePotential::Shared(o) => {
            let (p, i) = with_obs(o);
            (vec![p], vec![i])
        }
        TimePotential::PerSlice(list) => list.iter().map(with_obs).unzip(),
    };
    TimeFeatureSets { phi_u, phi_m, phi_v, m_obs_index, v_obs_index, quad_index }
}

/// Builds one Gram system per distinct lengthscale vector.
fn grams_by_lengthscale(
    lengthscales: &[&Vec<f64>],
    domain: &TorusDomain,
    features: &[LinearFunctional],
    eta: f64,
    field: &str,
) -> Result<Vec<Arc<GramSystem>>> {
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for l in lengthscales {
        if !distinct.contains(l) {
            distinct.push(l);
        }
    }
    let built: Vec<Arc<GramSystem>> = distinct
        .par_iter()
        .map(|l| Ok(Arc::new(GramSystem::new(build_kernel(l, domain, field)?, features.to_vec(), eta)?)))
        .collect::<Result<_>>()?;
    Ok(lengthscales.iter().map(|l| built[distinct.iter().position(|d| d == l).expect("listed")].clone()).collect())
}

/// A time-dependent spec bound to its features, layout and Gram systems.
#[derive(Debug, Clone)]
pub struct TimeDependentProblem {
    spec: TimeDependentProblemSpec,
    features: TimeFeatureSets,
    layout: TimeLayout,
    stencil: Stencil,
    grams_u: Vec<Arc<GramSystem>>,
    grams_m: Vec<Arc<GramSystem>>,
    grams_v: Vec<Arc<GramSystem>>,
    nonlocal: Option<Arc<Vec<Vec<(usize, f64, f64)>>>>,
}

impl TimeDependentProblem {
    pub fn new(spec: TimeDependentProblemSpec) -> Result<Self> {
        spec.validate()?;
        let features = build_features(&spec);
        let slices = spec.steps + 1;
        let ku: Vec<&Vec<f64>> = (0..slices).map(|k| &spec.kernels_at(k).u).collect();
        let km: Vec<&Vec<f64>> = (0..slices).map(|k| &spec.kernels_at(k).m).collect();
        let grams_u = grams_by_lengthscale(&ku, &spec.domain, &features.phi_u, spec.eta, "kernels.u")?;
        let grams_m = grams_by_lengthscale(&km, &spec.domain, &features.phi_m, spec.eta, "kernels.m")?;
        let grams_v = features
            .phi_v
            .par_iter()
            .map(|phi| {
                let k = build_kernel(&spec.kernels.v, &spec.domain, "kernels.v")?;
                Ok(Arc::new(GramSystem::new(k, phi.clone(), spec.eta)?))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut next = 0;
        let mut block = |n: usize| {
            next += n;
            next - n..next
        };
        let z: Vec<_> = (0..slices).map(|_| block(features.phi_u.len())).collect();
        let rho: Vec<_> = (0..slices).map(|_| block(features.phi_m.len())).collect();
        let v: Vec<_> = features.phi_v.iter().map(|p| block(p.len())).collect();
        let mut take = |flag: bool| {
            flag.then(|| {
                next += 1;
                next - 1
            })
        };
        let log_nu = take(!spec.viscosity.known);
        let log_coupling = take(!spec.coupling.parameter().known);
        let layout = TimeLayout { z, rho, v, log_nu, log_coupling, len: next };

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
        let stencil = Stencil { m: spec.collocation.len(), dim: spec.domain.dim() };
        Ok(Self { spec, features, layout, stencil, grams_u, grams_m, grams_v, nonlocal })
    }

    pub fn spec(&self) -> &TimeDependentProblemSpec {
        &self.spec
    }

    pub fn features(&self) -> &TimeFeatureSets {
        &self.features
    }

    pub fn layout(&self) -> &TimeLayout {
        &self.layout
    }

    pub fn num_slices(&self) -> usize {
        self.spec.steps + 1
    }

    /// Starting point: u ≡ 0 except `u_{N_T} = φ*`; every m slice starts at
    /// `μ*` on the collocation points with observed values set to the data;
    /// `V ≡ 0`; unknown scalars at their spec values.
    pub fn initial_state(&self) -> TimeSlicedLatentState {
        let n = self.stencil.m;
        let slices = self.num_slices();
        let mut z = vec![vec![0.0; self.features.phi_u.len()]; slices];
        z[slices - 1][..n].copy_from_slice(&self.spec.terminal);
        let mean = self.spec.initial.iter().sum::<f64>() / n as f64;
        let base: Vec<f64> = self.features.phi_m.iter().map(|f| f.apply(&Constant(mean))).collect();
        let mut rho = vec![base; slices];
        for r in rho.iter_mut() {
            r[..n].copy_from_slice(&self.spec.initial);
        }
        for s in &self.spec.m_observations.slices {
            for (q, &j) in self.features.m_obs_index.iter().enumerate() {
                if matches!(self.spec.m_observations.functionals[q], LinearFunctional::PointEval(_)) {
                    rho[s.slice][j] = s.data[q];
                }
            }
        }
        TimeSlicedLatentState {
            z,
            rho,
            v: self.layout.v.iter().map(|r| vec![0.0; r.len()]).collect(),
            log_nu: self.layout.log_nu.map(|_| self.spec.viscosity.value.ln()),
            log_coupling: self.layout.log_coupling.map(|_| self.spec.coupling.parameter().value.ln()),
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

    /// Unweighted rows: for each step `k`, the HJB rows then the FP rows at
    /// every collocation point; then the terminal rows `(u_{N_T} - φ*)/Δt`
    /// and the initial rows `(m_0 - μ*)/Δt`.
    fn pde_rows(&self, x: &[f64], mut jac: Option<&mut Vec<SparseRow>>) -> Vec<f64> {
        let st = self.stencil;
        let n = st.m;
        let dt = self.spec.dt();
        let nu = self.nu(x);
        let coupling = self.coupling_eval(x);
        let l = &self.layout;
        let mut out = Vec::with_capacity(2 * n * (self.spec.steps + 1));
        for k in 0..self.spec.steps {
            let (oz, oz1) = (l.z[k].start, l.z[k + 1].start);
            let (om, om1) = (l.rho[k].start, l.rho[k + 1].start);
            let z = &x[l.z[k].clone()];
            let z1 = &x[l.z[k + 1].clone()];
            let r0 = &x[l.rho[k].clone()];
            let r1 = &x[l.rho[k + 1].clone()];
            let v_block = match &self.spec.potential {
                TimePotential::Known(_) => None,
                TimePotential::Shared(_) => Some(l.v[0].start),
                TimePotential::PerSlice(_) => Some(l.v[k].start),
            };
            let mut fp = Vec::with_capacity(n);
            let mut jf = Vec::new();
            for i in 0..n {
                let lap_u = z[st.laplacian(i)];
                let lap_m = r1[st.laplacian(i)];
                let m1 = r1[st.value(i)];
                let mut grad_sq = 0.0;
                let mut transport = 0.0;
                for d in 0..st.dim {
                    grad_sq += z[st.partial(d, i)].powi(2);
                    transport += z[st.partial(d, i)] * r1[st.partial(d, i)];
                }
                let v_i = match (&self.spec.potential, v_block) {
                    (TimePotential::Known(v), _) => v[i],
                    (_, Some(o)) => x[o + i],
                    _ => unreachable!("unknown potential has a block"),
                };
                let (gamma, dgamma, dgamma_log) = coupling.at(r1, i, st.value(i));
                out.push(-(z1[i] - z[i]) / dt - nu * lap_u + 0.5 * grad_sq - gamma + v_i);
                fp.push((m1 - r0[i]) / dt - nu * lap_m - (lap_u * m1 + transport));

                if let Some(j) = jac.as_deref_mut() {
                    let mut rh: SparseRow = vec![(oz1 + i, -1.0 / dt), (oz + i, 1.0 / dt), (oz + st.laplacian(i), -nu)];
                    for d in 0..st.dim {
                        rh.push((oz + st.partial(d, i), z[st.partial(d, i)]));
                    }
                    rh.extend(dgamma.iter().map(|(q, g)| (om1 + q, -g)));
                    if let Some(o) = v_block {
                        rh.push((o + i, 1.0));
                    }
                    if let Some(c) = l.log_nu {
                        rh.push((c, -nu * lap_u));
                    }
                    if let Some(c) = l.log_coupling {
                        rh.push((c, -dgamma_log));
                    }
                    j.push(rh);

                    let mut rf: SparseRow = vec![
                        (om1 + i, 1.0 / dt - lap_u),
                        (om + i, -1.0 / dt),
                        (om1 + st.laplacian(i), -nu),
                        (oz + st.laplacian(i), -m1),
                    ];
                    for d in 0..st.dim {
                        rf.push((oz + st.partial(d, i), -r1[st.partial(d, i)]));
                        rf.push((om1 + st.partial(d, i), -z[st.partial(d, i)]));
                    }
                    if let Some(c) = l.log_nu {
                        rf.push((c, -nu * lap_m));
                    }
                    jf.push(rf);
                }
            }
            out.extend(fp);
            if let Some(j) = jac.as_deref_mut() {
                j.extend(jf);
            }
        }
        let last = self.spec.steps;
        for i in 0..n {
            out.push((x[l.z[last].start + i] - self.spec.terminal[i]) / dt);
        }
        for i in 0..n {
            out.push((x[l.rho[0].start + i] - self.spec.initial[i]) / dt);
        }
        if let Some(j) = jac {
            j.extend((0..n).map(|i| vec![(l.z[last].start + i, 1.0 / dt)]));
            j.extend((0..n).map(|i| vec![(l.rho[0].start + i, 1.0 / dt)]));
        }
        out
    }

    fn stacked(&self, x: &[f64], jac: Option<&mut Vec<SparseRow>>) -> Vec<f64> {
        let want = jac.is_some();
        let mut rows = Vec::new();
        let mut r = self.pde_rows(x, want.then_some(&mut rows));
        let s = self.spec.alpha_pen.sqrt();
        r.iter_mut().for_each(|v| *v *= s);
        rows.iter_mut().for_each(|row| row.iter_mut().for_each(|(_, v)| *v *= s));
        for sd in &self.spec.m_observations.slices {
            let o = self.layout.rho[sd.slice].start;
            for (q, &j) in self.features.m_obs_index.iter().enumerate() {
                r.push((x[o + j] - sd.data[q]) / sd.noise[q]);
                if want {
                    rows.push(vec![(o + j, 1.0 / sd.noise[q])]);
                }
            }
        }
        let v_obs: Vec<&Observations> = match &self.spec.potential {
            TimePotential::Known(_) => Vec::new(),
            TimePotential::Shared(o) => vec![o],
            TimePotential::PerSlice(list) => list.iter().collect(),
        };
        for (b, obs) in v_obs.iter().enumerate() {
            let o = self.layout.v[b].start;
            for (q, &j) in self.features.v_obs_index[b].iter().enumerate() {
                r.push((x[o + j] - obs.data[q]) / obs.noise[q]);
                if want {
                    rows.push(vec![(o + j, 1.0 / obs.noise[q])]);
                }
            }
        }
        if let Some(j) = jac {
            *j = rows;
        }
        r
    }

    /// The unweighted discrete residuals (see [`td_residuals`]).
    pub fn residuals(&self, state: &TimeSlicedLatentState) -> Result<Vec<f64>> {
        Ok(self.pde_rows(&state.to_vec(&self.layout)?, None))
    }

    pub fn objective(&self, state: &TimeSlicedLatentState) -> Result<f64> {
        Ok(solver::objective(self, &state.to_vec(&self.layout)?))
    }

    pub fn gradient(&self, state: &TimeSlicedLatentState) -> Result<Vec<f64>> {
        Ok(solver::gradient(self, &state.to_vec(&self.layout)?))
    }

    pub fn gauss_newton(
        &self,
        init: &TimeSlicedLatentState,
        config: &GaussNewtonConfig,
    ) -> Result<(TimeSlicedLatentState, Diagnostics)> {
        let (x, diag) = solver::gauss_newton(self, &init.to_vec(&self.layout)?, config)?;
        Ok((TimeSlicedLatentState::from_vec(&x, &self.layout), diag))
    }

    pub fn reconstruct(&self, state: &TimeSlicedLatentState) -> Result<TimeSlicedFields> {
        state.to_vec(&self.layout)?;
        let build = |grams: &[Arc<GramSystem>], blocks: &[Vec<f64>]| -> Result<Vec<RecoveredField>> {
            grams.iter().zip(blocks).map(|(g, b)| RecoveredField::new(g.clone(), b)).collect()
        };
        Ok(TimeSlicedFields {
            u: build(&self.grams_u, &state.z)?,
            m: build(&self.grams_m, &state.rho)?,
            v: build(&self.grams_v, &state.v)?,
            nu: state.log_nu.map_or(self.spec.viscosity.value, f64::exp),
            coupling: state.log_coupling.map_or(self.spec.coupling.parameter().value, f64::exp),
            dt: self.spec.dt(),
        })
    }
}

impl ResidualModel for TimeDependentProblem {
    fn dim(&self) -> usize {
        self.layout.len
    }

    fn prior_blocks(&self) -> Vec<PriorBlock<'_>> {
        let l = &self.layout;
        let u = l.z.iter().zip(&self.grams_u).map(|(r, g)| PriorBlock { offset: r.start, gram: g.as_ref() });
        let m = l.rho.iter().zip(&self.grams_m).map(|(r, g)| PriorBlock { offset: r.start, gram: g.as_ref() });
        let v = l.v.iter().zip(&self.grams_v).map(|(r, g)| PriorBlock { offset: r.start, gram: g.as_ref() });
        u.chain(m).chain(v).collect()
    }

    fn free_priors(&self) -> Vec<(usize, f64)> {
        let w = self.spec.scalar_prior_weight;
        self.layout.log_nu.iter().chain(&self.layout.log_coupling).map(|&i| (i, w)).collect()
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

/// Per-slice recovered fields.
#[derive(Debug, Clone)]
pub struct TimeSlicedFields {
    pub u: Vec<RecoveredField>,
    pub m: Vec<RecoveredField>,
    /// Empty when the potential was given, one field when shared.
    pub v: Vec<RecoveredField>,
    pub nu: f64,
    pub coupling: f64,
    pub dt: f64,
}

impl TimeSlicedFields {
    /// The potential used at slice `k`, if it was recovered.
    pub fn potential(&self, k: usize) -> Option<&RecoveredField> {
        match self.v.len() {
            0 => None,
            1 => self.v.first(),
            _ => self.v.get(k),
        }
    }

    pub fn num_slices(&self) -> usize {
        self.u.len()
    }
}

/// Stacked discrete residuals of `state`: per step the HJB then FP rows at
/// every collocation point, then `(u_{N_T} - φ*)/Δt` and `(m_0 - μ*)/Δt`.
pub fn td_residuals(problem: &TimeDependentProblem, state: &TimeSlicedLatentState) -> Result<Vec<f64>> {
    problem.residuals(state)
}

pub fn td_objective(problem: &TimeDependentProblem, state: &TimeSlicedLatentState) -> Result<f64> {
    problem.objective(state)
}

pub fn td_gauss_newton(
    problem: &TimeDependentProblem,
    init: &TimeSlicedLatentState,
    config: &GaussNewtonConfig,
) -> Result<(TimeSlicedLatentState, Diagnostics)> {
    problem.gauss_newton(init, config)
}

pub fn td_reconstruct(problem: &TimeDependentProblem, state: &TimeSlicedLatentState) -> Result<TimeSlicedFields> {
    problem.reconstruct(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::TrigPotential;

    fn spec(steps: usize, n: usize, v: TimePotential) -> TimeDependentProblemSpec {
        let domain = TorusDomain::centered(1);
        let pts = domain.sample_uniform(n, 5);
        let mut s = TimeDependentProblemSpec::new(
            domain,
            pts,
            1.0,
            steps,
            Coupling::PowerLocal { alpha: Scalar::known(2.0) },
            Scalar::known(0.3),
            &TrigPotential::constant(0.0),
            &TrigPotential::constant(1.0),
        );
        s.potential = v;
        s
    }

    fn constant_state(p: &TimeDependentProblem, v: f64) -> TimeSlicedLatentState {
        let n = p.spec().collocation.len();
        let mut s = p.initial_state();
        for r in s.rho.iter_mut() {
            r.iter_mut().for_each(|x| *x = 0.0);
            r[..n].iter_mut().for_each(|x| *x = 1.0);
        }
        for b in s.v.iter_mut() {
            b.iter_mut().for_each(|x| *x = v);
        }
        s
    }

    #[test]
    fn constant_solution_has_zero_rows() {
        let p = TimeDependentProblem::new(spec(3, 6, TimePotential::Known(vec![1.0; 6]))).unwrap();
        let r = td_residuals(&p, &constant_state(&p, 1.0)).unwrap();
        assert_eq!(r.len(), 3 * 2 * 6 + 2 * 6);
        assert!(r.iter().all(|v| *v == 0.0), "{r:?}");
    }

    #[test]
    fn single_step_row_structure() {
        let p = TimeDependentProblem::new(spec(1, 4, TimePotential::Shared(Observations::default()))).unwrap();
        let s = p.initial_state();
        let r = p.residuals(&s).unwrap();
        assert_eq!(r.len(), 2 * 4 + 2 * 4);
        // terminal rows vanish because the initial state sets u_1 = φ*
        assert!(r[8..12].iter().all(|v| *v == 0.0));
        assert_eq!(p.layout().z.len(), 2);
        assert_eq!(p.layout().v.len(), 1);
    }

    #[test]
    fn objective_of_zero_latents_counts_initial_rows() {
        let p = TimeDependentProblem::new(spec(1, 5, TimePotential::Shared(Observations::default()))).unwrap();
        let zero = TimeSlicedLatentState::from_vec(&vec![0.0; p.layout().len], p.layout());
        let f = td_objective(&p, &zero).unwrap();
        assert!((f - 1e6 * 5.0).abs() < 1e-6, "{f}");
    }

    #[test]
    fn slices_share_gram_factorizations() {
        let p = TimeDependentProblem::new(spec(4, 5, TimePotential::Shared(Observations::default()))).unwrap();
        assert!(p.grams_u.windows(2).all(|w| Arc::ptr_eq(&w[0], &w[1])));
        assert!(p.grams_m.windows(2).all(|w| Arc::ptr_eq(&w[0], &w[1])));
        let mut s = spec(2, 5, TimePotential::Shared(Observations::default()));
        s.slice_kernels = Some(vec![KernelSpec::uniform(1.0), KernelSpec::uniform(0.7), KernelSpec::uniform(1.0)]);
        let p = TimeDependentProblem::new(s).unwrap();
        assert!(Arc::ptr_eq(&p.grams_u[0], &p.grams_u[2]));
        assert!(!Arc::ptr_eq(&p.grams_u[0], &p.grams_u[1]));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut s = spec(2, 4, TimePotential::Shared(Observations::default()));
        s.viscosity = Scalar::unknown(0.4);
        s.coupling = Coupling::PowerLocal { alpha: Scalar::unknown(1.5) };
        s.alpha_pen = 1.0;
        let p = TimeDependentProblem::new(s).unwrap();
        let mut x = p.initial_state().to_vec(p.layout()).unwrap();
        for (i, v) in x.iter_mut().enumerate() {
            *v += 0.05 * ((i as f64) * 0.37).sin();
        }
        let g = solver::gradient(&p, &x);
        let f = |y: &[f64]| solver::objective(&p, y);
        // prior terms are excluded from the check: perturb only latents that
        // are not dominated by the nugget-regularized inverse
        for &i in &[0usize, 5, p.layout().rho[1].start + 2, p.layout().log_nu.unwrap(), p.layout().log_coupling.unwrap()] {
            let h = 1e-6;
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1.0), "i={i} fd={fd} g={}", g[i]);
        }
    }

    #[test]
    fn constant_environment_converges_to_constant_fields() {
        // eight points admit a grid-scale aliasing mode that the prior prefers
        let mut s = spec(1, 16, TimePotential::Known(vec![0.5; 16]));
        s.collocation = s.domain.uniform_grid(16);
        let p = TimeDependentProblem::new(s).unwrap();
        let (s, _) = td_gauss_newton(&p, &p.initial_state(), &GaussNewtonConfig::default()).unwrap();
        let rows = p.residuals(&s).unwrap();
        let dt = p.spec().dt();
        assert!(rows[rows.len() - 2 * 16..].iter().all(|r| (r * dt).abs() <= 1e-6), "{rows:?}");
        let f = td_reconstruct(&p, &s).unwrap();
        // the discrete solution is u_0 = m_1² - V = 0.5, m_0 = m_1 = 1
        for x in [-0.4, -0.1, 0.2, 0.45] {
            assert!((f.m[0].value(&[x]) - 1.0).abs() < 1e-4);
            assert!((f.m[1].value(&[x]) - 1.0).abs() < 1e-4);
            assert!((f.u[0].value(&[x]) - 0.5).abs() < 1e-3);
            assert!(f.u[1].value(&[x]).abs() < 1e-6);
        }
    }

    #[test]
    fn validation_rejects_bad_slices() {
        let mut s = spec(2, 4, TimePotential::Shared(Observations::default()));
        s.m_observations = TimeObservations {
            functionals: vec![LinearFunctional::PointEval(vec![0.1])],
            slices: vec![SliceData { slice: 3, data: vec![1.0], noise: vec![1e-3] }],
        };
        assert!(matches!(s.validate(), Err(Error::Config { .. })));
        s.m_observations.slices[0].slice = 2;
        assert!(s.validate().is_ok());
        s.slice_kernels = Some(vec![KernelSpec::uniform(1.0)]);
        assert!(s.validate().is_err());
        s.slice_kernels = None;
        s.steps = 0;
        assert!(s.validate().is_err());
    }
}
