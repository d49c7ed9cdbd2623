//! Ground truth for the inverse solvers: the explicit one-dimensional
//! solution, forward GP solves with a known environment, and seeded
//! synthetic observations.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::functionals::{gauss_legendre_rule, Field, LinearFunctional};
use crate::kernels::{DerivOp, Point};
use crate::solver::{Diagnostics, GaussNewtonConfig};
use crate::stationary::{
    eval_points, Coupling, KernelSpec, LatentState, Observations, Penalties, PotentialSpec, RecoveredField,
    RecoveredFields, Scalar, StationaryProblem, StationaryProblemSpec, TorusDomain,
};
use crate::timedep::{
    TimeDependentProblem, TimeDependentProblemSpec, TimePotential, TimeSlicedFields, TimeSlicedLatentState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trig {
    Sin,
    Cos,
}

/// `coef · f(2π k·x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrigTerm {
    pub coef: f64,
    pub func: Trig,
    pub wave: Vec<f64>,
}

/// A constant plus a finite sum of [`TrigTerm`]s, with exact derivatives.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrigPotential {
    #[serde(default)]
    pub constant: f64,
    #[serde(default)]
    pub terms: Vec<TrigTerm>,
}

impl TrigPotential {
    pub fn constant(c: f64) -> Self {
        Self { constant: c, terms: Vec::new() }
    }

    pub fn term(mut self, coef: f64, func: Trig, wave: &[f64]) -> Self {
        self.terms.push(TrigTerm { coef, func, wave: wave.to_vec() });
        self
    }

    pub fn shifted(&self, c: f64) -> Self {
        Self { constant: self.constant + c, terms: self.terms.clone() }
    }

    pub fn validate(&self, dim: usize, field: &str) -> Result<()> {
        if !self.constant.is_finite() || self.terms.iter().any(|t| !t.coef.is_finite()) {
            return Err(Error::config(field, "coefficients must be finite"));
        }
        if self.terms.iter().any(|t| t.wave.len() != dim || t.wave.iter().any(|k| !k.is_finite())) {
            return Err(Error::config(field, "wave vectors must be finite and match the domain dimension"));
        }
        Ok(())
    }

    /// `sin(2πx) + sin(2πy) + cos(4πx)`.
    pub fn benchmark_2d() -> Self {
        Self::constant(0.0)
            .term(1.0, Trig::Sin, &[0.0, 1.0])
            .term(1.0, Trig::Sin, &[1.0, 0.0])
            .term(1.0, Trig::Cos, &[2.0, 0.0])
    }
}

impl Field for TrigPotential {
    fn value(&self, x: &[f64]) -> f64 {
        self.derivative(x, DerivOp::Identity)
    }

    fn derivative(&self, x: &[f64], op: DerivOp) -> f64 {
        let mut out = if op == DerivOp::Identity { self.constant } else { 0.0 };
        for t in &self.terms {
            let k: Vec<f64> = t.wave.iter().map(|k| 2.0 * PI * k).collect();
            let phase: f64 = k.iter().zip(x).map(|(k, x)| k * x).sum();
            let (s, c) = phase.sin_cos();
            // f, f', f'' of the profile at the phase
            let (f0, f1, f2) = match t.func {
                Trig::Sin => (s, c, -s),
                Trig::Cos => (c, -s, -c),
            };
            out += t.coef
                * match op {
                    DerivOp::Identity => f0,
                    DerivOp::Partial(d) => k[d] * f1,
                    DerivOp::SecondPartial(d, e) => k[d] * k[e] * f2,
                    DerivOp::Laplacian => k.iter().map(|k| k * k).sum::<f64>() * f2,
                };
        }
        out
    }
}

/// The explicit solution of the first-order one-dimensional problem with
/// `Γ(m) = m²`: `u = 0`, `m = √(V - H̄)`, `∫ m = 1`.
#[derive(Debug, Clone)]
pub struct ExplicitSolution1d<V> {
    pub potential: V,
    pub hbar: f64,
}

impl<V: Field> ExplicitSolution1d<V> {
    pub fn m(&self, x: f64) -> f64 {
        (self.potential.value(&[x]) - self.hbar).sqrt()
    }

    pub fn u(&self, _x: f64) -> f64 {
        0.0
    }
}

/// `m = √(V - H̄)` with exact derivatives.
impl<V: Field> Field for ExplicitSolution1d<V> {
    fn value(&self, x: &[f64]) -> f64 {
        self.m(x[0])
    }

    fn derivative(&self, x: &[f64], op: DerivOp) -> f64 {
        let m = self.m(x[0]);
        let v1 = self.potential.derivative(x, DerivOp::Partial(0));
        match op {
            DerivOp::Identity => m,
            DerivOp::Partial(_) => v1 / (2.0 * m),
            DerivOp::SecondPartial(..) | DerivOp::Laplacian => {
                let v2 = self.potential.derivative(x, DerivOp::Laplacian);
                v2 / (2.0 * m) - v1 * v1 / (4.0 * m * m * m)
            }
        }
    }
}

/// Finds `H̄` with `∫₀¹ √(V - H̄) dx = 1` by bisection on
/// `[min V - 4, min V - 1e-12]`, integrating with a `grid_n`-point
/// Gauss–Legendre rule; `min V` is taken over the rule's nodes.
pub fn solve_1d_explicit<V: Field>(potential: V, grid_n: usize) -> Result<ExplicitSolution1d<V>> {
    if grid_n == 0 {
        return Err(Error::invalid("quadrature size must be positive"));
    }
    let rule = gauss_legendre_rule(grid_n, &[0.0], &[1.0])?;
    let values: Vec<f64> = rule.nodes.iter().map(|x| potential.value(x)).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("potential is not finite on [0, 1)"));
    }
    let vmin = values.iter().copied().fold(f64::INFINITY, f64::min);
    let defect = |h: f64| -> f64 { values.iter().zip(&rule.weights).map(|(v, w)| w * (v - h).max(0.0).sqrt()).sum::<f64>() - 1.0 };
    // the defect decreases in h
    let (mut lo, mut hi) = (vmin - 4.0, vmin - 1e-12);
    let (flo, fhi) = (defect(lo), defect(hi));
    if !(flo >= 0.0 && fhi <= 0.0) {
        return Err(Error::Infeasible { lo, hi });
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f = defect(mid);
        if f == 0.0 {
            lo = mid;
            hi = mid;
            break;
        }
        if f > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let hbar = if defect(lo).abs() <= defect(hi).abs() { lo } else { hi };
    Ok(ExplicitSolution1d { potential, hbar })
}

/// A fully specified stationary environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSpec {
    pub potential: TrigPotential,
    pub nu: f64,
    /// Coupling with known parameter.
    pub coupling: Coupling,
}

impl EnvironmentSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.potential.validate(dim, "environment.potential")?;
        if !(self.nu > 0.0) {
            return Err(Error::config("environment.nu", "must be positive"));
        }
        Ok(())
    }
}

/// Output of a forward solve: the fields, with the problem and latents that produced them.
#[derive(Debug, Clone)]
pub struct ForwardSolution {
    pub problem: StationaryProblem,
    pub state: LatentState,
    pub fields: RecoveredFields,
    pub diagnostics: Diagnostics,
}

impl ForwardSolution {
    /// Unweighted PDE residuals of the reconstructed fields at arbitrary points
    /// (HJB rows then FP rows).
    pub fn residuals_at(&self, env: &EnvironmentSpec, points: &[Point]) -> Vec<f64> {
        field_residuals(&self.fields, &env.potential, self.fields.hbar, env.nu, &env.coupling, points)
    }
}

/// PDE residuals of continuous fields, evaluated pointwise.
pub fn field_residuals<V: Field + ?Sized>(
    fields: &RecoveredFields,
    potential: &V,
    hbar: f64,
    nu: f64,
    coupling: &Coupling,
    points: &[Point],
) -> Vec<f64> {
    let mut hjb = Vec::with_capacity(points.len());
    let mut fp = Vec::with_capacity(points.len());
    for x in points {
        let du = fields.u.gradient(x);
        let dm = fields.m.gradient(x);
        let lap_u = fields.u.laplacian(x);
        let lap_m = fields.m.laplacian(x);
        let m = fields.m.value(x);
        let gamma = coupling_value(&fields.m, coupling, x);
        let g2: f64 = du.iter().map(|v| v * v).sum();
        let tr: f64 = du.iter().zip(&dm).map(|(a, b)| a * b).sum();
        hjb.push(-nu * lap_u + 0.5 * g2 + potential.value(x) - gamma - hbar);
        fp.push(-nu * lap_m - (lap_u * m + tr));
    }
    hjb.extend(fp);
    hjb
}

fn coupling_value(m: &RecoveredField, coupling: &Coupling, x: &[f64]) -> f64 {
    match coupling {
        Coupling::PowerLocal { alpha } => crate::stationary::signed_power(m.value(x), alpha.value).0,
        Coupling::NonlocalGaussian { sigma, rule, periodic } => {
            let f = crate::functionals::nonlocal_coupling_functional(
                sigma.value,
                rule,
                x,
                periodic.then_some(m.gram().kernel().periods()),
            );
            f.apply(m)
        }
    }
}

/// Solves the forward problem by running the stationary machinery with the
/// potential, viscosity and coupling fixed and no observations.
pub fn solve_forward_stationary(
    env: &EnvironmentSpec,
    domain: &TorusDomain,
    samples: Vec<Point>,
    kernels: KernelSpec,
    penalties: Penalties,
    eta: f64,
    config: &GaussNewtonConfig,
) -> Result<ForwardSolution> {
    env.validate(domain.dim())?;
    let coupling = known_coupling(&env.coupling);
    let v = eval_points(&env.potential, &samples);
    let mut spec = StationaryProblemSpec::new(domain.clone(), samples, coupling, Scalar::known(env.nu));
    spec.potential = PotentialSpec::Known(v);
    spec.kernels = kernels;
    spec.penalties = penalties;
    spec.hbar_prior_weight = 0.0;
    spec.eta = eta;
    let problem = StationaryProblem::new(spec)?;
    let (state, diagnostics) = problem.gauss_newton(&problem.initial_state(), config)?;
    let fields = problem.reconstruct(&state)?;
    Ok(ForwardSolution { problem, state, fields, diagnostics })
}

/// A time-dependent environment on `[0, T]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeEnvironmentSpec {
    pub environment: EnvironmentSpec,
    pub horizon: f64,
    pub steps: usize,
    /// Terminal cost `φ*`.
    pub terminal: TrigPotential,
    /// Initial density `μ*`.
    pub initial: TrigPotential,
}

impl TimeEnvironmentSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        self.environment.validate(dim)?;
        self.terminal.validate(dim, "environment.terminal")?;
        self.initial.validate(dim, "environment.initial")?;
        if self.steps == 0 {
            return Err(Error::config("environment.steps", "must be at least 1"));
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(Error::config("environment.horizon", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TimeForwardSolution {
    pub problem: TimeDependentProblem,
    pub state: TimeSlicedLatentState,
    pub fields: TimeSlicedFields,
    pub diagnostics: Diagnostics,
}

impl TimeForwardSolution {
    /// Discrete-in-time residuals of the reconstructed fields at arbitrary
    /// points, in the same row order as the solver's residuals.
    pub fn residuals_at(&self, env: &TimeEnvironmentSpec, points: &[Point]) -> Vec<f64> {
        let f = &self.fields;
        let e = &env.environment;
        let dt = env.horizon / env.steps as f64;
        let mut out = Vec::new();
        for k in 0..env.steps {
            let (u, u1, m0, m1) = (&f.u[k], &f.u[k + 1], &f.m[k], &f.m[k + 1]);
            let mut fp = Vec::with_capacity(points.len());
            for x in points {
                let du = u.gradient(x);
                let dm = m1.gradient(x);
                let lap_u = u.laplacian(x);
                let g2: f64 = du.iter().map(|v| v * v).sum();
                let tr: f64 = du.iter().zip(&dm).map(|(a, b)| a * b).sum();
                let gamma = coupling_value(m1, &e.coupling, x);
                out.push(-(u1.value(x) - u.value(x)) / dt - e.nu * lap_u + 0.5 * g2 - gamma + e.potential.value(x));
                let m = m1.value(x);
                fp.push((m - m0.value(x)) / dt - e.nu * m1.laplacian(x) - (lap_u * m + tr));
            }
            out.extend(fp);
        }
        out.extend(points.iter().map(|x| (f.u[env.steps].value(x) - env.terminal.value(x)) / dt));
        out.extend(points.iter().map(|x| (f.m[0].value(x) - env.initial.value(x)) / dt));
        out
    }
}

/// Time-dependent forward solve: the inverse machinery with `V`, `ν` and the
/// coupling fixed and no observations.
pub fn solve_forward_timedep(
    env: &TimeEnvironmentSpec,
    domain: &TorusDomain,
    samples: Vec<Point>,
    kernels: KernelSpec,
    alpha_pen: f64,
    eta: f64,
    config: &GaussNewtonConfig,
) -> Result<TimeForwardSolution> {
    env.validate(domain.dim())?;
    let e = &env.environment;
    let v = eval_points(&e.potential, &samples);
    let mut spec = TimeDependentProblemSpec::new(
        domain.clone(),
        samples,
        env.horizon,
        env.steps,
        known_coupling(&e.coupling),
        Scalar::known(e.nu),
        &env.terminal,
        &env.initial,
    );
    spec.potential = TimePotential::Known(v);
    spec.kernels = kernels;
    spec.alpha_pen = alpha_pen;
    spec.eta = eta;
    let problem = TimeDependentProblem::new(spec)?;
    let (state, diagnostics) = problem.gauss_newton(&problem.initial_state(), config)?;
    let fields = problem.reconstruct(&state)?;
    Ok(TimeForwardSolution { problem, state, fields, diagnostics })
}

fn known_coupling(c: &Coupling) -> Coupling {
    match c {
        Coupling::PowerLocal { alpha } => Coupling::PowerLocal { alpha: Scalar::known(alpha.value) },
        Coupling::NonlocalGaussian { sigma, rule, periodic } => {
            Coupling::NonlocalGaussian { sigma: Scalar::known(sigma.value), rule: rule.clone(), periodic: *periodic }
        }
    }
}

/// Clean and noisy values of a set of functionals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub functionals: Vec<LinearFunctional>,
    pub clean: Vec<f64>,
    pub noisy: Vec<f64>,
    pub gamma: f64,
    pub seed: u64,
}

impl ObservationSet {
    pub fn into_observations(self) -> Observations {
        Observations::new(self.functionals, self.noisy, self.gamma)
    }
}

/// Applies `functionals` to `field` and adds i.i.d. `N(0, γ²)` noise from a
/// ChaCha20 stream seeded with `seed`.
pub fn synthesize_observations<F: Field + ?Sized>(
    field: &F,
    functionals: Vec<LinearFunctional>,
    gamma: f64,
    seed: u64,
) -> Result<ObservationSet> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::invalid("noise level must be finite and nonnegative"));
    }
    let clean: Vec<f64> = functionals.iter().map(|f| f.apply(field)).collect();
    let noisy = if gamma == 0.0 {
        clean.clone()
    } else {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, gamma).map_err(|e| Error::invalid(e.to_string()))?;
        clean.iter().map(|c| c + normal.sample(&mut rng)).collect()
    };
    Ok(ObservationSet { functionals, clean, noisy, gamma, seed })
}

/// Point evaluations at each of `points`.
pub fn point_evals(points: &[Point]) -> Vec<LinearFunctional> {
    points.iter().map(|p| LinearFunctional::PointEval(p.clone())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sin_plus_two() -> TrigPotential {
        TrigPotential::constant(2.0).term(1.0, Trig::Sin, &[1.0])
    }

    #[test]
    fn constant_potential() {
        let s = solve_1d_explicit(TrigPotential::constant(0.7), 512).unwrap();
        assert!((s.hbar - (0.7 - 1.0)).abs() < 1e-12);
        assert!((s.m(0.3) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sine_potential_matches_oracle() {
        // mpmath adaptive quadrature and root finding, 30 digits
        let s = solve_1d_explicit(sin_plus_two(), 512).unwrap();
        assert!((s.hbar - 0.861_855_349_750_917_8).abs() < 1e-10, "{}", s.hbar);
    }

    #[test]
    fn shift_moves_hbar_only() {
        let a = solve_1d_explicit(sin_plus_two(), 512).unwrap();
        let b = solve_1d_explicit(sin_plus_two().shifted(0.3), 512).unwrap();
        assert!((b.hbar - a.hbar - 0.3).abs() < 1e-12);
        for x in [0.1, 0.45, 0.8] {
            assert!((a.m(x) - b.m(x)).abs() < 1e-10);
        }
    }

    #[test]
    fn explicit_solution_satisfies_system() {
        let s = solve_1d_explicit(sin_plus_two(), 512).unwrap();
        let rule = gauss_legendre_rule(512, &[0.0], &[1.0]).unwrap();
        assert!((rule.integrate(|x| s.m(x[0])) - 1.0).abs() < 1e-10);
        for i in 0..512 {
            let x = i as f64 / 512.0;
            assert!((s.potential.value(&[x]) - s.m(x).powi(2) - s.hbar).abs() < 1e-8);
        }
    }

    #[test]
    fn infeasible_potential_rejected() {
        assert!(solve_1d_explicit(TrigPotential::constant(0.0), 0).is_err());
        // mass stays above one across the whole bracket
        let huge = TrigPotential::constant(0.0).term(1e3, Trig::Sin, &[1.0]);
        assert!(matches!(solve_1d_explicit(huge, 512), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn trig_derivatives_match_finite_differences() {
        let v = TrigPotential::benchmark_2d().term(0.3, Trig::Cos, &[1.0, 2.0]);
        let x = [0.13, -0.31];
        let h = 1e-5;
        for d in 0..2 {
            let mut xp = x;
            xp[d] += h;
            let mut xm = x;
            xm[d] -= h;
            let fd = (v.value(&xp) - v.value(&xm)) / (2.0 * h);
            assert!((fd - v.derivative(&x, DerivOp::Partial(d))).abs() < 1e-7);
        }
        let lap = v.derivative(&x, DerivOp::SecondPartial(0, 0)) + v.derivative(&x, DerivOp::SecondPartial(1, 1));
        assert!((lap - v.derivative(&x, DerivOp::Laplacian)).abs() < 1e-10);
    }

    #[test]
    fn observations_deterministic_and_noiseless() {
        let f = sin_plus_two();
        let fs = point_evals(&[vec![0.1], vec![0.2]]);
        let a = synthesize_observations(&f, fs.clone(), 0.0, 1).unwrap();
        assert_eq!(a.clean, a.noisy);
        let b = synthesize_observations(&f, fs.clone(), 1e-3, 5).unwrap();
        let c = synthesize_observations(&f, fs, 1e-3, 5).unwrap();
        assert_eq!(b.noisy, c.noisy);
    }

    #[test]
    fn noise_standard_deviation() {
        let f = TrigPotential::constant(0.0);
        let fs = vec![LinearFunctional::PointEval(vec![0.0]); 100_000];
        let o = synthesize_observations(&f, fs, 1e-3, 11).unwrap();
        let n = o.noisy.len() as f64;
        let mean = o.noisy.iter().sum::<f64>() / n;
        let sd = (o.noisy.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd / 1e-3 - 1.0).abs() < 0.02, "{sd}");
    }
}
