//! Property checks shared by the proptest suite and the acceptance run.
//! Each returns `Err` with a description of the first violation.

#![allow(dead_code)]

use std::sync::Arc;

use mfggp::functionals::{Field, LinearFunctional};
use mfggp::gram::GramSystem;
use mfggp::kernels::{DerivOp, PeriodicKernel};
use mfggp::reference::{point_evals, solve_1d_explicit, synthesize_observations, Trig, TrigPotential};
use mfggp::solver::{self, GaussNewtonConfig, PriorBlock, ResidualModel, SparseRow, StopReason};
use mfggp::stationary::{
    Coupling, KernelSpec, LatentState, PotentialSpec, RecoveredField, Scalar, StationaryProblem, StationaryProblemSpec,
    TorusDomain,
};

pub type Check = Result<(), String>;

fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

/// First derivatives, Laplacian and a mixed cross term against central differences.
pub fn kernel_derivatives(x: &[f64], y: &[f64], l: f64, d: usize) -> Check {
    let k = PeriodicKernel::isotropic(x.len(), l).unwrap();
    let h = 1e-4;
    let shift = |p: &[f64], e: usize, s: f64| {
        let mut q = p.to_vec();
        q[e] += s;
        q
    };
    let f = |p: &[f64]| k.eval(p, y).unwrap();

    let fd1 = (f(&shift(x, d, h)) - f(&shift(x, d, -h))) / (2.0 * h);
    let an1 = k.deriv_eval(DerivOp::Partial(d), x, DerivOp::Identity, y).unwrap();
    if !rel_close(an1, fd1, 1e-5) {
        return Err(format!("first derivative {an1} vs {fd1}"));
    }
    let lap_fd: f64 =
        (0..x.len()).map(|e| (f(&shift(x, e, h)) - 2.0 * f(x) + f(&shift(x, e, -h))) / (h * h)).sum();
    let lap = k.deriv_eval(DerivOp::Laplacian, x, DerivOp::Identity, y).unwrap();
    if !rel_close(lap, lap_fd, 1e-5) {
        return Err(format!("laplacian {lap} vs {lap_fd}"));
    }
    let g = |q: &[f64]| k.deriv_eval(DerivOp::Partial(d), x, DerivOp::Identity, q).unwrap();
    let fd2 = (g(&shift(y, d, h)) - g(&shift(y, d, -h))) / (2.0 * h);
    let an2 = k.deriv_eval(DerivOp::Partial(d), x, DerivOp::Partial(d), y).unwrap();
    if !rel_close(an2, fd2, 1e-5) {
        return Err(format!("mixed derivative {an2} vs {fd2}"));
    }
    Ok(())
}

/// Values, first derivatives and Laplacians at `n` random points of the 2D torus.
pub fn gram_symmetric_positive_definite(seed: u64, n: usize, l: f64) -> Check {
    let pts = TorusDomain::centered(2).sample_uniform(n, seed);
    let mut features: Vec<LinearFunctional> = pts.iter().map(|p| LinearFunctional::PointEval(p.clone())).collect();
    for d in 0..2 {
        features.extend(pts.iter().map(|p| LinearFunctional::point_deriv(p.clone(), DerivOp::Partial(d))));
    }
    features.extend(pts.iter().map(|p| LinearFunctional::point_deriv(p.clone(), DerivOp::Laplacian)));
    let g = GramSystem::new(PeriodicKernel::isotropic(2, l).unwrap(), features, 1e-8).map_err(|e| e.to_string())?;
    let k = g.matrix();
    for i in 0..g.len() {
        for j in 0..i {
            if k[(i, j)] != k[(j, i)] {
                return Err(format!("asymmetric at ({i}, {j})"));
            }
        }
    }
    let min = g.regularized().symmetric_eigenvalues().min();
    if min > 0.0 {
        Ok(())
    } else {
        Err(format!("min eigenvalue {min:e}"))
    }
}

pub fn representer_interpolates(seed: u64, n: usize) -> Check {
    let pts = TorusDomain::centered(1).sample_uniform(n, seed);
    let features = point_evals(&pts);
    let data: Vec<f64> = pts.iter().map(|p| (2.0 * std::f64::consts::PI * p[0]).sin() + 0.3).collect();
    let g = Arc::new(GramSystem::new(PeriodicKernel::isotropic(1, 1.0).unwrap(), features, 1e-12).unwrap());
    let f = RecoveredField::new(g, &data).unwrap();
    for (p, d) in pts.iter().zip(&data) {
        if (f.value(p) - d).abs() > 1e-6 {
            return Err(format!("interpolant {} vs data {d}", f.value(p)));
        }
    }
    Ok(())
}

/// A 1D problem with unknown `V` and viscosity and a few noisy observations.
pub fn small_problem(seed: u64, gamma: f64) -> StationaryProblem {
    let domain = TorusDomain::centered(1);
    let pts = domain.sample_uniform(12, seed);
    let m = TrigPotential::constant(1.0).term(0.2, Trig::Cos, &[1.0]);
    let obs = synthesize_observations(&m, point_evals(&pts[..5]), gamma, seed + 1).unwrap();
    let v = TrigPotential::constant(0.0).term(1.0, Trig::Sin, &[1.0]);
    let vobs = synthesize_observations(&v, point_evals(&pts[..3]), gamma, seed + 2).unwrap();
    let mut spec =
        StationaryProblemSpec::new(domain, pts, Coupling::PowerLocal { alpha: Scalar::known(2.0) }, Scalar::unknown(0.3));
    spec.kernels = KernelSpec::uniform(0.8);
    spec.m_observations = obs.into_observations();
    spec.potential = PotentialSpec::Unknown(vobs.into_observations());
    StationaryProblem::new(spec).unwrap()
}

pub fn random_state(p: &StationaryProblem, seed: u64) -> LatentState {
    let mut s = p.initial_state();
    let mut r = seed.wrapping_add(17);
    let mut next = || {
        r = r.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((r >> 11) as f64 / (1u64 << 53) as f64) - 0.5
    };
    s.z.iter_mut().for_each(|v| *v = next());
    s.rho.iter_mut().for_each(|v| *v += 0.2 * next());
    s.v.iter_mut().for_each(|v| *v = next());
    s.hbar = next();
    s
}

pub fn gauge_invariance(seed: u64, c: f64) -> Check {
    let p = small_problem(seed, 1e-3);
    let mut s = random_state(&p, seed);
    let base = p.pde_residuals(&s).unwrap();
    s.v.iter_mut().for_each(|v| *v += c);
    s.hbar += c;
    let shifted = p.pde_residuals(&s).unwrap();
    for (a, b) in base.iter().zip(&shifted) {
        // the shift cancels algebraically; only the rounding of v + c remains
        if (a - b).abs() > 8.0 * f64::EPSILON * (1.0 + c.abs() + a.abs()) {
            return Err(format!("residual {a} became {b}"));
        }
    }
    Ok(())
}

pub fn gradient_matches_finite_differences(seed: u64) -> Check {
    let p = small_problem(seed, 1e-2);
    let x = random_state(&p, seed).to_vec(p.layout()).unwrap();
    let g = solver::gradient(&p, &x);
    let mut rng = seed;
    for _ in 0..6 {
        rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let j = (rng >> 33) as usize % x.len();
        let h = 1e-4 * x[j].abs().max(1.0);
        let mut a = x.clone();
        a[j] += h;
        let mut b = x.clone();
        b[j] -= h;
        let fd = (solver::objective(&p, &a) - solver::objective(&p, &b)) / (2.0 * h);
        if (g[j] - fd).abs() > 1e-4 * g[j].abs().max(fd.abs()).max(1.0) {
            return Err(format!("coordinate {j}: {} vs {fd}", g[j]));
        }
    }
    Ok(())
}

pub fn residuals_vanish_at_exact_1d_solution(seed: u64) -> Check {
    let v = TrigPotential::constant(2.0).term(1.0, Trig::Sin, &[1.0]);
    let exact = solve_1d_explicit(v.clone(), 512).unwrap();
    let domain = TorusDomain::unit(1);
    let pts = domain.sample_uniform(40, seed);
    let vals = pts.iter().map(|p| v.value(p)).collect();
    let mut spec =
        StationaryProblemSpec::new(domain, pts, Coupling::PowerLocal { alpha: Scalar::known(2.0) }, Scalar::known(0.0));
    spec.kernels = KernelSpec::uniform(1.41);
    spec.potential = PotentialSpec::Known(vals);
    let p = StationaryProblem::new(spec).unwrap();
    let mut s = p.initial_state();
    s.z.iter_mut().for_each(|z| *z = 0.0);
    s.rho = p.features().phi_m.iter().map(|f| f.apply(&exact)).collect();
    s.hbar = exact.hbar;
    let worst = p.pde_residuals(&s).unwrap().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if worst <= 1e-10 {
        Ok(())
    } else {
        Err(format!("max residual {worst:e}"))
    }
}

pub fn gauss_newton_monotone(seed: u64) -> Check {
    let p = small_problem(seed, 1e-3);
    let (_, d) = p.gauss_newton(&p.initial_state(), &GaussNewtonConfig::default()).map_err(|e| e.to_string())?;
    if d.iterations() == 0 {
        return Err("no step taken".into());
    }
    for w in d.objective.windows(2) {
        if w[1] > w[0] {
            return Err(format!("objective rose {} -> {}", w[0], w[1]));
        }
    }
    Ok(())
}

/// GP regression with one free, weakly penalized offset: every residual is affine.
pub struct Affine {
    pub gram: GramSystem,
    pub data: Vec<f64>,
}

impl ResidualModel for Affine {
    fn dim(&self) -> usize {
        self.gram.len() + 1
    }
    fn prior_blocks(&self) -> Vec<PriorBlock<'_>> {
        vec![PriorBlock { offset: 0, gram: &self.gram }]
    }
    fn free_priors(&self) -> Vec<(usize, f64)> {
        vec![(self.gram.len(), 0.5)]
    }
    fn residuals(&self, x: &[f64]) -> Vec<f64> {
        let n = self.gram.len();
        let mut r: Vec<f64> = (0..n).map(|i| (x[i] + x[n] - self.data[i]) / 0.1).collect();
        r.push((x[0] - 2.0 * x[1] + 0.3) * 5.0);
        r
    }
    fn jacobian(&self, _x: &[f64]) -> Vec<SparseRow> {
        let n = self.gram.len();
        let mut j: Vec<SparseRow> = (0..n).map(|i| vec![(i, 10.0), (n, 10.0)]).collect();
        j.push(vec![(0, 5.0), (1, -10.0)]);
        j
    }
}

pub fn quadratic_one_iteration(seed: u64) -> Check {
    let pts = TorusDomain::centered(1).sample_uniform(6, seed);
    let gram = GramSystem::new(PeriodicKernel::isotropic(1, 0.7).unwrap(), point_evals(&pts), 1e-8).unwrap();
    let data: Vec<f64> = pts.iter().map(|p| p[0].cos() + 1.0).collect();
    let model = Affine { gram, data };
    let cfg = GaussNewtonConfig::default();
    let (x, d) = solver::gauss_newton(&model, &vec![0.3; model.dim()], &cfg).map_err(|e| e.to_string())?;
    if d.step_lengths != [1.0] || d.damping != [0.0] {
        return Err(format!("steps {:?}, damping {:?}", d.step_lengths, d.damping));
    }
    let (_, d2) = solver::gauss_newton(&model, &x, &cfg).map_err(|e| e.to_string())?;
    if d2.stop != StopReason::Stationary || d2.iterations() != 0 {
        return Err(format!("restart moved: {:?} after {} steps", d2.stop, d2.iterations()));
    }
    Ok(())
}
