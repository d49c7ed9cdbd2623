//! First-order one-dimensional problem with an explicit solution: recover
//! `u`, `m`, `V` and `H̄` from 20 noisy observations of `m` and `V`.
//!
//! Usage: `cargo run --release --example explicit_1d [lengthscale] [seed]`

use std::time::Instant;

use mfggp::functionals::Field;
use mfggp::reference::{point_evals, solve_1d_explicit, synthesize_observations, Trig, TrigPotential};
use mfggp::solver::GaussNewtonConfig;
use mfggp::stationary::{
    Coupling, KernelSpec, PotentialSpec, Scalar, StationaryProblem, StationaryProblemSpec, TorusDomain,
};

fn main() -> mfggp::Result<()> {
    let mut args = std::env::args().skip(1);
    let lengthscale: f64 = args.next().map_or(1.41, |s| s.parse().expect("lengthscale"));
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed"));
    let start = Instant::now();

    let potential = TrigPotential::constant(2.0).term(1.0, Trig::Sin, &[1.0]);
    let truth = solve_1d_explicit(potential.clone(), 512)?;

    let domain = TorusDomain::unit(1);
    let points = domain.sample_uniform(60, seed);
    let observed = point_evals(&points[..20]);
    let m_obs = synthesize_observations(&truth, observed.clone(), 1e-3, seed + 1)?;
    let v_obs = synthesize_observations(&potential, observed, 1e-3, seed + 2)?;

    let mut spec = StationaryProblemSpec::new(
        domain.clone(),
        points,
        Coupling::PowerLocal { alpha: Scalar::known(2.0) },
        Scalar::known(0.0),
    );
    spec.kernels = KernelSpec::uniform(lengthscale);
    spec.m_observations = m_obs.into_observations();
    spec.potential = PotentialSpec::Unknown(v_obs.into_observations());

    let problem = StationaryProblem::new(spec)?;
    let (state, diag) = problem.gauss_newton(&problem.initial_state(), &GaussNewtonConfig::default())?;
    let fields = problem.reconstruct(&state)?;
    let v = fields.v.as_ref().expect("potential is recovered");

    let grid = domain.uniform_grid(128);
    let l2 = |f: &dyn Fn(&[f64]) -> f64| (grid.iter().map(|x| f(x).powi(2)).sum::<f64>() / grid.len() as f64).sqrt();
    println!("iterations {} ({:?})", diag.iterations(), diag.stop);
    println!("L2 error m {:.3e}", l2(&|x| fields.m.value(x) - truth.m(x[0])));
    println!("L2 error u {:.3e}", l2(&|x| fields.u.value(x)));
    println!("L2 error V {:.3e}", l2(&|x| v.value(x) - potential.value(x)));
    println!("hbar {:.6} (true {:.6})", fields.hbar, truth.hbar);
    println!("elapsed {:.2?}", start.elapsed());
    Ok(())
}
