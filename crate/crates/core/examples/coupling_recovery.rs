//! Recover an unknown coupling parameter: the exponent of a local power
//! coupling, or the lengthscale of a non-local Gaussian coupling evaluated
//! by Gauss–Legendre quadrature.
//!
//! Usage:
//! `cargo run --release --example coupling_recovery power [alpha] [points] [seed]`
//! `cargo run --release --example coupling_recovery nonlocal [sigma] [nodes per dim] [seed]`

use std::time::Instant;

use mfggp::functionals::{gauss_legendre_rule, Field};
use mfggp::reference::{
    point_evals, solve_forward_stationary, synthesize_observations, EnvironmentSpec, Trig, TrigPotential,
};
use mfggp::solver::GaussNewtonConfig;
use mfggp::stationary::{
    Coupling, KernelSpec, Penalties, PotentialSpec, Scalar, StationaryProblem, StationaryProblemSpec, TorusDomain,
};

fn main() -> mfggp::Result<()> {
    let mut args = std::env::args().skip(1);
    let nonlocal = args.next().as_deref() == Some("nonlocal");
    let truth: f64 = args.next().map_or(if nonlocal { 1.0 } else { 2.0 }, |s| s.parse().expect("parameter"));
    let size: usize = args.next().map_or(if nonlocal { 15 } else { 200 }, |s| s.parse().expect("size"));
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed"));
    let start = Instant::now();
    let cfg = GaussNewtonConfig::default();

    let (domain, potential, coupling, points, n_m, n_v) = if nonlocal {
        let domain = TorusDomain::unit(2);
        let rule = gauss_legendre_rule(size, &[0.0, 0.0], &[1.0, 1.0])?;
        let mut points = domain.sample_uniform(50, seed);
        points.extend(rule.nodes.iter().cloned());
        let coupling = Coupling::NonlocalGaussian { sigma: Scalar::known(truth), rule, periodic: false };
        (domain, TrigPotential::benchmark_2d(), coupling, points, 50, 50)
    } else {
        let domain = TorusDomain::centered(2);
        let potential = TrigPotential::constant(0.0)
            .term(1.0, Trig::Cos, &[1.0, 0.0])
            .term(1.0, Trig::Sin, &[0.0, 1.0])
            .term(1.0, Trig::Sin, &[2.0, 0.0]);
        let points = domain.sample_uniform(size, seed);
        (domain, potential, Coupling::PowerLocal { alpha: Scalar::known(truth) }, points, 40, 20)
    };
    let env = EnvironmentSpec { potential, nu: 1.0, coupling: coupling.clone() };
    let reference = solve_forward_stationary(
        &env,
        &domain,
        domain.uniform_grid(30),
        KernelSpec::uniform(1.0),
        Penalties::default(),
        1e-8,
        &cfg,
    )?;
    println!("reference hbar {:.6} ({:.2?})", reference.fields.hbar, start.elapsed());

    let m_obs = synthesize_observations(&reference.fields.m, point_evals(&points[..n_m]), 1e-3, seed + 1000)?;
    let v_obs = synthesize_observations(&env.potential, point_evals(&points[..n_v]), 1e-3, seed + 2000)?;
    let unknown = match coupling {
        Coupling::PowerLocal { .. } => Coupling::PowerLocal { alpha: Scalar::unknown(1.0) },
        Coupling::NonlocalGaussian { rule, periodic, .. } => {
            Coupling::NonlocalGaussian { sigma: Scalar::unknown(1.0), rule, periodic }
        }
    };
    let mut spec = StationaryProblemSpec::new(domain.clone(), points, unknown, Scalar::known(1.0));
    spec.kernels = KernelSpec::new(0.6, 0.6, 1.0);
    spec.m_observations = m_obs.into_observations();
    spec.potential = PotentialSpec::Unknown(v_obs.into_observations());
    let problem = StationaryProblem::new(spec)?;
    let (state, diag) = problem.gauss_newton(&problem.initial_state(), &cfg)?;
    let fields = problem.reconstruct(&state)?;
    let grid = domain.uniform_grid(64);
    let l2 = |f: &dyn Fn(&[f64]) -> f64| (grid.iter().map(|x| f(x).powi(2)).sum::<f64>() / grid.len() as f64).sqrt();
    println!("iterations {} ({:?})", diag.iterations(), diag.stop);
    println!("parameter recovered {:.6} (true {truth})", fields.coupling);
    println!("hbar recovered {:.6} (reference {:.6})", fields.hbar, reference.fields.hbar);
    println!("L2 error m {:.3e}", l2(&|x| fields.m.value(x) - reference.fields.m.value(x)));
    println!("L2 error u {:.3e}", l2(&|x| fields.u.value(x) - reference.fields.u.value(x)));
    println!("elapsed {:.2?}", start.elapsed());
    Ok(())
}
