//! Time-dependent recovery on the 1D torus: a forward solve with the true
//! potential supplies the density, then `u`, `m` and a time-independent
//! `V` are recovered from a few noisy observations per time slice.
//!
//! Usage: `cargo run --release --example timedep_recovery [steps] [points] [seed]`

use std::time::Instant;

use mfggp::functionals::Field;
use mfggp::reference::{
    point_evals, solve_forward_timedep, synthesize_observations, EnvironmentSpec, TimeEnvironmentSpec, Trig,
    TrigPotential,
};
use mfggp::solver::GaussNewtonConfig;
use mfggp::stationary::{Coupling, KernelSpec, Observations, Scalar, TorusDomain};
use mfggp::timedep::{SliceData, TimeDependentProblem, TimeDependentProblemSpec, TimeObservations, TimePotential};

fn main() -> mfggp::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map_or(10, |s| s.parse().expect("steps"));
    let points: usize = args.next().map_or(30, |s| s.parse().expect("points"));
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed"));
    let start = Instant::now();
    let cfg = GaussNewtonConfig::default();

    let domain = TorusDomain::centered(1);
    let potential = TrigPotential::constant(0.0).term(2.0, Trig::Sin, &[1.0]).term(1.0, Trig::Cos, &[1.0]);
    let env = TimeEnvironmentSpec {
        environment: EnvironmentSpec {
            potential: potential.clone(),
            nu: 0.1,
            coupling: Coupling::PowerLocal { alpha: Scalar::known(2.0) },
        },
        horizon: 1.0,
        steps,
        terminal: TrigPotential::constant(0.0),
        initial: TrigPotential::constant(1.0),
    };
    let reference = solve_forward_timedep(&env, &domain, domain.uniform_grid(64), KernelSpec::uniform(1.0), 1e6, 1e-8, &cfg)?;
    let held_out = domain.sample_uniform(200, seed + 77);
    let worst = reference.residuals_at(&env, &held_out).iter().fold(0.0f64, |a, r| a.max(r.abs()));
    println!(
        "reference: {} iterations, held-out residual {worst:.2e} ({:.2?})",
        reference.diagnostics.iterations(),
        start.elapsed()
    );

    let pts = domain.sample_uniform(points, seed);
    let (n_m, n_v) = (5, 3);
    let functionals = point_evals(&pts[..n_m]);
    let slices = (0..=steps)
        .map(|k| {
            let o = synthesize_observations(&reference.fields.m[k], functionals.clone(), 1e-3, seed * 1000 + k as u64)?;
            Ok(SliceData { slice: k, data: o.noisy, noise: vec![1e-3; n_m] })
        })
        .collect::<mfggp::Result<Vec<_>>>()?;
    let v_obs = synthesize_observations(&potential, point_evals(&pts[..n_v]), 1e-3, seed * 1000 + 999)?;

    let mut spec = TimeDependentProblemSpec::new(
        domain.clone(),
        pts,
        1.0,
        steps,
        env.environment.coupling.clone(),
        Scalar::known(0.1),
        &env.terminal,
        &env.initial,
    );
    spec.kernels = KernelSpec::new(1.5, 1.5, 1.0);
    spec.m_observations = TimeObservations { functionals, slices };
    spec.potential = TimePotential::Shared(Observations::new(v_obs.functionals, v_obs.noisy, 1e-3));
    let problem = TimeDependentProblem::new(spec)?;
    let (state, diag) = problem.gauss_newton(&problem.initial_state(), &cfg)?;
    let fields = problem.reconstruct(&state)?;
    println!("inversion: {} iterations ({:?})", diag.iterations(), diag.stop);

    let rows = problem.residuals(&state)?;
    let n = problem.spec().collocation.len();
    let dt = problem.spec().dt();
    let boundary = rows[rows.len() - 2 * n..].iter().fold(0.0f64, |a, r| a.max(r.abs() * dt));
    println!("max terminal/initial residual {boundary:.2e}");
    println!("max pde residual {:.2e}", rows[..rows.len() - 2 * n].iter().fold(0.0f64, |a, r| a.max(r.abs())));

    let grid = domain.uniform_grid(128);
    let l2 = |f: &dyn Fn(&[f64]) -> f64| (grid.iter().map(|x| f(x).powi(2)).sum::<f64>() / grid.len() as f64).sqrt();
    let mean = |f: &dyn Field| grid.iter().map(|x| f.value(x)).sum::<f64>() / grid.len() as f64;
    let v = fields.potential(0).expect("recovered potential");
    println!("L2 error V {:.3e}", l2(&|x| v.value(x) - potential.value(x)));
    for k in 0..=steps {
        println!(
            "slice {k:>2}: mass {:.4} (reference {:.4}), L2 error m {:.2e}, u {:.2e}",
            mean(&fields.m[k]),
            mean(&reference.fields.m[k]),
            l2(&|x| fields.m[k].value(x) - reference.fields.m[k].value(x)),
            l2(&|x| fields.u[k].value(x) - reference.fields.u[k].value(x)),
        );
    }
    println!("elapsed {:.2?}", start.elapsed());
    Ok(())
}
