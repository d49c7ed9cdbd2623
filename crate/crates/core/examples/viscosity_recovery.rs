//! Recover an unknown viscosity together with `u`, `m`, `V` and `H̄` from
//! noisy observations of `m` and `V` on the two-dimensional torus.
//!
//! Usage: `cargo run --release --example viscosity_recovery [nu] [points] [observations] [seed] [lengthscale] [V observations] [known]`

use std::time::Instant;

use mfggp::functionals::Field;
use mfggp::reference::{
    point_evals, solve_forward_stationary, synthesize_observations, EnvironmentSpec, TrigPotential,
};
use mfggp::solver::GaussNewtonConfig;
use mfggp::stationary::{
    Coupling, KernelSpec, Penalties, PotentialSpec, Scalar, StationaryProblem, StationaryProblemSpec, TorusDomain,
};

fn main() -> mfggp::Result<()> {
    let mut args = std::env::args().skip(1);
    let nu: f64 = args.next().map_or(0.1, |s| s.parse().expect("nu"));
    let m: usize = args.next().map_or(200, |s| s.parse().expect("points"));
    let n_obs: usize = args.next().map_or(20, |s| s.parse().expect("observations"));
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed"));
    let lengthscale: f64 = args.next().map_or(1.41, |s| s.parse().expect("lengthscale"));
    let n_vobs: usize = args.next().map_or(n_obs, |s| s.parse().expect("V observations"));
    let nu_known = args.next().as_deref() == Some("known");
    let start = Instant::now();

    let domain = TorusDomain::centered(2);
    let env = EnvironmentSpec {
        potential: TrigPotential::benchmark_2d(),
        nu,
        coupling: Coupling::PowerLocal { alpha: Scalar::known(2.0) },
    };
    let cfg = GaussNewtonConfig::default();
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

    let points = domain.sample_uniform(m, seed);
    let observed = point_evals(&points[..n_obs]);
    let m_obs = synthesize_observations(&reference.fields.m, observed.clone(), 1e-3, seed + 1000)?;
    let v_obs = synthesize_observations(&env.potential, observed[..n_vobs].to_vec(), 1e-3, seed + 2000)?;

    let mut spec = StationaryProblemSpec::new(
        domain.clone(),
        points,
        Coupling::PowerLocal { alpha: Scalar::known(2.0) },
        if nu_known { Scalar::known(nu) } else { Scalar::unknown(1.0) },
    );
    spec.kernels = KernelSpec::uniform(lengthscale);
    spec.m_observations = m_obs.into_observations();
    spec.potential = PotentialSpec::Unknown(v_obs.into_observations());
    let problem = StationaryProblem::new(spec)?;
    let (state, diag) = problem.gauss_newton(&problem.initial_state(), &cfg)?;
    let fields = problem.reconstruct(&state)?;

    let grid = domain.uniform_grid(64);
    let l2 = |f: &(dyn Fn(&[f64]) -> f64 + Sync)| (grid.iter().map(|x| f(x).powi(2)).sum::<f64>() / grid.len() as f64).sqrt();
    let v = fields.v.as_ref().expect("potential is recovered");
    println!("iterations {} ({:?})", diag.iterations(), diag.stop);
    println!("nu recovered {:.6} (true {nu})", fields.nu);
    println!("hbar recovered {:.6} (reference {:.6})", fields.hbar, reference.fields.hbar);
    println!("L2 error m {:.3e}", l2(&|x| fields.m.value(x) - reference.fields.m.value(x)));
    println!("L2 error u {:.3e}", l2(&|x| fields.u.value(x) - reference.fields.u.value(x)));
    println!("L2 error V {:.3e}", l2(&|x| v.value(x) - env.potential.value(x)));
    println!(
        "L2 error V-hbar {:.3e}",
        l2(&|x| (v.value(x) - fields.hbar) - (env.potential.value(x) - reference.fields.hbar))
    );
    println!("elapsed {:.2?}", start.elapsed());
    Ok(())
}
