//! Forward solve of the stationary system with a known environment, the
//! reference for the two-dimensional inverse experiments.
//!
//! Usage: `cargo run --release --example forward_2d [points] [lengthscale] [nu] [grid]`

use std::time::Instant;

use mfggp::functionals::Field;
use mfggp::reference::{solve_forward_stationary, EnvironmentSpec, TrigPotential};
use mfggp::solver::GaussNewtonConfig;
use mfggp::stationary::{Coupling, KernelSpec, Penalties, Scalar, TorusDomain};

fn main() -> mfggp::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(400, |s| s.parse().expect("points"));
    let lengthscale: f64 = args.next().map_or(1.41, |s| s.parse().expect("lengthscale"));
    let nu: f64 = args.next().map_or(0.1, |s| s.parse().expect("nu"));
    let start = Instant::now();

    let env = EnvironmentSpec {
        potential: TrigPotential::benchmark_2d(),
        nu,
        coupling: Coupling::PowerLocal { alpha: Scalar::known(2.0) },
    };
    let domain = TorusDomain::centered(2);
    let samples = if args.next().as_deref() == Some("grid") {
        let side = (n as f64).sqrt().round() as usize;
        domain.uniform_grid(side)
    } else {
        domain.sample_uniform(n, 7)
    };
    let sol = solve_forward_stationary(
        &env,
        &domain,
        samples,
        KernelSpec::uniform(lengthscale),
        Penalties::default(),
        1e-8,
        &GaussNewtonConfig::default(),
    )?;
    let held_out = domain.sample_uniform(200, 99);
    let res = sol.residuals_at(&env, &held_out);
    let max_res = res.iter().fold(0.0f64, |a, r| a.max(r.abs()));
    let grid = domain.uniform_grid(64);
    let mass = grid.iter().map(|x| sol.fields.m.value(x)).sum::<f64>() / grid.len() as f64 * domain.volume();

    println!("iterations {} ({:?})", sol.diagnostics.iterations(), sol.diagnostics.stop);
    println!("hbar {:.6}", sol.fields.hbar);
    println!("held-out max residual {max_res:.3e}");
    println!("mass {mass:.6}");
    println!("elapsed {:.2?}", start.elapsed());
    Ok(())
}
