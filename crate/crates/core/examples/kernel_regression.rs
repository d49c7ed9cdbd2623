//! GP regression on the 2D torus from values and Laplacians, then derivative
//! recovery at unseen points through the representer formula.
//!
//! Usage: `cargo run --release --example kernel_regression [points] [lengthscale] [seed]`

use std::f64::consts::PI;

use mfggp::functionals::{gauss_legendre_rule, LinearFunctional};
use mfggp::gram::GramSystem;
use mfggp::kernels::{DerivOp, PeriodicKernel};
use mfggp::stationary::TorusDomain;

fn f(x: &[f64]) -> f64 {
    (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos()
}

fn dfdx(x: &[f64]) -> f64 {
    2.0 * PI * (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).cos()
}

fn main() -> mfggp::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().map_or(80, |s| s.parse().expect("points"));
    let l: f64 = args.next().map_or(0.8, |s| s.parse().expect("lengthscale"));
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed"));

    let domain = TorusDomain::centered(2);
    let pts = domain.sample_uniform(n, seed);
    let mut features: Vec<LinearFunctional> = pts.iter().map(|p| LinearFunctional::PointEval(p.clone())).collect();
    features.extend(pts.iter().map(|p| LinearFunctional::point_deriv(p.clone(), DerivOp::Laplacian)));
    let data: Vec<f64> = pts.iter().map(|p| f(p)).chain(pts.iter().map(|p| -8.0 * PI * PI * f(p))).collect();

    let gram = GramSystem::new(PeriodicKernel::isotropic(2, l)?, features, 1e-10)?;
    let coef = gram.solve(&data)?;
    println!("features {} (nugget {:e})", gram.len(), gram.eta());

    let test = domain.sample_uniform(400, seed + 100);
    let (mut ev, mut ed) = (0.0f64, 0.0f64);
    for x in &test {
        ev = ev.max((gram.representer_eval(&coef, x, DerivOp::Identity)? - f(x)).abs());
        ed = ed.max((gram.representer_eval(&coef, x, DerivOp::Partial(0))? - dfdx(x)).abs());
    }
    println!("max error of f at 400 unseen points {ev:.3e}");
    println!("max error of df/dx                  {ed:.3e}");

    // the mean of f over the box is 0; integrate the recovered field by quadrature
    let rule = gauss_legendre_rule(20, &domain.lower, &domain.upper)?;
    let mean = rule.integrate(|x| gram.representer_eval(&coef, x, DerivOp::Identity).unwrap());
    println!("integral of the recovered field {mean:.3e}");
    Ok(())
}
