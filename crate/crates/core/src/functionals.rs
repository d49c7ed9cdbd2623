//! Bounded linear functionals used as GP features and observation operators,
//! plus tensor-product Gauss–Legendre rules for integral functionals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{DerivOp, Point};

/// Anything a functional can be applied to. Derivatives are supplied by the
/// implementor, not approximated.
pub trait Field {
    fn value(&self, x: &[f64]) -> f64;
    fn derivative(&self, x: &[f64], op: DerivOp) -> f64;
}

/// Derivative-order class of a feature; each class gets its own nugget scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Block {
    Value,
    FirstDerivative,
    SecondDerivative,
    Integral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LinearFunctional {
    PointEval(Point),
    PointDeriv { point: Point, op: DerivOp },
    /// `Σ wᵢ δ_{yᵢ}`.
    WeightedSum(Vec<(f64, Point)>),
}

impl LinearFunctional {
    pub fn point_deriv(point: Point, op: DerivOp) -> Self {
        if op == DerivOp::Identity {
            LinearFunctional::PointEval(point)
        } else {
            LinearFunctional::PointDeriv { point, op }
        }
    }

    pub fn block(&self) -> Block {
        match self {
            LinearFunctional::PointEval(_) => Block::Value,
            LinearFunctional::PointDeriv { op, .. } => match op.order() {
                0 => Block::Value,
                1 => Block::FirstDerivative,
                _ => Block::SecondDerivative,
            },
            LinearFunctional::WeightedSum(_) => Block::Integral,
        }
    }

    /// Calls `f(weight, point, op)` for each Dirac-type term.
    pub fn for_each_term(&self, mut f: impl FnMut(f64, &[f64], DerivOp)) {
        match self {
            LinearFunctional::PointEval(p) => f(1.0, p, DerivOp::Identity),
            LinearFunctional::PointDeriv { point, op } => f(1.0, point, *op),
            LinearFunctional::WeightedSum(terms) => {
                for (w, p) in terms {
                    f(*w, p, DerivOp::Identity)
                }
            }
        }
    }

    /// Dimension of every referenced point, or an error if they disagree.
    pub fn dim(&self) -> Result<usize> {
        let mut dim = None;
        let mut bad = false;
        self.for_each_term(|_, p, _| match dim {
            None => dim = Some(p.len()),
            Some(d) if d != p.len() => bad = true,
            _ => {}
        });
        match (dim, bad) {
            (Some(d), false) => Ok(d),
            (None, _) => Err(Error::invalid("empty weighted sum")),
            (Some(d), true) => Err(Error::invalid(format!("functional mixes point dimensions (first {d})"))),
        }
    }

    /// `[φ, g]`.
    pub fn apply<F: Field + ?Sized>(&self, g: &F) -> f64 {
        let mut acc = 0.0;
        self.for_each_term(|w, p, op| {
            acc += w * if op == DerivOp::Identity { g.value(p) } else { g.derivative(p, op) };
        });
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<Point>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(x)).sum()
    }

    /// The rule as the functional `m ↦ ∫ m`.
    pub fn as_functional(&self) -> LinearFunctional {
        LinearFunctional::WeightedSum(self.weights.iter().copied().zip(self.nodes.iter().cloned()).collect())
    }
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`, nodes ascending.
pub fn gauss_legendre_1d(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess for the i-th largest root
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre_with_derivative(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let (mut p0, mut p1) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Tensor-product Gauss–Legendre rule on the box `[lower, upper]`. The last
/// coordinate varies fastest in the node ordering.
pub fn gauss_legendre_rule(n_per_dim: usize, lower: &[f64], upper: &[f64]) -> Result<QuadratureRule> {
    if n_per_dim == 0 {
        return Err(Error::invalid("quadrature needs at least one node per dimension"));
    }
    if lower.len() != upper.len() || lower.is_empty() {
        return Err(Error::invalid("box corners must have equal, nonzero dimension"));
    }
    if lower.iter().zip(upper).any(|(a, b)| !(b > a)) {
        return Err(Error::invalid("empty integration box"));
    }
    let (x1, w1) = gauss_legendre_1d(n_per_dim);
    let dim = lower.len();
    let total = n_per_dim.pow(dim as u32);
    let mut nodes = Vec::with_capacity(total);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        let mut p = Vec::with_capacity(dim);
        let mut w = 1.0;
        for d in 0..dim {
            let half = 0.5 * (upper[d] - lower[d]);
            p.push(lower[d] + half * (x1[idx[d]] + 1.0));
            w *= half * w1[idx[d]];
        }
        nodes.push(p);
        weights.push(w);
        for d in (0..dim).rev() {
            idx[d] += 1;
            if idx[d] < n_per_dim {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Weight of `m(y)` in the Gaussian convolution `∫ e^{-|x-y|²/(2σ²)} m(y) dy`.
/// With `periods`, differences are wrapped to the nearest periodic image.
pub fn coupling_weight(sigma: f64, x: &[f64], y: &[f64], periods: Option<&[f64]>) -> f64 {
    (-squared_distance(x, y, periods) / (2.0 * sigma * sigma)).exp()
}

pub(crate) fn squared_distance(x: &[f64], y: &[f64], periods: Option<&[f64]>) -> f64 {
    x.iter()
        .zip(y)
        .enumerate()
        .map(|(d, (a, b))| {
            let mut t = a - b;
            if let Some(p) = periods {
                t -= p[d] * (t / p[d]).round();
            }
            t * t
        })
        .sum()
}

/// Quadrature approximation of `m ↦ ∫ e^{-|x-y|²/(2σ²)} m(y) dy`.
pub fn nonlocal_coupling_functional(
    sigma: f64,
    rule: &QuadratureRule,
    x: &[f64],
    periods: Option<&[f64]>,
) -> LinearFunctional {
    LinearFunctional::WeightedSum(
        rule.nodes
            .iter()
            .zip(&rule.weights)
            .map(|(y, w)| (w * coupling_weight(sigma, x, y, periods), y.clone()))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `g(x) = x²` in one dimension.
    struct Square;
    impl Field for Square {
        fn value(&self, x: &[f64]) -> f64 {
            x[0] * x[0]
        }
        fn derivative(&self, x: &[f64], op: DerivOp) -> f64 {
            match op {
                DerivOp::Identity => self.value(x),
                DerivOp::Partial(_) => 2.0 * x[0],
                _ => 2.0,
            }
        }
    }

    struct Constant(f64);
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

    #[test]
    fn apply_examples() {
        assert!((LinearFunctional::PointEval(vec![0.3]).apply(&Square) - 0.09).abs() < 1e-15);
        let d2 = LinearFunctional::point_deriv(vec![0.3], DerivOp::SecondPartial(0, 0));
        assert_eq!(d2.apply(&Square), 2.0);
        let rule = gauss_legendre_rule(5, &[0.0], &[1.0]).unwrap();
        assert!((rule.as_functional().apply(&Constant(1.0)) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn two_point_rule() {
        let rule = gauss_legendre_rule(2, &[-1.0], &[1.0]).unwrap();
        let r = 1.0 / 3f64.sqrt();
        assert!((rule.nodes[0][0] + r).abs() < 1e-15 && (rule.nodes[1][0] - r).abs() < 1e-15);
        assert!((rule.weights[0] - 1.0).abs() < 1e-15 && (rule.weights[1] - 1.0).abs() < 1e-15);
        assert!((rule.integrate(|x| x[0] * x[0]) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn nine_hundred_nodes() {
        let rule = gauss_legendre_rule(30, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(rule.len(), 900);
        assert!((rule.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(rule.weights.iter().all(|w| *w > 0.0));
    }

    #[test]
    fn large_rule_weights() {
        let (x, w) = gauss_legendre_1d(512);
        assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-12);
        assert!(x.windows(2).all(|p| p[0] < p[1]));
        // ∫ cos(πx/2) over [-1,1] = 4/π
        let i: f64 = x.iter().zip(&w).map(|(x, w)| w * (std::f64::consts::FRAC_PI_2 * x).cos()).sum();
        assert!((i - 4.0 / std::f64::consts::PI).abs() < 1e-13);
    }

    #[test]
    fn empty_box_rejected() {
        assert!(gauss_legendre_rule(3, &[0.0], &[0.0]).is_err());
        assert!(gauss_legendre_rule(0, &[0.0], &[1.0]).is_err());
    }

    #[test]
    fn coupling_linear_and_flat_limit() {
        let rule = gauss_legendre_rule(8, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let f = nonlocal_coupling_functional(0.5, &rule, &[0.2, 0.7], None);
        assert!((f.apply(&Constant(2.0)) - 2.0 * f.apply(&Constant(1.0))).abs() < 1e-15);
        let flat = nonlocal_coupling_functional(1e6, &rule, &[0.5, 0.5], None);
        assert!((flat.apply(&Constant(1.0)) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn coupling_weights_bounded_by_rule() {
        let rule = gauss_legendre_rule(6, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let LinearFunctional::WeightedSum(terms) = nonlocal_coupling_functional(0.3, &rule, &[0.9, 0.1], None) else {
            unreachable!()
        };
        for ((w, _), q) in terms.iter().zip(&rule.weights) {
            assert!(*w > 0.0 && w <= q);
        }
    }

    #[test]
    fn periodic_distance_wraps() {
        let d = squared_distance(&[0.05], &[0.95], Some(&[1.0]));
        assert!((d - 0.01).abs() < 1e-15);
        let d = squared_distance(&[0.05], &[0.95], None);
        assert!((d - 0.81).abs() < 1e-15);
    }
}
