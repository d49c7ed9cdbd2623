//! Periodic covariance kernels on a torus and their analytic mixed partials.
//!
//! The kernel is the product over coordinates of
//!
//! ```text
//! k_d(x, y) = exp(-2 sin²(π (x_d - y_d) / P_d) / ℓ_d²)
//! ```
//!
//! Writing `b = 1/ℓ²` and `ω = 2π/P`, each factor is `exp(g(t))` with
//! `g(t) = b cos(ω t) - b` and `t = x_d - y_d`, so its derivatives in `t`
//! follow from the complete Bell polynomials in `g', g'', ...`. A derivative
//! in `y_d` is a derivative in `t` with a sign flip.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 4;

/// Largest per-coordinate derivative order the closed forms cover.
pub const MAX_ORDER: usize = 4;

/// A point of the domain. Coordinates beyond `dim` are ignored.
pub type Point = Vec<f64>;

/// Multi-index of partial derivative orders, one entry per coordinate.
pub type MultiIndex = [u8; MAX_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodicKernel {
    lengthscales: Vec<f64>,
    periods: Vec<f64>,
}

impl PeriodicKernel {
    pub fn new(lengthscales: Vec<f64>, periods: Vec<f64>) -> Result<Self> {
        if lengthscales.is_empty() || lengthscales.len() > MAX_DIM {
            return Err(Error::invalid(format!(
                "kernel dimension must be in 1..={MAX_DIM}, got {}",
                lengthscales.len()
            )));
        }
        if periods.len() != lengthscales.len() {
            return Err(Error::DimensionMismatch { expected: lengthscales.len(), got: periods.len() });
        }
        if lengthscales.iter().chain(&periods).any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("lengthscales and periods must be positive and finite"));
        }
        Ok(Self { lengthscales, periods })
    }

    /// Same lengthscale in every coordinate, unit periods.
    pub fn isotropic(dim: usize, lengthscale: f64) -> Result<Self> {
        Self::new(vec![lengthscale; dim], vec![1.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn periods(&self) -> &[f64] {
        &self.periods
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    /// `k(x, y)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(y)?;
        Ok(self.eval_unchecked(x, y))
    }

    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut acc = 0.0;
        for d in 0..self.dim() {
            let s = (std::f64::consts::PI * (x[d] - y[d]) / self.periods[d]).sin();
            acc -= 2.0 * s * s / (self.lengthscales[d] * self.lengthscales[d]);
        }
        acc.exp()
    }

    /// Derivatives of the one-dimensional factor for coordinate `d` at
    /// offset `t`, orders 0 through 4.
    fn factor_jet(&self, d: usize, t: f64) -> [f64; MAX_ORDER + 1] {
        let b = 1.0 / (self.lengthscales[d] * self.lengthscales[d]);
        let w = 2.0 * std::f64::consts::PI / self.periods[d];
        let (s, c) = (w * t).sin_cos();
        let f = (b * c - b).exp();
        let g1 = -b * w * s;
        let g2 = -b * w * w * c;
        let g3 = b * w * w * w * s;
        let g4 = b * w * w * w * w * c;
        [
            f,
            f * g1,
            f * (g2 + g1 * g1),
            f * (g3 + 3.0 * g1 * g2 + g1 * g1 * g1),
            f * (g4 + 4.0 * g1 * g3 + 3.0 * g2 * g2 + 6.0 * g1 * g1 * g2 + g1 * g1 * g1 * g1),
        ]
    }

    fn jets(&self, x: &[f64], y: &[f64]) -> [[f64; MAX_ORDER + 1]; MAX_DIM] {
        let mut jets = [[0.0; MAX_ORDER + 1]; MAX_DIM];
        for d in 0..self.dim() {
            jets[d] = self.factor_jet(d, x[d] - y[d]);
        }
        jets
    }

    /// `∂^ax_x ∂^ay_y k(x, y)` for explicit multi-indices.
    pub fn mixed_partial(&self, x: &[f64], ax: &[u8], y: &[f64], ay: &[u8]) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(y)?;
        let mut ma = [0u8; MAX_DIM];
        let mut mb = [0u8; MAX_DIM];
        for (d, (a, b)) in ax.iter().zip(ay).enumerate().take(self.dim()) {
            let order = (*a + *b) as usize;
            if order > MAX_ORDER {
                return Err(Error::UnsupportedDerivative { order, max: MAX_ORDER });
            }
            ma[d] = *a;
            mb[d] = *b;
        }
        let jets = self.jets(x, y);
        Ok(self.monomial(&jets, &ma, &mb))
    }

    #[inline]
    fn monomial(&self, jets: &[[f64; MAX_ORDER + 1]; MAX_DIM], ma: &MultiIndex, mb: &MultiIndex) -> f64 {
        let mut p = 1.0;
        for d in 0..self.dim() {
            let v = jets[d][(ma[d] + mb[d]) as usize];
            p *= if mb[d] % 2 == 1 { -v } else { v };
        }
        p
    }

    /// `(opA ⊗ opB) k (x, y)`, with `opA` acting on `x` and `opB` on `y`.
    pub fn deriv_eval(&self, op_a: DerivOp, x: &[f64], op_b: DerivOp, y: &[f64]) -> Result<f64> {
        self.check_point(x)?;
        self.check_point(y)?;
        op_a.validate(self.dim())?;
        op_b.validate(self.dim())?;
        Ok(self.deriv_eval_unchecked(op_a, x, op_b, y))
    }

    pub(crate) fn deriv_eval_unchecked(&self, op_a: DerivOp, x: &[f64], op_b: DerivOp, y: &[f64]) -> f64 {
        if op_a == DerivOp::Identity && op_b == DerivOp::Identity {
            return self.eval_unchecked(x, y);
        }
        let jets = self.jets(x, y);
        let dim = self.dim();
        let mut acc = 0.0;
        op_a.for_each_term(dim, |ca, ma| {
            op_b.for_each_term(dim, |cb, mb| {
                acc += ca * cb * self.monomial(&jets, ma, mb);
            });
        });
        acc
    }
}

/// A differential operator composed with a point evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DerivOp {
    Identity,
    Partial(usize),
    SecondPartial(usize, usize),
    Laplacian,
}

impl DerivOp {
    pub fn order(self) -> usize {
        match self {
            DerivOp::Identity => 0,
            DerivOp::Partial(_) => 1,
            DerivOp::SecondPartial(..) | DerivOp::Laplacian => 2,
        }
    }

    pub fn validate(self, dim: usize) -> Result<()> {
        let ok = match self {
            DerivOp::Identity | DerivOp::Laplacian => true,
            DerivOp::Partial(d) => d < dim,
            DerivOp::SecondPartial(d, e) => d < dim && e < dim,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("{self:?} references a coordinate outside dimension {dim}")))
        }
    }

    /// Expands the operator into `(coefficient, multi-index)` monomials.
    pub fn for_each_term(self, dim: usize, mut f: impl FnMut(f64, &MultiIndex)) {
        let mut m = [0u8; MAX_DIM];
        match self {
            DerivOp::Identity => f(1.0, &m),
            DerivOp::Partial(d) => {
                m[d] = 1;
                f(1.0, &m)
            }
            DerivOp::SecondPartial(d, e) => {
                m[d] += 1;
                m[e] += 1;
                f(1.0, &m)
            }
            DerivOp::Laplacian => {
                for d in 0..dim {
                    let mut md = [0u8; MAX_DIM];
                    md[d] = 2;
                    f(1.0, &md);
                }
            }
        }
    }
}
