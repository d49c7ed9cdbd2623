//! Operator-valued Gram matrices, block-diagonal nugget, Cholesky factor.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::functionals::{Block, LinearFunctional};
use crate::kernels::{DerivOp, PeriodicKernel};

/// Default nugget scale.
pub const DEFAULT_NUGGET: f64 = 1e-8;

/// Bilinear application of two functionals to the kernel.
pub fn kernel_bilinear(kernel: &PeriodicKernel, a: &LinearFunctional, b: &LinearFunctional) -> f64 {
    let mut acc = 0.0;
    a.for_each_term(|wa, pa, opa| {
        b.for_each_term(|wb, pb, opb| {
            acc += wa * wb * kernel.deriv_eval_unchecked(opa, pa, opb, pb);
        });
    });
    acc
}

fn check_features(kernel: &PeriodicKernel, features: &[LinearFunctional]) -> Result<()> {
    for f in features {
        let d = f.dim()?;
        if d != kernel.dim() {
            return Err(Error::DimensionMismatch { expected: kernel.dim(), got: d });
        }
        if let LinearFunctional::PointDeriv { op, .. } = f {
            op.validate(kernel.dim())?;
        }
    }
    Ok(())
}

/// `K(φ, φ)`.
pub fn assemble(kernel: &PeriodicKernel, features: &[LinearFunctional]) -> Result<DMatrix<f64>> {
    check_features(kernel, features)?;
    let n = features.len();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| kernel_bilinear(kernel, &features[i], &features[j])).collect())
        .collect();
    let mut m = DMatrix::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (k, v) in row.into_iter().enumerate() {
            m[(i, i + k)] = v;
            m[(i + k, i)] = v;
        }
    }
    Ok(m)
}

/// `K_op(x, φ)`: the operator acts on the first kernel argument.
pub fn cross_vector(kernel: &PeriodicKernel, x: &[f64], op: DerivOp, features: &[LinearFunctional]) -> Vec<f64> {
    features
        .iter()
        .map(|f| {
            let mut acc = 0.0;
            f.for_each_term(|w, p, opb| acc += w * kernel.deriv_eval_unchecked(op, x, opb, p));
            acc
        })
        .collect()
}

/// Diagonal of `ηR`: within each block, η times the block's largest diagonal entry.
pub fn nugget_diagonal(matrix: &DMatrix<f64>, blocks: &[Block], eta: f64) -> Vec<f64> {
    let n = matrix.nrows();
    if eta == 0.0 {
        return vec![0.0; n];
    }
    let mut scale = std::collections::BTreeMap::<Block, f64>::new();
    for (i, b) in blocks.iter().enumerate() {
        let e = scale.entry(*b).or_insert(0.0);
        *e = e.max(matrix[(i, i)]);
    }
    blocks.iter().map(|b| eta * scale[b]).collect()
}

/// `matrix + ηR`.
pub fn add_nugget(matrix: &DMatrix<f64>, blocks: &[Block], eta: f64) -> DMatrix<f64> {
    let jitter = nugget_diagonal(matrix, blocks, eta);
    let mut out = matrix.clone();
    for (i, j) in jitter.into_iter().enumerate() {
        out[(i, i)] += j;
    }
    out
}

/// Lower Cholesky factor stored row-major.
#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = 4 * c;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

impl Cholesky {
    /// Factorizes a symmetric positive-definite matrix, reading its lower triangle.
    ///
    /// Blocked right-looking variant: factor a diagonal block, solve the panel
    /// below it, then subtract the panel's outer product from the trailing
    /// lower triangle with GEMM, one column block at a time.
    pub fn factorize(matrix: &DMatrix<f64>) -> Result<Self> {
        const NB: usize = 96;
        let n = matrix.nrows();
        if matrix.ncols() != n {
            return Err(Error::SizeMismatch { expected: n, got: matrix.ncols() });
        }
        let mut a = matrix.clone();
        for k0 in (0..n).step_by(NB) {
            let k1 = (k0 + NB).min(n);
            // diagonal block, column by column
            for j in k0..k1 {
                let mut d = a[(j, j)];
                for p in k0..j {
                    d -= a[(j, p)] * a[(j, p)];
                }
                if !(d > 0.0) || !d.is_finite() {
                    return Err(Error::NotPositiveDefinite { pivot: j, value: d });
                }
                let d = d.sqrt();
                a[(j, j)] = d;
                for i in j + 1..n {
                    let mut s = a[(i, j)];
                    for p in k0..j {
                        s -= a[(i, p)] * a[(j, p)];
                    }
                    a[(i, j)] = s / d;
                }
            }
            if k1 == n {
                break;
            }
            let panel = a.view((k1, k0), (n - k1, k1 - k0)).clone_owned();
            for j0 in (k1..n).step_by(NB) {
                let j1 = (j0 + NB).min(n);
                let lhs = panel.rows(j0 - k1, n - j0);
                let rhs = panel.rows(j0 - k1, j1 - j0).transpose();
                a.view_mut((j0, j0), (n - j0, j1 - j0)).gemm(-1.0, &lhs, &rhs, 1.0);
            }
        }
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            for i in j..n {
                l[i * n + j] = a[(i, j)];
            }
        }
        Ok(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if j > i {
            0.0
        } else {
            self.l[i * self.n + j]
        }
    }

    pub fn lower(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.entry(i, j))
    }

    /// Solves `L y = b` in place.
    pub fn solve_lower_in_place(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            b[i] = (b[i] - dot(row, &b[..i])) / self.l[i * n + i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    pub fn solve_upper_in_place(&self, y: &mut [f64]) {
        let n = self.n;
        for i in (0..n).rev() {
            let xi = y[i] / self.l[i * n + i];
            y[i] = xi;
            let row = &self.l[i * n..i * n + i];
            for (yk, lik) in y[..i].iter_mut().zip(row) {
                *yk -= lik * xi;
            }
        }
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = b.to_vec();
        self.solve_lower_in_place(&mut x);
        self.solve_upper_in_place(&mut x);
        x
    }

    /// `bᵀ A⁻¹ b = |L⁻¹ b|²`.
    pub fn quadratic_form(&self, b: &[f64]) -> f64 {
        let mut y = b.to_vec();
        self.solve_lower_in_place(&mut y);
        y.iter().map(|v| v * v).sum()
    }

    /// Solves `A X = B` column by column.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            let mut v: Vec<f64> = col.iter().copied().collect();
            self.solve_lower_in_place(&mut v);
            self.solve_upper_in_place(&mut v);
            col.copy_from_slice(&v);
        }
        out
    }
}

/// A factorized, nugget-regularized Gram matrix over a fixed feature list.
#[derive(Debug, Clone)]
pub struct GramSystem {
    kernel: PeriodicKernel,
    features: Vec<LinearFunctional>,
    blocks: Vec<Block>,
    matrix: DMatrix<f64>,
    eta: f64,
    jitter: Vec<f64>,
    factor: Cholesky,
}

impl GramSystem {
    pub fn new(kernel: PeriodicKernel, features: Vec<LinearFunctional>, eta: f64) -> Result<Self> {
        if !(eta >= 0.0) {
            return Err(Error::invalid("nugget must be nonnegative"));
        }
        let matrix = assemble(&kernel, &features)?;
        let blocks: Vec<Block> = features.iter().map(LinearFunctional::block).collect();
        let jitter = nugget_diagonal(&matrix, &blocks, eta);
        let mut reg = matrix.clone();
        for (i, j) in jitter.iter().enumerate() {
            reg[(i, i)] += j;
        }
        let factor = Cholesky::factorize(&reg)?;
        Ok(Self { kernel, features, blocks, matrix, eta, jitter, factor })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn kernel(&self) -> &PeriodicKernel {
        &self.kernel
    }

    pub fn features(&self) -> &[LinearFunctional] {
        &self.features
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// The Gram matrix without nugget.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Diagonal of `ηR`.
    pub fn jitter(&self) -> &[f64] {
        &self.jitter
    }

    pub fn factor(&self) -> &Cholesky {
        &self.factor
    }

    pub fn regularized(&self) -> DMatrix<f64> {
        let mut m = self.matrix.clone();
        for (i, j) in self.jitter.iter().enumerate() {
            m[(i, i)] += j;
        }
        m
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.len() {
            return Err(Error::SizeMismatch { expected: self.len(), got: z.len() });
        }
        Ok(())
    }

    /// `zᵀ (K + ηR)⁻¹ z`.
    pub fn quadratic_form(&self, z: &[f64]) -> Result<f64> {
        self.check_len(z)?;
        Ok(self.factor.quadratic_form(z))
    }

    /// `(K + ηR)⁻¹ z`, the representer coefficients of the latent values `z`.
    pub fn solve(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z)?;
        Ok(self.factor.solve(z))
    }

    /// `(K + ηR) v`.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let x = DVector::from_column_slice(v);
        let mut y = &self.matrix * x;
        for (i, j) in self.jitter.iter().enumerate() {
            y[i] += j * v[i];
        }
        y.as_slice().to_vec()
    }

    /// `Σᵢ cᵢ (op ⊗ φᵢ) k (x, ·)`.
    pub fn representer_eval(&self, coefficients: &[f64], x: &[f64], op: DerivOp) -> Result<f64> {
        self.check_len(coefficients)?;
        if x.len() != self.kernel.dim() {
            return Err(Error::DimensionMismatch { expected: self.kernel.dim(), got: x.len() });
        }
        op.validate(self.kernel.dim())?;
        Ok(cross_vector(&self.kernel, x, op, &self.features).iter().zip(coefficients).map(|(k, c)| k * c).sum())
    }

    /// Writes `N`, `η`, block labels, then the row-major Gram matrix (all little-endian).
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(GRAM_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&self.eta.to_le_bytes())?;
        let labels: Vec<u8> = self.blocks.iter().map(|b| *b as u8).collect();
        w.write_all(&labels)?;
        for i in 0..self.len() {
            for j in 0..self.len() {
                w.write_all(&self.matrix[(i, j)].to_le_bytes())?;
            }
        }
        Ok(())
    }
}

const GRAM_MAGIC: &[u8; 8] = b"MFGGRAM1";

/// Contents of a Gram dump.
#[derive(Debug, Clone, PartialEq)]
pub struct GramDump {
    pub eta: f64,
    pub blocks: Vec<Block>,
    pub matrix: DMatrix<f64>,
}

pub fn read_dump<R: Read>(mut r: R) -> Result<GramDump> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != GRAM_MAGIC {
        return Err(Error::invalid("not a Gram dump"));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let eta = f64::from_le_bytes(b8);
    let mut labels = vec![0u8; n];
    r.read_exact(&mut labels)?;
    let blocks = labels
        .into_iter()
        .map(|l| match l {
            0 => Ok(Block::Value),
            1 => Ok(Block::FirstDerivative),
            2 => Ok(Block::SecondDerivative),
            3 => Ok(Block::Integral),
            _ => Err(Error::invalid(format!("unknown block label {l}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut matrix = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            r.read_exact(&mut b8)?;
            matrix[(i, j)] = f64::from_le_bytes(b8);
        }
    }
    Ok(GramDump { eta, blocks, matrix })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k1() -> PeriodicKernel {
        PeriodicKernel::isotropic(1, 1.41).unwrap()
    }

    #[test]
    fn single_and_duplicated_dirac() {
        let m = assemble(&k1(), &[LinearFunctional::PointEval(vec![0.2])]).unwrap();
        assert_eq!(m[(0, 0)], 1.0);
        let f = LinearFunctional::PointEval(vec![0.2]);
        let m = assemble(&k1(), &[f.clone(), f]).unwrap();
        assert!(m.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn two_point_gram() {
        let feats = [LinearFunctional::PointEval(vec![0.0]), LinearFunctional::PointEval(vec![0.5])];
        let m = assemble(&k1(), &feats).unwrap();
        let off = k1().eval(&[0.0], &[0.5]).unwrap();
        assert_eq!(m[(0, 1)], off);
        assert!((off - 0.365684).abs() < 1e-6);
        assert_eq!(m[(0, 0)], 1.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(assemble(&k1(), &[LinearFunctional::PointEval(vec![0.0, 1.0])]).is_err());
    }

    #[test]
    fn nugget_rules() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0]));
        assert_eq!(add_nugget(&m, &[Block::Value, Block::Value], 0.0), m);
        let r = add_nugget(&m, &[Block::Value, Block::Value], 1e-2);
        assert!((r[(0, 0)] - 4.04).abs() < 1e-14 && (r[(1, 1)] - 1.04).abs() < 1e-14);
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 100.0]));
        let j = nugget_diagonal(&m, &[Block::Value, Block::SecondDerivative], 1e-8);
        assert!((j[0] - 1e-8).abs() < 1e-22 && (j[1] - 1e-6).abs() < 1e-20);
    }

    #[test]
    fn cholesky_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert_eq!(Cholesky::factorize(&id).unwrap().lower(), id);
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let l = Cholesky::factorize(&a).unwrap();
        assert!((l.entry(0, 0) - 2f64.sqrt()).abs() < 1e-15);
        assert!((l.entry(1, 0) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((l.entry(1, 1) - 1.5f64.sqrt()).abs() < 1e-15);
        assert!((l.quadratic_form(&[1.0, 1.0]) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(l.quadratic_form(&[0.0, 0.0]), 0.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(Cholesky::factorize(&bad), Err(Error::NotPositiveDefinite { pivot: 1, .. })));
    }

    #[test]
    fn one_point_representer() {
        let eta = 1e-8;
        let y = 1.7;
        let sys = GramSystem::new(k1(), vec![LinearFunctional::PointEval(vec![0.1])], eta).unwrap();
        let c = sys.solve(&[y]).unwrap();
        let at = sys.representer_eval(&c, &[0.1], DerivOp::Identity).unwrap();
        assert!((at - y).abs() <= eta * y.abs() + 1e-15);
        let far = sys.representer_eval(&c, &[0.6], DerivOp::Identity).unwrap();
        let expect = y * k1().eval(&[0.0], &[0.5]).unwrap() / (1.0 + eta);
        assert!((far - expect).abs() < 1e-14);
        assert_eq!(sys.representer_eval(&[0.0], &[0.3], DerivOp::Partial(0)).unwrap(), 0.0);
        assert!(sys.quadratic_form(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn dump_round_trip() {
        let feats = vec![
            LinearFunctional::PointEval(vec![0.0]),
            LinearFunctional::point_deriv(vec![0.3], DerivOp::Partial(0)),
        ];
        let sys = GramSystem::new(k1(), feats, 1e-6).unwrap();
        let mut buf = Vec::new();
        sys.dump(&mut buf).unwrap();
        let back = read_dump(&buf[..]).unwrap();
        assert_eq!(back.eta, 1e-6);
        assert_eq!(back.blocks, vec![Block::Value, Block::FirstDerivative]);
        assert_eq!(&back.matrix, sys.matrix());
    }
}
