//! Gauss–Newton with Armijo backtracking for objectives of the form
//!
//! ```text
//! f(x) = Σ_b x_bᵀ K_b⁻¹ x_b + Σ_j λ_j θ_j² + |r(x)|²
//! ```
//!
//! where the `x_b` are latent blocks with (nugget-regularized) Gram matrices
//! `K_b`, the `θ_j` are the remaining free scalars, and `r` stacks the
//! weighted observation, normalization and PDE residuals.
//!
//! Each step linearizes `r ≈ J x - e` and minimizes the resulting quadratic.
//! Splitting `J = [B C]` into prior and free columns, the `x_b` part of the
//! minimizer is `K Bᵀ y` with `y = S⁻¹ (e - C θ)`, `S = I + B K Bᵀ`, so the
//! only dense factorization per step has the size of the residual vector.
//!
//! When the full step fails the Armijo test, a few halvings along the same
//! direction are tried. If those fail too, the step is recomputed with
//! Levenberg–Marquardt damping `μ` measured in the prior metric (the blocks
//! see `S = I + B K Bᵀ/(1+μ)`, the free scalars a unit metric), raising `μ`
//! tenfold until a step is accepted. Only after the largest damping fails
//! does the damped step backtrack further.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gram::{Cholesky, GramSystem};

/// Sparse Jacobian row: `(latent index, ∂r/∂x)`.
pub type SparseRow = Vec<(usize, f64)>;

/// A latent block governed by a GP prior.
#[derive(Debug, Clone, Copy)]
pub struct PriorBlock<'a> {
    pub offset: usize,
    pub gram: &'a GramSystem,
}

pub trait ResidualModel: Sync {
    /// Total number of latent variables.
    fn dim(&self) -> usize;
    /// Blocks with GP priors; they must not overlap.
    fn prior_blocks(&self) -> Vec<PriorBlock<'_>>;
    /// Latent indices outside every prior block, each with a quadratic prior weight `λ ≥ 0`.
    fn free_priors(&self) -> Vec<(usize, f64)>;
    fn residuals(&self, x: &[f64]) -> Vec<f64>;
    fn jacobian(&self, x: &[f64]) -> Vec<SparseRow>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaussNewtonConfig {
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Sufficient-decrease constant of the Armijo test.
    pub armijo_c: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Halvings of the undamped step tried before switching to damping.
    pub direct_backtracks: usize,
    /// First Levenberg–Marquardt damping tried after a rejected full step.
    pub initial_damping: f64,
    pub max_damping_increases: usize,
}

impl Default for GaussNewtonConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            rel_tol: 1e-10,
            armijo_c: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
            direct_backtracks: 4,
            initial_damping: 1e-3,
            max_damping_increases: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// The linearized model predicts a relative decrease below tolerance.
    Stationary,
    /// The last accepted step decreased the objective by less than tolerance.
    SmallDecrease,
    MaxIterations,
    /// No step length passed the Armijo test.
    LineSearchStalled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Objective at the start and after every accepted step.
    pub objective: Vec<f64>,
    /// `|r(x)|` at the start and after every accepted step.
    pub residual_norm: Vec<f64>,
    pub step_lengths: Vec<f64>,
    /// Damping level of every accepted step (zero for a plain Gauss–Newton step).
    pub damping: Vec<f64>,
    pub stop: StopReason,
}

impl Diagnostics {
    /// Number of accepted steps.
    pub fn iterations(&self) -> usize {
        self.step_lengths.len()
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective.last().expect("objective history is never empty")
    }
}

fn check_layout<M: ResidualModel + ?Sized>(model: &M) -> Result<()> {
    let mut owner = vec![false; model.dim()];
    for b in model.prior_blocks() {
        for i in b.offset..b.offset + b.gram.len() {
            if i >= owner.len() || owner[i] {
                return Err(Error::invalid("prior blocks overlap or exceed the latent vector"));
            }
            owner[i] = true;
        }
    }
    for (j, w) in model.free_priors() {
        if j >= owner.len() || owner[j] || !(w >= 0.0) {
            return Err(Error::invalid("free latent overlaps a prior block or has a negative weight"));
        }
        owner[j] = true;
    }
    if let Some(i) = owner.iter().position(|o| !o) {
        return Err(Error::invalid(format!("latent {i} is neither in a prior block nor free")));
    }
    Ok(())
}

/// Prior part of the objective.
fn prior_value<M: ResidualModel + ?Sized>(model: &M, x: &[f64]) -> f64 {
    let blocks: f64 = model
        .prior_blocks()
        .par_iter()
        .map(|b| b.gram.factor().quadratic_form(&x[b.offset..b.offset + b.gram.len()]))
        .sum();
    blocks + model.free_priors().iter().map(|(j, w)| w * x[*j] * x[*j]).sum::<f64>()
}

pub fn objective<M: ResidualModel + ?Sized>(model: &M, x: &[f64]) -> f64 {
    let r = model.residuals(x);
    prior_value(model, x) + r.iter().map(|v| v * v).sum::<f64>()
}

/// Exact gradient of [`objective`] assembled from the residual Jacobian.
pub fn gradient<M: ResidualModel + ?Sized>(model: &M, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; model.dim()];
    for b in model.prior_blocks() {
        let kinv = b.gram.factor().solve(&x[b.offset..b.offset + b.gram.len()]);
        for (k, v) in kinv.into_iter().enumerate() {
            g[b.offset + k] += 2.0 * v;
        }
    }
    for (j, w) in model.free_priors() {
        g[j] += 2.0 * w * x[j];
    }
    let r = model.residuals(x);
    for (row, ri) in model.jacobian(x).iter().zip(&r) {
        for (c, v) in row {
            g[*c] += 2.0 * v * ri;
        }
    }
    g
}

struct Step {
    x_new: Vec<f64>,
    /// Value of the undamped linearized objective at `x_new`.
    model_value: f64,
}

/// Everything about the linearization at one iterate that does not depend
/// on the damping level.
struct Linearization {
    x0: Vec<f64>,
    offsets: Vec<(usize, usize)>,
    free: Vec<usize>,
    e: Vec<f64>,
    c_mat: DMatrix<f64>,
    b_rows: Vec<Vec<Vec<(usize, f64)>>>,
    t_blocks: Vec<Vec<Vec<f64>>>,
    /// `Σ_b B_b K_b B_bᵀ`.
    bkb: DMatrix<f64>,
}

fn linearize<M: ResidualModel + ?Sized>(model: &M, x0: &[f64], iteration: usize) -> Result<Linearization> {
    let blocks = model.prior_blocks();
    let free = model.free_priors();
    let r0 = model.residuals(x0);
    let jac = model.jacobian(x0);
    if jac.len() != r0.len() {
        return Err(Error::Solver { iteration, reason: "Jacobian and residual sizes differ".into() });
    }

    // owner lookup: latent -> (block, local index) or free slot
    enum Slot {
        Block(usize, usize),
        Free(usize),
    }
    let mut slot: Vec<Option<Slot>> = (0..model.dim()).map(|_| None).collect();
    for (bi, b) in blocks.iter().enumerate() {
        for k in 0..b.gram.len() {
            slot[b.offset + k] = Some(Slot::Block(bi, k));
        }
    }
    for (fi, (j, _)) in free.iter().enumerate() {
        slot[*j] = Some(Slot::Free(fi));
    }

    let weighted: Vec<(usize, f64)> =
        free.iter().enumerate().filter(|(_, (_, w))| *w > 0.0).map(|(fi, (_, w))| (fi, w.sqrt())).collect();
    let n_rows = r0.len() + weighted.len();
    let p = free.len();

    // e = J x0 - r0, rows split by owner
    let mut e = vec![0.0; n_rows];
    let mut c_mat = DMatrix::<f64>::zeros(n_rows, p);
    let mut b_rows: Vec<Vec<Vec<(usize, f64)>>> = vec![vec![Vec::new(); n_rows]; blocks.len()];
    for (ri, row) in jac.iter().enumerate() {
        let mut jx = 0.0;
        for (c, v) in row {
            jx += v * x0[*c];
            match slot[*c] {
                Some(Slot::Block(bi, k)) => b_rows[bi][ri].push((k, *v)),
                Some(Slot::Free(fi)) => c_mat[(ri, fi)] += v,
                None => return Err(Error::Solver { iteration, reason: format!("Jacobian column {c} out of range") }),
            }
        }
        e[ri] = jx - r0[ri];
    }
    for (k, (fi, sw)) in weighted.iter().enumerate() {
        c_mat[(r0.len() + k, *fi)] = *sw;
    }

    // B K Bᵀ, keeping T_b = K_b B_bᵀ for the back-substitution
    let mut bkb = DMatrix::<f64>::zeros(n_rows, n_rows);
    let mut t_blocks: Vec<Vec<Vec<f64>>> = Vec::with_capacity(blocks.len());
    for (bi, b) in blocks.iter().enumerate() {
        let rows = &b_rows[bi];
        let k = b.gram.matrix();
        let jitter = b.gram.jitter();
        let n = b.gram.len();
        let t: Vec<Vec<f64>> = rows
            .par_iter()
            .map(|row| {
                let mut col = vec![0.0; n];
                for (c, v) in row {
                    let kc = k.column(*c);
                    for (o, kv) in col.iter_mut().zip(kc.iter()) {
                        *o += v * kv;
                    }
                    col[*c] += v * jitter[*c];
                }
                col
            })
            .collect();
        let contrib: Vec<Vec<(usize, f64)>> = (0..n_rows)
            .into_par_iter()
            .map(|r| {
                if rows[r].is_empty() {
                    return Vec::new();
                }
                let tr = &t[r];
                (0..n_rows)
                    .filter(|s2| !rows[*s2].is_empty())
                    .map(|s2| (s2, rows[s2].iter().map(|(c, v)| v * tr[*c]).sum()))
                    .collect()
            })
            .collect();
        for (r, entries) in contrib.into_iter().enumerate() {
            for (s2, v) in entries {
                bkb[(r, s2)] += v;
            }
        }
        t_blocks.push(t);
    }
    Ok(Linearization {
        x0: x0.to_vec(),
        offsets: blocks.iter().map(|b| (b.offset, b.gram.len())).collect(),
        free: free.iter().map(|(j, _)| *j).collect(),
        e,
        c_mat,
        b_rows,
        t_blocks,
        bkb,
    })
}

impl Linearization {
    /// Minimizes the linearized objective plus the damping term
    /// `μ (w - w₀)ᵀ K⁻¹ (w - w₀) + μ Σ_j (θ_j - θ₀_j)²`.
    ///
    /// Completing the square turns the block damping into the prior
    /// `(1 + μ) (w - a)ᵀ K⁻¹ (w - a)` with `a = μ w₀ / (1 + μ)`, so the
    /// residual-space solve only sees `K / (1 + μ)` and a shifted right-hand side.
    fn solve(&self, mu: f64, iteration: usize) -> Result<Step> {
        let n_rows = self.e.len();
        let p = self.free.len();
        let scale = 1.0 / (1.0 + mu);
        let shift = mu * scale;

        let mut s = &self.bkb * scale;
        for i in 0..n_rows {
            s[(i, i)] += 1.0;
        }
        let s_fac = Cholesky::factorize(&s)
            .map_err(|err| Error::Solver { iteration, reason: format!("normal-equation factorization: {err}") })?;

        // e' = e - B a
        let mut e = self.e.clone();
        if shift > 0.0 {
            for (bi, (off, _)) in self.offsets.iter().enumerate() {
                for (r, row) in self.b_rows[bi].iter().enumerate() {
                    e[r] -= row.iter().map(|(k, v)| v * shift * self.x0[off + k]).sum::<f64>();
                }
            }
        }

        // free scalars from the reduced problem (e' - Cθ)ᵀ S⁻¹ (e' - Cθ) + damping
        let theta = if p > 0 {
            let sinv_c = s_fac.solve_matrix(&self.c_mat);
            let mut g = self.c_mat.transpose() * &sinv_c;
            let sinv_e = DVector::from_vec(s_fac.solve(&e));
            let mut h = self.c_mat.transpose() * sinv_e;
            if mu > 0.0 {
                for (fi, j) in self.free.iter().enumerate() {
                    g[(fi, fi)] += mu;
                    h[fi] += mu * self.x0[*j];
                }
            }
            let diag_max = (0..p).map(|i| g[(i, i)].abs()).fold(0.0, f64::max).max(1e-300);
            let mut ridge = 0.0;
            let mut sol = None;
            for _ in 0..8 {
                if let Some(ch) = g.clone().cholesky() {
                    sol = Some(ch.solve(&h));
                    break;
                }
                ridge = if ridge == 0.0 { 1e-12 * diag_max } else { ridge * 100.0 };
                for i in 0..p {
                    g[(i, i)] += ridge;
                }
            }
            sol.ok_or_else(|| Error::Solver { iteration, reason: "scalar subproblem is singular".into() })?
        } else {
            DVector::zeros(0)
        };

        let rhs = DVector::from_vec(e) - &self.c_mat * &theta;
        let y = s_fac.solve(rhs.as_slice());
        let model_value: f64 = rhs.iter().zip(&y).map(|(a, b)| a * b).sum();

        let mut x_new = self.x0.clone();
        for (bi, (off, n)) in self.offsets.iter().enumerate() {
            let mut w: Vec<f64> = self.x0[*off..off + n].iter().map(|v| shift * v).collect();
            for (r, tr) in self.t_blocks[bi].iter().enumerate() {
                if y[r] != 0.0 && !self.b_rows[bi][r].is_empty() {
                    let c = scale * y[r];
                    for (o, v) in w.iter_mut().zip(tr) {
                        *o += c * v;
                    }
                }
            }
            x_new[*off..off + n].copy_from_slice(&w);
        }
        for (fi, j) in self.free.iter().enumerate() {
            x_new[*j] = theta[fi];
        }
        Ok(Step { x_new, model_value })
    }
}

/// Runs Gauss–Newton from `x0`.
///
/// Each iteration first tries the full Gauss–Newton step and a few halvings
/// of it. If they all fail the Armijo test, the step is recomputed with
/// Levenberg–Marquardt damping in the prior metric (increasing tenfold per
/// attempt, starting a tenth above the last accepted damping); if every
/// damped step also fails, the most damped direction is backtracked.
pub fn gauss_newton<M: ResidualModel + ?Sized>(
    model: &M,
    x0: &[f64],
    config: &GaussNewtonConfig,
) -> Result<(Vec<f64>, Diagnostics)> {
    check_layout(model)?;
    if x0.len() != model.dim() {
        return Err(Error::SizeMismatch { expected: model.dim(), got: x0.len() });
    }
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let eval = |x: &[f64]| {
        let r = model.residuals(x);
        (prior_value(model, x) + r.iter().map(|v| v * v).sum::<f64>(), norm(&r))
    };
    let mut x = x0.to_vec();
    let (mut f, rn0) = eval(&x);
    if !f.is_finite() {
        return Err(Error::NonFinite { iteration: 0 });
    }
    let mut diag = Diagnostics {
        objective: vec![f],
        residual_norm: vec![rn0],
        step_lengths: Vec::new(),
        damping: Vec::new(),
        stop: StopReason::MaxIterations,
    };
    let mut mu: f64 = 0.0;

    for it in 1..=config.max_iters {
        let lin = linearize(model, &x, it)?;
        let step0 = lin.solve(0.0, it)?;
        let predicted = f - step0.model_value;
        if predicted <= config.rel_tol * f.abs().max(f64::MIN_POSITIVE) {
            diag.stop = StopReason::Stationary;
            break;
        }
        let g = gradient(model, &x);
        let armijo = |x_new: &[f64], t: f64| -> Option<(Vec<f64>, f64, f64)> {
            let d: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
            let slope: f64 = g.iter().zip(&d).map(|(g, d)| g * d).sum();
            let trial: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + t * b).collect();
            let (ft, rn) = eval(&trial);
            (ft.is_finite() && ft <= f + config.armijo_c * t * slope.min(0.0) && ft <= f).then_some((trial, ft, rn))
        };

        let mut accepted = None;
        let mut t = 1.0;
        for _ in 0..=config.direct_backtracks {
            if let Some(a) = armijo(&step0.x_new, t) {
                accepted = Some((a, t, 0.0));
                break;
            }
            t *= config.backtrack;
        }
        let mut last = step0.x_new.clone();
        let mut try_mu = mu.max(config.initial_damping);
        if accepted.is_none() {
            for _ in 0..=config.max_damping_increases {
                let candidate = lin.solve(try_mu, it)?.x_new;
                if let Some(a) = armijo(&candidate, 1.0) {
                    accepted = Some((a, 1.0, try_mu));
                    break;
                }
                last = candidate;
                try_mu *= 10.0;
            }
        }
        if accepted.is_none() {
            let mut t = config.backtrack;
            for _ in 0..config.max_backtracks {
                if let Some(a) = armijo(&last, t) {
                    accepted = Some((a, t, try_mu / 10.0));
                    break;
                }
                t *= config.backtrack;
            }
        }
        let Some(((trial, ft, rn), t, used_mu)) = accepted else {
            diag.stop = StopReason::LineSearchStalled;
            break;
        };
        mu = if used_mu * 0.1 < config.initial_damping { 0.0 } else { used_mu * 0.1 };
        let decrease = f - ft;
        x = trial;
        f = ft;
        diag.objective.push(f);
        diag.residual_norm.push(rn);
        diag.step_lengths.push(t);
        diag.damping.push(used_mu);
        if used_mu == 0.0 && t == 1.0 && decrease <= config.rel_tol * f.abs().max(f64::MIN_POSITIVE) {
            diag.stop = StopReason::SmallDecrease;
            break;
        }
    }
    if !f.is_finite() {
        return Err(Error::NonFinite { iteration: diag.iterations() });
    }
    Ok((x, diag))
}
