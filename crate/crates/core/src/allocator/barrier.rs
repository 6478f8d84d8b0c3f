//! Log-barrier interior-point method for a smooth convex objective under
//! sparse linear inequalities and equalities.
//!
//! Variables are split into contiguous blocks. Every inequality must touch a
//! single block and the objective Hessian must be block diagonal minus one
//! rank-one term, so each Newton system costs a few small Cholesky solves, a
//! Sherman-Morrison correction and a Schur complement for the equalities.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{Cholesky, DMatrix, DVector};
use num_traits::Float;

use crate::error::{Error, Result};

/// Sparse row `Σ coef·x[idx]`.
pub(crate) type Row = Vec<(usize, f64)>;

fn dot(row: &Row, x: &[f64]) -> f64 {
    row.iter().map(|&(i, v)| v * x[i]).sum()
}

/// `a_i·x ≤ b_i` and `c_j·x = d_j` over variables grouped into blocks
/// `[starts[i], starts[i + 1])`.
#[derive(Debug, Clone)]
pub(crate) struct LinearSet {
    pub starts: Vec<usize>,
    pub ineq: Vec<Row>,
    pub b: Vec<f64>,
    pub eq: Vec<Row>,
    pub d: Vec<f64>,
}

impl LinearSet {
    /// `n` variables in one block.
    #[cfg(test)]
    pub fn dense(n: usize) -> Self {
        Self::blocks(vec![0, n])
    }

    pub fn blocks(starts: Vec<usize>) -> Self {
        LinearSet {
            starts,
            ineq: Vec::new(),
            b: Vec::new(),
            eq: Vec::new(),
            d: Vec::new(),
        }
    }

    fn n(&self) -> usize {
        *self.starts.last().unwrap_or(&0)
    }

    fn block_of(&self, i: usize) -> usize {
        self.starts.partition_point(|&s| s <= i) - 1
    }

    pub fn le(&mut self, row: Row, b: f64) {
        self.ineq.push(row);
        self.b.push(b);
    }

    pub fn eq(&mut self, row: Row, d: f64) {
        self.eq.push(row);
        self.d.push(d);
    }

    /// Smallest slack `b − a·x`.
    pub fn min_slack(&self, x: &[f64]) -> f64 {
        self.ineq
            .iter()
            .zip(&self.b)
            .map(|(r, b)| b - dot(r, x))
            .fold(f64::INFINITY, f64::min)
    }

    #[cfg(test)]
    pub fn max_eq_residual(&self, x: &[f64]) -> f64 {
        self.eq
            .iter()
            .zip(&self.d)
            .map(|(r, d)| (dot(r, x) - d).abs())
            .fold(0.0, f64::max)
    }
}

/// Scaled objective Hessian: `blockdiag(blocks) − v vᵀ`.
pub(crate) struct Hessian {
    pub blocks: Vec<DMatrix<f64>>,
    pub v: Vec<f64>,
}

/// Smooth convex objective.
pub(crate) trait Objective {
    /// `+∞` outside the domain.
    fn value(&self, x: &[f64]) -> f64;
    /// Adds `scale·∇f` to `g` and `scale·∇²f` to `h`, using the block layout
    /// of `starts` for `h.blocks` (block-local indices).
    fn add_derivatives(&self, x: &[f64], scale: f64, starts: &[usize], g: &mut [f64], h: &mut Hessian);
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BarrierOptions {
    /// Stop when `m/t` falls below `gap_tol·max(|f|, gap_floor)`.
    pub gap_tol: f64,
    pub gap_floor: f64,
    pub mu: f64,
    pub max_newton: usize,
}

impl Default for BarrierOptions {
    fn default() -> Self {
        BarrierOptions {
            gap_tol: 1e-9,
            gap_floor: 1e-6,
            mu: 20.0,
            max_newton: 400,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BarrierResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub newton_steps: usize,
}

fn barrier_value<O: Objective>(obj: &O, set: &LinearSet, t: f64, x: &[f64]) -> f64 {
    let f = obj.value(x);
    if !f.is_finite() {
        return f64::INFINITY;
    }
    let mut phi = t * f;
    for (r, b) in set.ineq.iter().zip(&set.b) {
        let s = b - dot(r, x);
        if !(s > 0.0) {
            return f64::INFINITY;
        }
        phi -= Float::ln(s);
    }
    phi
}

fn singular(steps: usize) -> Error {
    Error::NoConvergence {
        iterations: steps,
        detail: "singular Newton system".into(),
    }
}

/// Factored `blockdiag(B) − v vᵀ`.
struct Factor {
    chol: Vec<Cholesky<f64, nalgebra::Dyn>>,
    starts: Vec<usize>,
    /// `B⁻¹v` and `1 − vᵀB⁻¹v`.
    binv_v: Vec<f64>,
    denom: f64,
    v: Vec<f64>,
}

impl Factor {
    fn new(h: &Hessian, starts: &[usize]) -> Option<Factor> {
        let mut chol = Vec::with_capacity(h.blocks.len());
        for b in &h.blocks {
            chol.push(Cholesky::new(b.clone())?);
        }
        let mut f = Factor {
            chol,
            starts: starts.to_vec(),
            binv_v: Vec::new(),
            denom: 1.0,
            v: h.v.clone(),
        };
        if f.v.iter().any(|&x| x != 0.0) {
            let mut w = f.v.clone();
            f.block_solve(&mut w);
            let vbv: f64 = w.iter().zip(&f.v).map(|(a, b)| a * b).sum();
            f.denom = 1.0 - vbv;
            if !(f.denom > 1e-4) {
                return None;
            }
            f.binv_v = w;
        }
        Some(f)
    }

    fn block_solve(&self, x: &mut [f64]) {
        for (i, c) in self.chol.iter().enumerate() {
            let (lo, hi) = (self.starts[i], self.starts[i + 1]);
            let mut rhs = DVector::from_column_slice(&x[lo..hi]);
            c.solve_mut(&mut rhs);
            x[lo..hi].copy_from_slice(rhs.as_slice());
        }
    }

    /// Overwrites `x` with `H⁻¹x`.
    fn solve(&self, x: &mut [f64]) {
        self.block_solve(x);
        if !self.binv_v.is_empty() {
            let coef = self.v.iter().zip(x.iter()).map(|(a, b)| a * b).sum::<f64>() / self.denom;
            for (xi, wi) in x.iter_mut().zip(&self.binv_v) {
                *xi += coef * wi;
            }
        }
    }
}

/// Newton step with equality residual correction:
/// `H dx + Cᵀν = −g`, `C dx = d − Cx`.
fn structured_step(h: &Hessian, set: &LinearSet, g: &[f64], x: &[f64]) -> Option<Vec<f64>> {
    let n = g.len();
    let p = set.eq.len();
    let fac = Factor::new(h, &set.starts)?;
    let mut dx: Vec<f64> = g.iter().map(|v| -v).collect();
    fac.solve(&mut dx);
    if p > 0 {
        let mut w = Vec::with_capacity(p);
        for r in &set.eq {
            let mut col = vec![0.0; n];
            for &(i, v) in r {
                col[i] = v;
            }
            fac.solve(&mut col);
            w.push(col);
        }
        let schur = DMatrix::from_fn(p, p, |i, j| dot(&set.eq[i], &w[j]));
        let rhs = DVector::from_fn(p, |i, _| dot(&set.eq[i], &dx) - (set.d[i] - dot(&set.eq[i], x)));
        let nu = schur.lu().solve(&rhs)?;
        for (j, col) in w.iter().enumerate() {
            for i in 0..n {
                dx[i] -= nu[j] * col[i];
            }
        }
    }
    dx.iter().all(|v| v.is_finite()).then_some(dx)
}

fn dense_step(h: &Hessian, set: &LinearSet, g: &[f64], x: &[f64]) -> Option<Vec<f64>> {
    let n = g.len();
    let p = set.eq.len();
    let mut kkt = DMatrix::<f64>::zeros(n + p, n + p);
    for (b, blk) in h.blocks.iter().enumerate() {
        let off = set.starts[b];
        kkt.view_mut((off, off), blk.shape()).copy_from(blk);
    }
    for i in 0..n {
        for j in 0..n {
            kkt[(i, j)] -= h.v[i] * h.v[j];
        }
    }
    let mut rhs = DVector::<f64>::zeros(n + p);
    for i in 0..n {
        rhs[i] = -g[i];
    }
    for (j, (r, d)) in set.eq.iter().zip(&set.d).enumerate() {
        for &(i, v) in r {
            kkt[(n + j, i)] = v;
            kkt[(i, n + j)] = v;
        }
        rhs[n + j] = d - dot(r, x);
    }
    let sol = kkt.lu().solve(&rhs)?;
    let dx: Vec<f64> = (0..n).map(|i| sol[i]).collect();
    dx.iter().all(|v| v.is_finite()).then_some(dx)
}

/// Minimizes `obj` over the set from a strictly feasible `x0`; the equalities
/// are enforced by the Newton steps, so `x0` may violate them slightly.
pub(crate) fn minimize<O: Objective>(
    obj: &O,
    set: &LinearSet,
    x0: Vec<f64>,
    opts: &BarrierOptions,
) -> Result<BarrierResult> {
    let n = x0.len();
    if n != set.n() {
        return Err(Error::Shape(format!("{n} variables for a {}-variable layout", set.n())));
    }
    let m = set.ineq.len() as f64;
    if !(set.min_slack(&x0) > 0.0) || !obj.value(&x0).is_finite() {
        return Err(Error::Domain(format!(
            "barrier start is not strictly feasible (min slack {})",
            set.min_slack(&x0)
        )));
    }
    // block of every inequality row
    let mut row_block = Vec::with_capacity(set.ineq.len());
    for r in &set.ineq {
        let blk = set.block_of(r.first().map_or(0, |e| e.0));
        if r.iter().any(|e| set.block_of(e.0) != blk) {
            return Err(Error::Domain("an inequality spans two variable blocks".into()));
        }
        row_block.push(blk);
    }
    let sizes: Vec<usize> = set.starts.windows(2).map(|w| w[1] - w[0]).collect();

    let mut x = x0;
    let f0 = obj.value(&x);
    let mut t = if m > 0.0 { m / f0.abs().max(opts.gap_floor) } else { 1.0 };
    let mut steps = 0;
    let mut g = vec![0.0; n];
    let mut slack_inv = vec![0.0; set.ineq.len()];
    let mut trial = vec![0.0; n];
    loop {
        // centering
        loop {
            if steps >= opts.max_newton {
                return Err(Error::NoConvergence {
                    iterations: steps,
                    detail: format!("barrier parameter t = {t:e}, objective {}", obj.value(&x)),
                });
            }
            steps += 1;
            g.iter_mut().for_each(|v| *v = 0.0);
            let mut h = Hessian {
                blocks: sizes.iter().map(|&s| DMatrix::zeros(s, s)).collect(),
                v: vec![0.0; n],
            };
            obj.add_derivatives(&x, t, &set.starts, &mut g, &mut h);
            for (i, (r, b)) in set.ineq.iter().zip(&set.b).enumerate() {
                let inv = 1.0 / (b - dot(r, &x));
                slack_inv[i] = inv;
                let off = set.starts[row_block[i]];
                let blk = &mut h.blocks[row_block[i]];
                for &(a, va) in r {
                    g[a] += va * inv;
                    for &(c, vc) in r {
                        blk[(a - off, c - off)] += va * vc * inv * inv;
                    }
                }
            }
            let dx = match structured_step(&h, set, &g, &x) {
                Some(dx) => dx,
                // cancellation in the rank-one update or a lost Cholesky:
                // fall back to the dense system
                None => dense_step(&h, set, &g, &x).ok_or_else(|| singular(steps))?,
            };
            let slope: f64 = g.iter().zip(&dx).map(|(a, b)| a * b).sum();
            if -slope / 2.0 <= 1e-10 {
                break;
            }
            // largest step keeping every slack positive
            let mut alpha: f64 = 1.0;
            for (i, r) in set.ineq.iter().enumerate() {
                let ad = dot(r, &dx);
                if ad > 0.0 {
                    alpha = alpha.min(0.99 / (ad * slack_inv[i]));
                }
            }
            let phi0 = barrier_value(obj, set, t, &x);
            let mut decrease = None;
            for _ in 0..60 {
                for i in 0..n {
                    trial[i] = x[i] + alpha * dx[i];
                }
                let phi = barrier_value(obj, set, t, &trial);
                if phi <= phi0 + 0.01 * alpha * slope {
                    decrease = Some(phi0 - phi);
                    break;
                }
                alpha *= 0.5;
            }
            let Some(decrease) = decrease else { break };
            core::mem::swap(&mut x, &mut trial);
            if decrease <= 1e-13 * phi0.abs().max(1.0) {
                // rounding-level progress: as centered as this precision allows
                break;
            }
        }
        let f = obj.value(&x);
        if m == 0.0 || m / t < opts.gap_tol * f.abs().max(opts.gap_floor) {
            return Ok(BarrierResult {
                value: f,
                x,
                newton_steps: steps,
            });
        }
        t *= opts.mu;
    }
}
