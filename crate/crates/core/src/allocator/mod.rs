//! Joint dropout-rate and subcarrier allocation.
//!
//! With `γ̃_k = 1 − γ_k` and `M̃_{k,s} = z_{k,s} M̂_{k,s}` the per-round problem
//! for a fixed assignment `z` is convex in `(γ̃, M̃, T)`. Its objective is
//!
//! ```text
//! (I/η) Σ_k w_k (1 − γ̃_k) + (Vη/√|D|) sqrt(Σ_k 1 / (a_k − γ̃_k²))
//! ```
//!
//! [`solve_p2`] solves it exactly, [`branch_and_bound`] and
//! [`exhaustive_oracle`] search over assignments, and [`psca_solve`] replaces
//! the binary assignment by a penalized continuous one.

mod barrier;
mod bnb;
mod hessian;
mod lower;
mod p2;
mod psca;

use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::bounds::BoundConstants;
use crate::error::{domain_err, shape_err, Result};

pub use bnb::{branch_and_bound, evaluate_assignment, exhaustive_oracle, round_robin, BnbOptions};
pub use hessian::{hessian_check, HessianReport, HessianSample};
pub use lower::{lower_to_protocol, LoweredAllocation};
pub use p2::{device_capacity, solve_p2, solve_p2_dual, Capacity, DualOptions, P2Solution};
pub use psca::{psca_solve, solve_p3, P3Solution, PscaOptions};

/// Coefficients of the allocation objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    /// `I = U'(n1 + n2)𝓗²𝓖⁴`.
    pub i_coef: f64,
    /// `V = sqrt(6C / (δλ))`.
    pub v_coef: f64,
    /// `a_k = (2λ + Λ_{k,min}) / (2λ)`.
    pub a: Vec<f64>,
    pub eta: f64,
    /// `|D_k| / |D|`.
    pub weights: Vec<f64>,
    /// `|D|`.
    pub dataset_size: f64,
}

impl ProblemConstants {
    pub fn from_bounds(c: &BoundConstants) -> Result<Self> {
        c.validate()?;
        let lambda = c.reg_lambda;
        Ok(ProblemConstants {
            i_coef: c.dropout_coefficient(),
            v_coef: Float::sqrt(6.0 * c.loss_range_c / (c.confidence_delta * lambda)),
            a: c.hessian_min
                .iter()
                .map(|h| (2.0 * lambda + h) / (2.0 * lambda))
                .collect(),
            eta: c.eta,
            weights: c.weights(),
            dataset_size: c.total_size() as f64,
        })
    }

    pub fn k(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.len() != self.a.len() || self.a.is_empty() {
            return Err(shape_err!(
                "{} weights for {} devices",
                self.weights.len(),
                self.a.len()
            ));
        }
        if !(self.i_coef >= 0.0 && self.v_coef >= 0.0 && self.eta > 0.0 && self.dataset_size > 0.0) {
            return Err(domain_err!("I, V must be non-negative and η, |D| positive"));
        }
        if self.a.iter().any(|&a| !(a >= 1.0)) {
            return Err(domain_err!("a_k must be at least 1"));
        }
        Ok(())
    }

    /// Coefficient of the linear term: `I/η`.
    pub(crate) fn c_lin(&self) -> f64 {
        self.i_coef / self.eta
    }

    /// Coefficient of the square-root term: `Vη/√|D|`.
    pub(crate) fn c_sqrt(&self) -> f64 {
        self.v_coef * self.eta / Float::sqrt(self.dataset_size)
    }

    /// Largest admissible `γ̃_k`: 1, kept strictly below `√a_k`.
    pub(crate) fn gamma_tilde_cap(&self, k: usize) -> f64 {
        let root = Float::sqrt(self.a[k]);
        1.0f64.min(root * (1.0 - 1e-12))
    }
}

fn check_point(c: &ProblemConstants, gt: &[f64]) -> Result<f64> {
    if gt.len() != c.k() {
        return Err(shape_err!("{} values for {} devices", gt.len(), c.k()));
    }
    let mut s = 0.0;
    for (k, &x) in gt.iter().enumerate() {
        let d = c.a[k] - x * x;
        if !(d > 0.0) {
            return Err(domain_err!("a_k − γ̃_k² = {d} is not positive for device {k}"));
        }
        s += 1.0 / d;
    }
    Ok(s)
}

/// Objective of the fixed-assignment problem, exactly as written.
pub fn objective_p2(c: &ProblemConstants, gamma_tilde: &[f64]) -> Result<f64> {
    let s = check_point(c, gamma_tilde)?;
    let lin: f64 = c.weights.iter().zip(gamma_tilde).map(|(w, x)| w * (1.0 - x)).sum();
    Ok(c.c_lin() * lin + c.c_sqrt() * Float::sqrt(s))
}

/// Gradient of [`objective_p2`] with respect to `γ̃`.
pub fn gradient_p2(c: &ProblemConstants, gamma_tilde: &[f64]) -> Result<Vec<f64>> {
    let s = check_point(c, gamma_tilde)?;
    let root = Float::sqrt(s);
    Ok(gamma_tilde
        .iter()
        .enumerate()
        .map(|(k, &x)| {
            let d = c.a[k] - x * x;
            -c.c_lin() * c.weights[k] + c.c_sqrt() * x / (d * d * root)
        })
        .collect())
}

/// `sqrt(Σ_k 1/(a_k − x_k²))`: the second objective term without its coefficient.
pub fn second_term(a: &[f64], x: &[f64]) -> Result<f64> {
    if a.len() != x.len() {
        return Err(shape_err!("{} a-values for {} points", a.len(), x.len()));
    }
    let mut s = 0.0;
    for (&ak, &xk) in a.iter().zip(x) {
        let d = ak - xk * xk;
        if !(d > 0.0) {
            return Err(domain_err!("a − x² = {d} is not positive"));
        }
        s += 1.0 / d;
    }
    Ok(Float::sqrt(s))
}

/// Closed-form Hessian of [`second_term`], row-major `K × K`:
///
/// ```text
/// o_kk = (1/D_k² + 4x_k²/D_k³)/√S − x_k²/(D_k⁴ S^{3/2}),
/// o_kj = −x_k x_j / (D_k² D_j² S^{3/2}),      D_k = a_k − x_k².
/// ```
pub fn second_term_hessian(a: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let g = second_term(a, x)?;
    let s = g * g;
    let s32 = s * g;
    let k = a.len();
    let d: Vec<f64> = a.iter().zip(x).map(|(ak, xk)| ak - xk * xk).collect();
    let mut h = alloc::vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            h[i * k + j] = if i == j {
                let di = d[i];
                (1.0 / (di * di) + 4.0 * x[i] * x[i] / (di * di * di)) / g - x[i] * x[i] / (di * di * di * di * s32)
            } else {
                -x[i] * x[j] / (d[i] * d[i] * d[j] * d[j] * s32)
            };
        }
    }
    Ok(h)
}

/// Which solver produced a solution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bnb,
    Psca,
    Oracle,
    /// Continuous variables only, for a given assignment.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverMeta {
    pub method: Method,
    pub iterations: usize,
    pub nodes_explored: usize,
    pub assignments_evaluated: usize,
    /// False when the search stopped early (node budget, P-SCA non-convergence).
    pub optimal: bool,
    pub converged: bool,
    /// `max z(1 − z)` of the last continuous P-SCA iterate.
    pub integrality_violation: Option<f64>,
    pub final_tau: Option<f64>,
    pub notes: Vec<String>,
}

impl SolverMeta {
    pub(crate) fn new(method: Method) -> Self {
        SolverMeta {
            method,
            iterations: 0,
            nodes_explored: 0,
            assignments_evaluated: 0,
            optimal: true,
            converged: true,
            integrality_violation: None,
            final_tau: None,
            notes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSolution {
    pub objective: f64,
    /// `γ_k = 1 − γ̃_k`.
    pub gamma: Vec<f64>,
    pub gamma_tilde: Vec<f64>,
    /// `M̂[k][s]`; zero where unassigned.
    pub params: Vec<Vec<f64>>,
    pub assignment: Vec<Vec<bool>>,
    pub latency_dl: Vec<f64>,
    pub latency_ul: Vec<f64>,
    pub meta: SolverMeta,
}

impl AllocationSolution {
    /// Subcarrier owners, `owner[s] = k` with `z[k][s] = 1`.
    pub fn owners(&self) -> Vec<usize> {
        owners_of(&self.assignment)
    }
}

pub(crate) fn owners_of(z: &[Vec<bool>]) -> Vec<usize> {
    let s = z.first().map_or(0, Vec::len);
    (0..s)
        .map(|j| (0..z.len()).find(|&k| z[k][j]).unwrap_or(usize::MAX))
        .collect()
}

pub(crate) fn assignment_from_owners(owners: &[usize], k: usize) -> Vec<Vec<bool>> {
    (0..k).map(|d| owners.iter().map(|&o| o == d).collect()).collect()
}

/// Floor on `γ̃` implied by the largest admissible dropout rate.
pub(crate) fn gamma_tilde_floor(max_dropout: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&max_dropout) {
        return Err(domain_err!("max_dropout must be in [0, 1), got {max_dropout}"));
    }
    Ok(1.0 - max_dropout)
}
