//! Integer parameter counts for the protocol.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::AllocationSolution;
use crate::error::{shape_err, Result};
use crate::network::{check_constraints, FeasibilityReport, NetworkInstance, RoundAllocation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoweredAllocation {
    pub gamma: Vec<f64>,
    /// Integer `M̂[k][s]`.
    pub params: Vec<Vec<u64>>,
    pub assignment: Vec<Vec<bool>>,
    pub report: FeasibilityReport,
    /// Some counts were decremented after rounding up.
    pub repaired: bool,
    /// Constraints still fail after the repair.
    pub flagged: bool,
    pub notes: Vec<String>,
}

impl LoweredAllocation {
    pub fn as_round_allocation(&self, inst: &NetworkInstance) -> RoundAllocation {
        let params = self
            .params
            .iter()
            .map(|row| row.iter().map(|&m| m as f64).collect())
            .collect();
        inst.allocation(self.assignment.clone(), params, self.gamma.clone())
    }
}

/// Rounds up, treating values within 1e-9 (relative) of an integer as integral.
fn round_up(m: f64) -> u64 {
    let snapped = Float::round(m);
    if (m - snapped).abs() <= 1e-9 * m.abs().max(1.0) {
        snapped.max(0.0) as u64
    } else {
        Float::ceil(m).max(0.0) as u64
    }
}

/// `γ_k = 1 − γ̃_k` and `M̂ = ⌈M̃⌉` on assigned subcarriers. If rounding up
/// breaks latency or energy, the subcarrier with the longest transfer time
/// gives back one parameter at a time, never below `(1 − γ_k)M` in total.
pub fn lower_to_protocol(sol: &AllocationSolution, inst: &NetworkInstance) -> Result<LoweredAllocation> {
    let (k_n, s_n) = (inst.n_devices, inst.n_subcarriers);
    if sol.params.len() != k_n || sol.assignment.len() != k_n || sol.gamma_tilde.len() != k_n {
        return Err(shape_err!(
            "solution for {} devices, instance has {k_n}",
            sol.params.len()
        ));
    }
    let gamma: Vec<f64> = sol.gamma_tilde.iter().map(|g| 1.0 - g).collect();
    let mut params: Vec<Vec<u64>> = (0..k_n)
        .map(|k| {
            (0..s_n)
                .map(|s| {
                    if sol.assignment[k][s] {
                        round_up(sol.params[k][s])
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    let build = |params: &[Vec<u64>]| LoweredAllocation {
        gamma: gamma.clone(),
        params: params.to_vec(),
        assignment: sol.assignment.clone(),
        report: FeasibilityReport {
            devices: Vec::new(),
            bad_subcarriers: Vec::new(),
        },
        repaired: false,
        flagged: false,
        notes: Vec::new(),
    };
    let mut out = build(&params);
    out.report = check_constraints(inst, &out.as_round_allocation(inst))?;
    if out.report.is_feasible() {
        return Ok(out);
    }
    let m_full = inst.params_full as f64;
    let rates = inst.uplink_rates();
    let q = inst.bits_per_param;
    let mut repaired = false;
    for k in 0..k_n {
        if out.report.devices[k].is_empty() {
            continue;
        }
        let required = sol.gamma_tilde[k] * m_full;
        loop {
            let total: u64 = params[k].iter().sum();
            if (total as f64) - 1.0 < required * (1.0 - 1e-12) {
                break;
            }
            let slowest = (0..s_n)
                .filter(|&s| sol.assignment[k][s] && params[k][s] > 0)
                .map(|s| {
                    let m = params[k][s] as f64 * q;
                    (s, (m / inst.downlink_rate(k, s)).max(m / rates[k][s]))
                })
                .max_by(|a, b| a.1.total_cmp(&b.1));
            let Some((s, _)) = slowest else { break };
            params[k][s] -= 1;
            repaired = true;
            let trial = build(&params);
            let report = check_constraints(inst, &trial.as_round_allocation(inst))?;
            if report.devices[k].is_empty() {
                break;
            }
        }
    }
    let mut out = build(&params);
    out.repaired = repaired;
    out.report = check_constraints(inst, &out.as_round_allocation(inst))?;
    if !out.report.is_feasible() {
        out.flagged = true;
        out.notes
            .push(format!("rounding leaves violations: {:?}", out.report.devices));
    }
    Ok(out)
}
