//! Exact search over subcarrier assignments.

use alloc::collections::BinaryHeap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::p2::{solve_fixed, P2Solution};
use super::{assignment_from_owners, AllocationSolution, Method, ProblemConstants, SolverMeta};
use crate::error::{Error, Result};
use crate::network::NetworkInstance;

/// Largest number of assignments the exhaustive oracle will enumerate.
pub const ORACLE_LIMIT: u64 = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnbOptions {
    /// Relaxation solves allowed before the search stops with its incumbent.
    pub node_budget: usize,
    /// Largest admissible dropout rate; keeps `γ̃` away from zero.
    pub max_dropout: f64,
}

impl Default for BnbOptions {
    fn default() -> Self {
        BnbOptions {
            node_budget: 1_000_000,
            max_dropout: 0.999,
        }
    }
}

/// Subcarrier `s` goes to device `s mod K`.
pub fn round_robin(k: usize, s: usize) -> Vec<Vec<bool>> {
    let owners: Vec<usize> = (0..s).map(|j| j % k.max(1)).collect();
    assignment_from_owners(&owners, k)
}

pub(crate) fn to_solution(sol: P2Solution, z: Vec<Vec<bool>>, meta: SolverMeta) -> AllocationSolution {
    AllocationSolution {
        objective: sol.objective,
        gamma: sol.gamma_tilde.iter().map(|g| 1.0 - g).collect(),
        gamma_tilde: sol.gamma_tilde,
        params: sol.m_tilde,
        assignment: z,
        latency_dl: sol.t_dl,
        latency_ul: sol.t_ul,
        meta,
    }
}

fn check_sizes(c: &ProblemConstants, inst: &NetworkInstance) -> Result<()> {
    if inst.n_devices == 0 || inst.n_subcarriers == 0 {
        return Err(Error::Domain(format!(
            "need at least one device and one subcarrier, got {}x{}",
            inst.n_devices, inst.n_subcarriers
        )));
    }
    if c.k() != inst.n_devices {
        return Err(Error::Shape(format!(
            "constants for {} devices, instance has {}",
            c.k(),
            inst.n_devices
        )));
    }
    Ok(())
}

/// Continuous allocation for a fixed, C3-valid assignment (the subcarrier-fixed scheme).
pub fn evaluate_assignment(
    c: &ProblemConstants,
    inst: &NetworkInstance,
    z: &[Vec<bool>],
    max_dropout: f64,
) -> Result<AllocationSolution> {
    let sol = super::solve_p2(c, inst, z, max_dropout)?;
    if !sol.feasible {
        return Err(Error::Infeasible(format!(
            "devices {:?} cannot meet their constraints with this assignment",
            sol.infeasible_devices
        )));
    }
    let mut meta = SolverMeta::new(Method::Fixed);
    meta.iterations = sol.iterations;
    meta.assignments_evaluated = 1;
    Ok(to_solution(sol, z.to_vec(), meta))
}

/// Partial assignment: `owners[j]` for the first `owners.len()` subcarriers,
/// the rest undecided.
#[derive(Debug, Clone)]
struct Node {
    bound: f64,
    owners: Vec<usize>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    // BinaryHeap is a max-heap: reverse so the smallest bound pops first,
    // then the deepest node, then the lexicographically smallest prefix.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .bound
            .total_cmp(&self.bound)
            .then(self.owners.len().cmp(&other.owners.len()))
            .then_with(|| other.owners.cmp(&self.owners))
    }
}

fn relaxed(owners: &[usize], k: usize, s: usize) -> Vec<Vec<bool>> {
    (0..k)
        .map(|d| (0..s).map(|j| j >= owners.len() || owners[j] == d).collect())
        .collect()
}

/// True when (objective, owners) beats the incumbent.
fn better(obj: f64, owners: &[usize], best: &Option<(f64, Vec<usize>, P2Solution)>) -> bool {
    match best {
        None => true,
        Some((b, o, _)) => obj < *b || (obj == *b && owners < o.as_slice()),
    }
}

/// A node cannot improve on the incumbent: its bound is worse, or equal while
/// every completion of its prefix sorts after the incumbent's owners.
fn dominated(bound: f64, prefix: &[usize], best: &Option<(f64, Vec<usize>, P2Solution)>) -> bool {
    match best {
        None => false,
        Some((b, o, _)) => bound > *b || (bound == *b && prefix > &o[..prefix.len()]),
    }
}

/// Best-first branch and bound. Subcarriers are fixed in index order; a node's
/// bound is the fixed-assignment optimum when every undecided subcarrier is
/// usable by every device, which relaxes C3 and so can only lower the
/// objective. Nodes whose bound exceeds the incumbent are pruned; ties are
/// kept so the result is the argmin by (objective, owner vector).
pub fn branch_and_bound(c: &ProblemConstants, inst: &NetworkInstance, opts: &BnbOptions) -> Result<AllocationSolution> {
    check_sizes(c, inst)?;
    let (k_n, s_n) = (inst.n_devices, inst.n_subcarriers);
    if s_n < k_n {
        return Err(Error::Infeasible(format!(
            "{k_n} devices need at least {k_n} subcarriers, have {s_n}"
        )));
    }
    let mut meta = SolverMeta::new(Method::Bnb);
    let mut best: Option<(f64, Vec<usize>, P2Solution)> = None;

    let rr: Vec<usize> = (0..s_n).map(|j| j % k_n).collect();
    let rr_sol = solve_fixed(c, inst, &assignment_from_owners(&rr, k_n), opts.max_dropout)?;
    meta.assignments_evaluated += 1;
    if rr_sol.feasible {
        best = Some((rr_sol.objective, rr, rr_sol));
    }

    let root = solve_fixed(c, inst, &relaxed(&[], k_n, s_n), opts.max_dropout)?;
    meta.nodes_explored = 1;
    let mut heap = BinaryHeap::new();
    if root.feasible {
        heap.push(Node {
            bound: root.objective,
            owners: Vec::new(),
        });
    }
    let mut exhausted = true;
    while let Some(node) = heap.pop() {
        if let Some((b, _, _)) = &best {
            if node.bound > *b {
                // best-first: everything left is at least as bad
                heap.clear();
                break;
            }
        }
        if dominated(node.bound, &node.owners, &best) {
            continue;
        }
        meta.iterations += 1;
        let depth = node.owners.len();
        let mut covered = vec![false; k_n];
        for &o in &node.owners {
            covered[o] = true;
        }
        for d in 0..k_n {
            let mut owners = node.owners.clone();
            owners.push(d);
            let remaining = s_n - depth - 1;
            let uncovered = (0..k_n).filter(|&j| !covered[j] && j != d).count();
            if uncovered > remaining {
                continue;
            }
            if meta.nodes_explored >= opts.node_budget {
                exhausted = false;
                break;
            }
            meta.nodes_explored += 1;
            let z = relaxed(&owners, k_n, s_n);
            let sol = solve_fixed(c, inst, &z, opts.max_dropout)?;
            if !sol.feasible {
                continue;
            }
            if dominated(sol.objective, &owners, &best) {
                continue;
            }
            if owners.len() == s_n {
                meta.assignments_evaluated += 1;
                if better(sol.objective, &owners, &best) {
                    best = Some((sol.objective, owners, sol));
                }
            } else {
                heap.push(Node {
                    bound: sol.objective,
                    owners,
                });
            }
        }
        if !exhausted {
            break;
        }
    }
    match best {
        Some((_, owners, sol)) => {
            if !exhausted {
                meta.optimal = false;
                meta.notes.push(format!(
                    "node budget {} reached; incumbent may be suboptimal",
                    opts.node_budget
                ));
            }
            Ok(to_solution(sol, assignment_from_owners(&owners, k_n), meta))
        }
        None if !exhausted => Err(Error::Budget(format!(
            "node budget {} reached before any feasible assignment was found",
            opts.node_budget
        ))),
        None => Err(Error::Infeasible(
            "no subcarrier assignment satisfies the constraints".into(),
        )),
    }
}

/// Solves the fixed-assignment problem for all `K^S` assignments in
/// lexicographic order of the owner vector and keeps the first best.
pub fn exhaustive_oracle(c: &ProblemConstants, inst: &NetworkInstance, max_dropout: f64) -> Result<AllocationSolution> {
    check_sizes(c, inst)?;
    let (k_n, s_n) = (inst.n_devices, inst.n_subcarriers);
    let count = (k_n as u64).checked_pow(s_n as u32).filter(|&n| n <= ORACLE_LIMIT);
    let Some(count) = count else {
        return Err(Error::Budget(format!(
            "{k_n}^{s_n} assignments exceed the oracle limit of {ORACLE_LIMIT}"
        )));
    };
    let mut meta = SolverMeta::new(Method::Oracle);
    let mut best: Option<(f64, Vec<usize>, P2Solution)> = None;
    let mut owners = vec![0usize; s_n];
    for _ in 0..count {
        let z = assignment_from_owners(&owners, k_n);
        let sol = solve_fixed(c, inst, &z, max_dropout)?;
        meta.assignments_evaluated += 1;
        meta.iterations += sol.iterations;
        if sol.feasible && better(sol.objective, &owners, &best) {
            best = Some((sol.objective, owners.clone(), sol));
        }
        // next owner vector, last subcarrier fastest
        for j in (0..s_n).rev() {
            owners[j] += 1;
            if owners[j] < k_n {
                break;
            }
            owners[j] = 0;
        }
    }
    match best {
        Some((_, owners, sol)) => Ok(to_solution(sol, assignment_from_owners(&owners, k_n), meta)),
        None => Err(Error::Infeasible(format!(
            "none of the {count} assignments is feasible"
        ))),
    }
}
