//! Penalized successive convex approximation.
//!
//! The binary assignment is relaxed to `z ∈ [0, 1]` with `Σ_k z_{k,s} = 1`, and
//! `τ Σ z(1 − z)` is added to the objective. Its concave part `−z²` is replaced
//! by the tangent `−(2z̄z − z̄²)` at the previous iterate, which leaves a convex
//! problem in `(γ̃, z, M̃, T)`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::barrier::{minimize, BarrierOptions, Hessian, LinearSet, Objective};
use super::bnb::to_solution;
use super::p2::{slacks, solve_fixed, P2Solution};
use super::{assignment_from_owners, gamma_tilde_floor, AllocationSolution, Method, ProblemConstants, SolverMeta};
use crate::error::{shape_err, Error, Result};
use crate::network::NetworkInstance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PscaOptions {
    /// Penalty weight; `None` starts at ten times the relaxed optimum.
    pub tau: Option<f64>,
    pub max_outer: usize,
    /// Stop when `‖z − z̄‖∞` falls below this.
    pub tol: f64,
    /// Largest `max z(1 − z)` accepted at convergence.
    pub integrality_tol: f64,
    pub max_dropout: f64,
}

impl Default for PscaOptions {
    fn default() -> Self {
        PscaOptions {
            tau: None,
            max_outer: 50,
            tol: 1e-4,
            integrality_tol: 1e-3,
            max_dropout: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P3Solution {
    pub feasible: bool,
    /// Allocation objective at the iterate, without the penalty.
    pub objective: f64,
    /// Including `τ Σ (z − 2z̄z + z̄²)`.
    pub penalized_objective: f64,
    pub gamma_tilde: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    /// `M̃[k][s]` in parameters.
    pub m_tilde: Vec<Vec<f64>>,
    pub newton_steps: usize,
}

/// Variable layout, one block per device: `γ̃_k`, `τ_dl`, `τ_ul` (fractions of
/// the latency slack), `z_{k,·}`, `M̃_{k,·}/M`.
#[derive(Clone, Copy)]
struct Layout {
    k: usize,
    s: usize,
}

impl Layout {
    fn block(&self) -> usize {
        3 + 2 * self.s
    }
    fn n(&self) -> usize {
        self.k * self.block()
    }
    fn starts(&self) -> Vec<usize> {
        (0..=self.k).map(|k| k * self.block()).collect()
    }
    fn gt(&self, k: usize) -> usize {
        k * self.block()
    }
    fn t_dl(&self, k: usize) -> usize {
        k * self.block() + 1
    }
    fn t_ul(&self, k: usize) -> usize {
        k * self.block() + 2
    }
    fn z(&self, k: usize, s: usize) -> usize {
        k * self.block() + 3 + s
    }
    fn m(&self, k: usize, s: usize) -> usize {
        k * self.block() + 3 + self.s + s
    }
}

struct P3Objective<'a> {
    c: &'a ProblemConstants,
    lay: Layout,
    /// Linear coefficients of the penalty, indexed like the variables.
    lin: Vec<f64>,
}

impl P3Objective<'_> {
    fn allocation_value(&self, x: &[f64]) -> f64 {
        let c = self.c;
        let mut s = 0.0;
        let mut first = 0.0;
        for k in 0..c.k() {
            let g = x[self.lay.gt(k)];
            let d = c.a[k] - g * g;
            if !(d > 0.0) {
                return f64::INFINITY;
            }
            s += 1.0 / d;
            first += c.weights[k] * (1.0 - g);
        }
        c.c_lin() * first + c.c_sqrt() * Float::sqrt(s)
    }
}

impl Objective for P3Objective<'_> {
    fn value(&self, x: &[f64]) -> f64 {
        let pen: f64 = self.lin.iter().zip(x).map(|(a, b)| a * b).sum();
        self.allocation_value(x) + pen
    }

    /// The square-root term's Hessian is diagonal minus `u uᵀ` with
    /// `u_k = x_k / (D_k² S^{3/4})`.
    fn add_derivatives(&self, x: &[f64], scale: f64, _starts: &[usize], g: &mut [f64], h: &mut Hessian) {
        let c = self.c;
        let k_n = c.k();
        let xs: Vec<f64> = (0..k_n).map(|k| x[self.lay.gt(k)]).collect();
        let d: Vec<f64> = (0..k_n).map(|k| c.a[k] - xs[k] * xs[k]).collect();
        let s: f64 = d.iter().map(|v| 1.0 / v).sum();
        let root = Float::sqrt(s);
        let cs = scale * c.c_sqrt();
        let u_scale = Float::sqrt(cs / (s * root));
        for k in 0..k_n {
            let (xk, dk) = (xs[k], d[k]);
            let i = self.lay.gt(k);
            g[i] += scale * (-c.c_lin() * c.weights[k]) + cs * xk / (dk * dk * root);
            h.blocks[k][(0, 0)] += cs * (1.0 / (dk * dk) + 4.0 * xk * xk / (dk * dk * dk)) / root;
            h.v[i] = u_scale * xk / (dk * dk);
        }
        for (gi, li) in g.iter_mut().zip(&self.lin) {
            *gi += scale * li;
        }
    }
}

/// Builds the constraint set and a strictly feasible start, or `None` when
/// some device has no latency or energy left or there are fewer subcarriers
/// than devices.
fn build(c: &ProblemConstants, inst: &NetworkInstance, lo: f64) -> Option<(LinearSet, Vec<f64>)> {
    let (k_n, s_n) = (inst.n_devices, inst.n_subcarriers);
    let lay = Layout { k: k_n, s: s_n };
    let m_full = inst.params_full as f64;
    let q = inst.bits_per_param;
    let mut set = LinearSet::blocks(lay.starts());
    let mut x = vec![0.0; lay.n()];
    let z0 = 1.0 / k_n as f64;
    for k in 0..k_n {
        let (l, e) = slacks(inst, k);
        if !(l > 0.0) || !(e > 0.0) {
            return None;
        }
        let hi = c.gamma_tilde_cap(k);
        set.le(vec![(lay.gt(k), -1.0)], -lo);
        set.le(vec![(lay.gt(k), 1.0)], hi);
        let mut cover = vec![(lay.gt(k), 1.0)];
        set.le(vec![(lay.t_dl(k), -1.0)], 0.0);
        set.le(vec![(lay.t_ul(k), -1.0)], 0.0);
        set.le(vec![(lay.t_dl(k), 1.0), (lay.t_ul(k), 1.0)], 1.0);
        let mut energy = Vec::with_capacity(s_n);
        let mut cap = vec![0.0; s_n];
        let mut use_e = 0.0;
        for s in 0..s_n {
            let (rdl, rul) = (inst.downlink_rate(k, s), inst.uplink_rate(k, s));
            let cost = inst.uplink_energy_per_param(k, s);
            let mut mbar = m_full.min(l * rdl * rul / (q * (rdl + rul)));
            if cost > 0.0 {
                mbar = mbar.min(e / cost);
            }
            cap[s] = mbar / m_full;
            let (zi, mi) = (lay.z(k, s), lay.m(k, s));
            set.le(vec![(zi, -1.0)], 0.0);
            set.le(vec![(mi, -1.0)], 0.0);
            set.le(vec![(mi, 1.0), (zi, -cap[s])], 0.0);
            set.le(vec![(mi, m_full * q / (rdl * l)), (lay.t_dl(k), -1.0)], 0.0);
            set.le(vec![(mi, m_full * q / (rul * l)), (lay.t_ul(k), -1.0)], 0.0);
            energy.push((mi, cost * m_full / e));
            cover.push((mi, -1.0));
            use_e += z0 * cap[s] * cost * m_full / e;
        }
        set.le(energy, 1.0);
        set.le(cover, 0.0);
        // start: a fraction of the per-subcarrier caps, inside every constraint
        let rho = 0.4 * if use_e > 1.0 { 1.0 / use_e } else { 1.0 };
        x[lay.t_dl(k)] = 0.45;
        x[lay.t_ul(k)] = 0.45;
        let mut carried = 0.0;
        for s in 0..s_n {
            x[lay.z(k, s)] = z0;
            x[lay.m(k, s)] = rho * z0 * cap[s];
            carried += x[lay.m(k, s)];
        }
        let top = carried.min(hi);
        if !(top > lo) {
            return None;
        }
        x[lay.gt(k)] = lo + 0.5 * (top - lo);
    }
    for s in 0..s_n {
        set.eq((0..k_n).map(|k| (lay.z(k, s), 1.0)).collect(), 1.0);
    }
    // every device needs a whole subcarrier; with S = K this pins the row
    // sums, and one of those equalities is implied by the others
    if s_n > k_n {
        for k in 0..k_n {
            set.le((0..s_n).map(|s| (lay.z(k, s), -1.0)).collect(), -1.0);
        }
    } else if s_n == k_n {
        for k in 0..k_n - 1 {
            set.eq((0..s_n).map(|s| (lay.z(k, s), 1.0)).collect(), 1.0);
        }
    } else {
        return None;
    }
    Some((set, x))
}

/// Solves the convexified problem around `z_bar` with penalty weight `tau`.
pub fn solve_p3(
    c: &ProblemConstants,
    inst: &NetworkInstance,
    z_bar: &[Vec<f64>],
    tau: f64,
    max_dropout: f64,
) -> Result<P3Solution> {
    c.validate()?;
    let (k_n, s_n) = (inst.n_devices, inst.n_subcarriers);
    if c.k() != k_n || z_bar.len() != k_n || z_bar.iter().any(|r| r.len() != s_n) {
        return Err(shape_err!("z̄ and constants must match the {k_n}x{s_n} instance"));
    }
    if !(tau >= 0.0) {
        return Err(Error::Domain(format!("penalty must be non-negative, got {tau}")));
    }
    let lo = gamma_tilde_floor(max_dropout)?;
    let lay = Layout { k: k_n, s: s_n };
    let Some((set, x0)) = build(c, inst, lo) else {
        return Ok(P3Solution {
            feasible: false,
            objective: f64::INFINITY,
            penalized_objective: f64::INFINITY,
            gamma_tilde: vec![0.0; k_n],
            z: vec![vec![0.0; s_n]; k_n],
            m_tilde: vec![vec![0.0; s_n]; k_n],
            newton_steps: 0,
        });
    };
    let mut lin = vec![0.0; lay.n()];
    let mut constant = 0.0;
    for k in 0..k_n {
        for s in 0..s_n {
            lin[lay.z(k, s)] = tau * (1.0 - 2.0 * z_bar[k][s]);
            constant += tau * z_bar[k][s] * z_bar[k][s];
        }
    }
    let obj = P3Objective { c, lay, lin };
    let r = minimize(&obj, &set, x0, &BarrierOptions::default())?;
    let x = &r.x;
    let m_full = inst.params_full as f64;
    Ok(P3Solution {
        feasible: true,
        objective: obj.allocation_value(x),
        penalized_objective: r.value + constant,
        gamma_tilde: (0..k_n).map(|k| x[lay.gt(k)]).collect(),
        z: (0..k_n)
            .map(|k| (0..s_n).map(|s| x[lay.z(k, s)].clamp(0.0, 1.0)).collect())
            .collect(),
        m_tilde: (0..k_n)
            .map(|k| (0..s_n).map(|s| x[lay.m(k, s)].max(0.0) * m_full).collect())
            .collect(),
        newton_steps: r.newton_steps,
    })
}

/// Row argmax per subcarrier; the lowest device index wins ties.
fn project(z: &[Vec<f64>]) -> Vec<usize> {
    let s_n = z.first().map_or(0, Vec::len);
    (0..s_n)
        .map(|s| {
            let mut best = 0;
            for k in 1..z.len() {
                if z[k][s] > z[best][s] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

fn violation(z: &[Vec<f64>]) -> f64 {
    z.iter().flatten().map(|v| v * (1.0 - v)).fold(0.0, f64::max)
}

/// P-SCA: solve the relaxation, then repeatedly re-linearize the penalty at
/// the last iterate. Every iterate is projected to a binary assignment and
/// solved exactly; the best of those and the round-robin assignment is
/// returned. `τ` doubles whenever the integrality violation stops shrinking.
pub fn psca_solve(c: &ProblemConstants, inst: &NetworkInstance, opts: &PscaOptions) -> Result<AllocationSolution> {
    let (k_n, s_n) = (inst.n_devices, inst.n_subcarriers);
    if c.k() != k_n {
        return Err(shape_err!("constants for {} devices, instance has {k_n}", c.k()));
    }
    if k_n == 0 || s_n == 0 {
        return Err(Error::Domain("need at least one device and one subcarrier".into()));
    }
    if let Some(t) = opts.tau {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("penalty τ must be positive, got {t}")));
        }
    }
    let mut meta = SolverMeta::new(Method::Psca);
    meta.optimal = false;
    let mut tried: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut best: Option<(f64, Vec<usize>, P2Solution)> = None;
    let mut consider =
        |owners: Vec<usize>, meta: &mut SolverMeta, best: &mut Option<(f64, Vec<usize>, P2Solution)>| -> Result<()> {
            if tried.contains_key(&owners) {
                return Ok(());
            }
            let sol = solve_fixed(c, inst, &assignment_from_owners(&owners, k_n), opts.max_dropout)?;
            meta.assignments_evaluated += 1;
            tried.insert(owners.clone(), sol.objective);
            let wins = match best {
                None => sol.feasible,
                Some((b, o, _)) => sol.feasible && (sol.objective < *b || (sol.objective == *b && owners < *o)),
            };
            if wins {
                *best = Some((sol.objective, owners, sol));
            }
            Ok(())
        };
    consider((0..s_n).map(|s| s % k_n).collect(), &mut meta, &mut best)?;

    let zeros = vec![vec![0.0; s_n]; k_n];
    let root = solve_p3(c, inst, &zeros, 0.0, opts.max_dropout)?;
    if root.feasible {
        let mut tau = opts.tau.unwrap_or(10.0 * root.objective.abs()).max(f64::MIN_POSITIVE);
        let mut z_bar = root.z.clone();
        consider(project(&z_bar), &mut meta, &mut best)?;
        let mut last_violation = violation(&z_bar);
        meta.converged = false;
        for _ in 0..opts.max_outer {
            meta.iterations += 1;
            let p3 = solve_p3(c, inst, &z_bar, tau, opts.max_dropout)?;
            if !p3.feasible {
                break;
            }
            consider(project(&p3.z), &mut meta, &mut best)?;
            let step =
                p3.z.iter()
                    .flatten()
                    .zip(z_bar.iter().flatten())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
            let v = violation(&p3.z);
            z_bar = p3.z;
            if step < opts.tol && v <= opts.integrality_tol {
                meta.converged = true;
                last_violation = v;
                break;
            }
            if v > 0.9 * last_violation || step < opts.tol {
                tau *= 2.0;
            }
            last_violation = v;
        }
        meta.integrality_violation = Some(last_violation);
        meta.final_tau = Some(tau);
        if !meta.converged {
            meta.notes
                .push(format!("no convergence within {} outer iterations", opts.max_outer));
        }
    } else {
        meta.converged = false;
        meta.notes
            .push("relaxation has no strictly feasible point; kept the round-robin assignment".into());
    }
    match best {
        Some((_, owners, sol)) => Ok(to_solution(sol, assignment_from_owners(&owners, k_n), meta)),
        None => Err(Error::Infeasible(
            "no feasible assignment among the P-SCA iterates".into(),
        )),
    }
}
