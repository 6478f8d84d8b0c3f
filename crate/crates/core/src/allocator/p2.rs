//! Fixed-assignment problem.
//!
//! For a fixed `z` the constraints separate by device. Latency, energy and the
//! per-subcarrier rates only limit how many parameters device `k` can carry,
//! `m*_k`, so the coverage constraint becomes `γ̃_k ≤ m*_k / M`. What is left
//! is the convex objective over a box, solved through its KKT conditions.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use super::{gamma_tilde_floor, ProblemConstants};
use crate::error::{shape_err, Error, Result};
use crate::network::NetworkInstance;

/// Most parameters device `k` can upload on the `usable` subcarriers in one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Capacity {
    pub total: f64,
    /// Load per subcarrier at the maximizer.
    pub per_subcarrier: Vec<f64>,
    /// Downlink time budget at the maximizer; the uplink gets the rest of the slack.
    pub t_dl: f64,
    pub t_ul: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct P2Solution {
    pub feasible: bool,
    /// `+∞` when infeasible.
    pub objective: f64,
    pub gamma_tilde: Vec<f64>,
    /// `M̃[k][s]`.
    pub m_tilde: Vec<Vec<f64>>,
    pub t_dl: Vec<f64>,
    pub t_ul: Vec<f64>,
    /// `m*_k`.
    pub capacity: Vec<f64>,
    pub infeasible_devices: Vec<usize>,
    /// Multiplier of `γ̃_k ≤ m*_k/M` (zero when slack).
    pub coverage_multipliers: Vec<f64>,
    pub iterations: usize,
}

/// Latency slack `T₀ − T_cmp` and energy slack `E₀ − E_cmp − ξ`.
pub(crate) fn slacks(inst: &NetworkInstance, k: usize) -> (f64, f64) {
    let l = inst.round_deadline - inst.compute_latency(k);
    let e = inst.devices[k].energy_budget - inst.compute_energy(k) - inst.devices[k].circuit_energy;
    (l, e)
}

/// Fractional knapsack: caps `u_s`, unit value, cost `e_s`, budget `e`.
fn fill(order: &[usize], caps: &[f64], cost: &[f64], mut budget: f64, out: &mut [f64]) -> f64 {
    out.iter_mut().for_each(|v| *v = 0.0);
    let mut total = 0.0;
    for &s in order {
        if budget <= 0.0 {
            break;
        }
        let take = if cost[s] > 0.0 {
            caps[s].min(budget / cost[s])
        } else {
            caps[s]
        };
        out[s] = take;
        total += take;
        budget -= take * cost[s];
    }
    total
}

/// `max Σ_s m_s` subject to `m_s Q/R^{dl}_s ≤ x`, `m_s Q/R^{ul}_s ≤ L − x`,
/// `Σ_s e_s m_s ≤ E`. The optimal value is concave in the split `x`, which is
/// found by golden-section search; the inner problem is a fractional knapsack.
pub fn device_capacity(inst: &NetworkInstance, k: usize, usable: &[bool]) -> Capacity {
    let s_n = inst.n_subcarriers;
    let (l, e) = slacks(inst, k);
    let zero = Capacity {
        total: 0.0,
        per_subcarrier: vec![0.0; s_n],
        t_dl: 0.0,
        t_ul: 0.0,
    };
    if !(l > 0.0) || !(e >= 0.0) || !usable.iter().any(|&u| u) {
        return zero;
    }
    let q = inst.bits_per_param;
    let rdl: Vec<f64> = (0..s_n).map(|s| inst.downlink_rate(k, s)).collect();
    let rul: Vec<f64> = (0..s_n).map(|s| inst.uplink_rate(k, s)).collect();
    let cost: Vec<f64> = (0..s_n).map(|s| inst.uplink_energy_per_param(k, s)).collect();
    let mut order: Vec<usize> = (0..s_n).filter(|&s| usable[s]).collect();
    order.sort_by(|&a, &b| cost[a].total_cmp(&cost[b]).then(a.cmp(&b)));
    let mut caps = vec![0.0; s_n];
    let mut buf = vec![0.0; s_n];
    let mut value = |x: f64, out: &mut [f64]| -> f64 {
        for &s in &order {
            caps[s] = (x * rdl[s]).min((l - x) * rul[s]).max(0.0) / q;
        }
        fill(&order, &caps, &cost, e, out)
    };
    // candidates: the balance point of every subcarrier plus a golden-section search
    let mut best_x = 0.0;
    let mut best = f64::NEG_INFINITY;
    let consider = |x: f64, v: f64, best: &mut f64, best_x: &mut f64| {
        if v > *best {
            *best = v;
            *best_x = x;
        }
    };
    for &s in &order {
        let x = l * rul[s] / (rdl[s] + rul[s]);
        let v = value(x, &mut buf);
        consider(x, v, &mut best, &mut best_x);
    }
    let phi = 0.5 * (Float::sqrt(5.0) - 1.0);
    let (mut lo, mut hi) = (0.0, l);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let mut f1 = value(x1, &mut buf);
    let mut f2 = value(x2, &mut buf);
    for _ in 0..90 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = value(x2, &mut buf);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = value(x1, &mut buf);
        }
    }
    let mid = 0.5 * (lo + hi);
    let v = value(mid, &mut buf);
    consider(mid, v, &mut best, &mut best_x);
    let mut per = vec![0.0; s_n];
    let total = value(best_x, &mut per);
    Capacity {
        total,
        per_subcarrier: per,
        t_dl: best_x,
        t_ul: l - best_x,
    }
}

/// Solves `x/(a − x²)² = t` on `[lo, hi]`, clipping at the ends.
fn invert_stationarity(a: f64, t: f64, lo: f64, hi: f64) -> f64 {
    let phi = |x: f64| {
        let d = a - x * x;
        x / (d * d)
    };
    if t <= phi(lo) {
        return lo;
    }
    if t >= phi(hi) {
        return hi;
    }
    let (mut l, mut u) = (lo, hi);
    let mut x = 0.5 * (lo + hi);
    for _ in 0..100 {
        let d = a - x * x;
        let f = x / (d * d) - t;
        if f > 0.0 {
            u = x;
        } else {
            l = x;
        }
        let df = (a + 3.0 * x * x) / (d * d * d);
        let mut next = x - f / df;
        if !(next > l && next < u) {
            next = 0.5 * (l + u);
        }
        if (next - x).abs() <= 1e-16 * x.abs().max(1e-300) || u - l <= 1e-16 {
            return next;
        }
        x = next;
    }
    x
}

/// Minimizes `Σ_k lin_k (1 − x_k) + c_sqrt sqrt(Σ_k 1/(a_k − x_k²))` over the box
/// `lo ≤ x ≤ hi_k`. For the optimal `σ = sqrt(Σ 1/(a − x²))` each coordinate
/// solves `x/(a − x²)² = lin_k σ / c_sqrt` (clipped), so a bisection on `σ`
/// finds the unique KKT point.
pub(crate) fn box_minimizer(a: &[f64], lin: &[f64], c_sqrt: f64, lo: f64, hi: &[f64]) -> (Vec<f64>, usize) {
    let k = a.len();
    if c_sqrt <= 0.0 {
        let x = (0..k).map(|i| if lin[i] > 0.0 { hi[i] } else { lo }).collect();
        return (x, 0);
    }
    let at = |sigma: f64, x: &mut [f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..k {
            let t = lin[i].max(0.0) * sigma / c_sqrt;
            x[i] = invert_stationarity(a[i], t, lo, hi[i]);
            s += 1.0 / (a[i] - x[i] * x[i]);
        }
        s
    };
    let s_min: f64 = (0..k).map(|i| 1.0 / (a[i] - lo * lo)).sum();
    let s_max: f64 = (0..k).map(|i| 1.0 / (a[i] - hi[i] * hi[i])).sum();
    let (mut l, mut u) = (Float::sqrt(s_min), Float::sqrt(s_max));
    let mut x = vec![0.0; k];
    let mut iters = 0;
    while u - l > 1e-15 * u && iters < 200 {
        iters += 1;
        let mid = 0.5 * (l + u);
        let s = at(mid, &mut x);
        if mid * mid < s {
            l = mid;
        } else {
            u = mid;
        }
    }
    at(0.5 * (l + u), &mut x);
    (x, iters)
}

fn check_z(c: &ProblemConstants, inst: &NetworkInstance, z: &[Vec<bool>]) -> Result<()> {
    c.validate()?;
    if c.k() != inst.n_devices {
        return Err(shape_err!(
            "constants for {} devices, instance has {}",
            c.k(),
            inst.n_devices
        ));
    }
    if z.len() != inst.n_devices || z.iter().any(|r| r.len() != inst.n_subcarriers) {
        return Err(shape_err!(
            "assignment must be {}x{}",
            inst.n_devices,
            inst.n_subcarriers
        ));
    }
    Ok(())
}

/// Assembles a solution from the box optimum and the capacity maximizers.
fn finish(
    c: &ProblemConstants,
    inst: &NetworkInstance,
    caps: &[Capacity],
    gt: Vec<f64>,
    hi: &[f64],
    iterations: usize,
) -> Result<P2Solution> {
    let m_full = inst.params_full as f64;
    let q = inst.bits_per_param;
    let mut m_tilde = Vec::with_capacity(c.k());
    let mut t_dl = Vec::with_capacity(c.k());
    let mut t_ul = Vec::with_capacity(c.k());
    for (k, cap) in caps.iter().enumerate() {
        let scale = if cap.total > 0.0 {
            (gt[k] * m_full / cap.total).min(1.0)
        } else {
            0.0
        };
        let row: Vec<f64> = cap.per_subcarrier.iter().map(|m| m * scale).collect();
        let (mut dl, mut ul) = (0.0f64, 0.0f64);
        for (s, &m) in row.iter().enumerate() {
            if m > 0.0 {
                dl = dl.max(m * q / inst.downlink_rate(k, s));
                ul = ul.max(m * q / inst.uplink_rate(k, s));
            }
        }
        m_tilde.push(row);
        t_dl.push(dl);
        t_ul.push(ul);
    }
    let objective = super::objective_p2(c, &gt)?;
    let grad = super::gradient_p2(c, &gt)?;
    let coverage_multipliers = (0..c.k())
        .map(|k| if gt[k] >= hi[k] { (-grad[k]).max(0.0) } else { 0.0 })
        .collect();
    Ok(P2Solution {
        feasible: true,
        objective,
        gamma_tilde: gt,
        m_tilde,
        t_dl,
        t_ul,
        capacity: caps.iter().map(|c| c.total).collect(),
        infeasible_devices: Vec::new(),
        coverage_multipliers,
        iterations,
    })
}

fn infeasible(c: &ProblemConstants, inst: &NetworkInstance, caps: &[Capacity], bad: Vec<usize>) -> P2Solution {
    P2Solution {
        feasible: false,
        objective: f64::INFINITY,
        gamma_tilde: vec![0.0; c.k()],
        m_tilde: vec![vec![0.0; inst.n_subcarriers]; c.k()],
        t_dl: vec![0.0; c.k()],
        t_ul: vec![0.0; c.k()],
        capacity: caps.iter().map(|c| c.total).collect(),
        infeasible_devices: bad,
        coverage_multipliers: vec![0.0; c.k()],
        iterations: 0,
    }
}

/// Capacities and `γ̃` upper limits; `Err(bad devices)` when some device
/// cannot reach the floor.
fn limits(
    c: &ProblemConstants,
    inst: &NetworkInstance,
    z: &[Vec<bool>],
    lo: f64,
) -> (Vec<Capacity>, core::result::Result<Vec<f64>, Vec<usize>>) {
    let m_full = inst.params_full as f64;
    let caps: Vec<Capacity> = (0..c.k()).map(|k| device_capacity(inst, k, &z[k])).collect();
    let hi: Vec<f64> = caps
        .iter()
        .enumerate()
        .map(|(k, cap)| c.gamma_tilde_cap(k).min(cap.total / m_full))
        .collect();
    let bad: Vec<usize> = (0..c.k()).filter(|&k| !(hi[k] >= lo)).collect();
    if bad.is_empty() {
        (caps, Ok(hi))
    } else {
        (caps, Err(bad))
    }
}

/// Exact solution of the fixed-assignment problem. `z` need not satisfy the
/// one-device-per-subcarrier rule (relaxations share subcarriers).
pub(crate) fn solve_fixed(
    c: &ProblemConstants,
    inst: &NetworkInstance,
    z: &[Vec<bool>],
    max_dropout: f64,
) -> Result<P2Solution> {
    check_z(c, inst, z)?;
    let lo = gamma_tilde_floor(max_dropout)?;
    let (caps, hi) = limits(c, inst, z, lo);
    let hi = match hi {
        Ok(h) => h,
        Err(bad) => return Ok(infeasible(c, inst, &caps, bad)),
    };
    let lin: Vec<f64> = c.weights.iter().map(|w| c.c_lin() * w).collect();
    let (gt, iters) = box_minimizer(&c.a, &lin, c.c_sqrt(), lo, &hi);
    finish(c, inst, &caps, gt, &hi, iters)
}

/// Solves the convex problem for an assignment satisfying the
/// one-device-per-subcarrier rule. `max_dropout` bounds `γ_k` away from 1.
pub fn solve_p2(c: &ProblemConstants, inst: &NetworkInstance, z: &[Vec<bool>], max_dropout: f64) -> Result<P2Solution> {
    check_z(c, inst, z)?;
    for s in 0..inst.n_subcarriers {
        let owners = z.iter().filter(|row| row[s]).count();
        if owners != 1 {
            return Err(Error::Domain(alloc::format!(
                "subcarrier {s} has {owners} owners; exactly one is required"
            )));
        }
    }
    solve_fixed(c, inst, z, max_dropout)
}

/// Settings of the projected multiplier-ascent variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualOptions {
    /// Step `c` of the diminishing schedule `c/√i`; `None` picks the objective scale.
    pub step: Option<f64>,
    pub max_iters: usize,
    /// Stop when multipliers and primal iterates move less than this.
    pub tol: f64,
    pub max_dropout: f64,
}

impl Default for DualOptions {
    fn default() -> Self {
        DualOptions {
            step: None,
            max_iters: 200_000,
            tol: 1e-8,
            max_dropout: 0.999,
        }
    }
}

/// Primal-dual variant: the coverage constraints `γ̃_k ≤ m*_k/M` are priced by
/// multipliers `χ_k` updated by projected ascent with steps `c/√i`; the
/// latency and energy constraints (with their multipliers) are handled inside
/// the capacity subproblem. Each iterate minimizes the Lagrangian over `γ̃`.
pub fn solve_p2_dual(
    c: &ProblemConstants,
    inst: &NetworkInstance,
    z: &[Vec<bool>],
    opts: &DualOptions,
) -> Result<P2Solution> {
    check_z(c, inst, z)?;
    let lo = gamma_tilde_floor(opts.max_dropout)?;
    let (caps, hi) = limits(c, inst, z, lo);
    if let Err(bad) = hi {
        return Ok(infeasible(c, inst, &caps, bad));
    }
    let m_full = inst.params_full as f64;
    let k_n = c.k();
    let bound: Vec<f64> = (0..k_n).map(|k| caps[k].total / m_full).collect();
    let box_hi: Vec<f64> = (0..k_n).map(|k| c.gamma_tilde_cap(k)).collect();
    let step = opts.step.unwrap_or_else(|| c.c_lin().max(c.c_sqrt()).max(1e-12));
    let mut chi = vec![0.0; k_n];
    let mut gt = vec![lo; k_n];
    for i in 1..=opts.max_iters {
        let lin: Vec<f64> = (0..k_n).map(|k| c.c_lin() * c.weights[k] - chi[k]).collect();
        let (next, _) = box_minimizer(&c.a, &lin, c.c_sqrt(), lo, &box_hi);
        let alpha = step / Float::sqrt(i as f64);
        let mut moved: f64 = 0.0;
        for k in 0..k_n {
            let new_chi = (chi[k] + alpha * (next[k] - bound[k])).max(0.0);
            moved = moved.max((new_chi - chi[k]).abs()).max((next[k] - gt[k]).abs());
            chi[k] = new_chi;
        }
        gt = next;
        let primal_ok = (0..k_n).all(|k| gt[k] <= bound[k] * (1.0 + 1e-9));
        if moved < opts.tol && primal_ok {
            // the Lagrangian minimizer can sit a hair above the bound
            let gt: Vec<f64> = (0..k_n).map(|k| gt[k].min(bound[k]).max(lo)).collect();
            let hi: Vec<f64> = (0..k_n).map(|k| box_hi[k].min(bound[k])).collect();
            let mut sol = finish(c, inst, &caps, gt, &hi, i)?;
            sol.coverage_multipliers = chi;
            return Ok(sol);
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iters,
        detail: alloc::format!("last γ̃ = {gt:?}, χ = {chi:?}"),
    })
}
