//! OFDMA edge system: Shannon rates, per-step latency and energy of a round,
//! and the latency / energy / assignment / coverage / rate constraints.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::rng::{rng_from, tag};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// CPU frequency `f_k` (cycles/s).
    pub cpu_freq: f64,
    /// Cycles per training sample `C_k`.
    pub cycles_per_sample: f64,
    /// Effective switched capacitance `Ω_k` (J·s²/cycle³).
    pub compute_coeff: f64,
    /// Circuit energy `ξ_k` (J), including downlink reception.
    pub circuit_energy: f64,
    /// Per-round energy budget `E_{k,0}` (J).
    pub energy_budget: f64,
    pub shard_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkInstance {
    pub n_devices: usize,
    pub n_subcarriers: usize,
    /// Bandwidth `B` of one subcarrier (Hz).
    pub subcarrier_bandwidth: f64,
    /// Noise power `σ²` (W).
    pub noise_power: f64,
    /// Bits per transmitted parameter `Q`.
    pub bits_per_param: f64,
    /// `|h^{dl}_{k,s}|²`.
    pub gain_dl: Vec<Vec<f64>>,
    /// `|h^{ul}_{k,s}|²`.
    pub gain_ul: Vec<Vec<f64>>,
    /// Downlink transmit power per (device, subcarrier) (W).
    pub tx_power_dl: Vec<Vec<f64>>,
    /// Uplink transmit power per (device, subcarrier) (W); fixes the uplink rates.
    pub tx_power_ul: Vec<Vec<f64>>,
    /// Round deadline `T₀` (s).
    pub round_deadline: f64,
    pub devices: Vec<DeviceProfile>,
    /// Full adapter payload `M = U'(n1 + n2)r` (parameters).
    pub params_full: usize,
}

/// Decisions of one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundAllocation {
    /// `z[k][s]`.
    pub assignment: Vec<Vec<bool>>,
    /// `M̂[k][s]`, parameters carried on subcarrier `s` by device `k`.
    pub params: Vec<Vec<f64>>,
    pub dropout_rates: Vec<f64>,
    /// `R^{ul}[k][s]` (bits/s).
    pub uplink_rates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latencies {
    pub downlink: f64,
    pub compute: f64,
    pub uplink: f64,
}

impl Latencies {
    pub fn total(&self) -> f64 {
        self.downlink + self.compute + self.uplink
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Energies {
    pub uplink: f64,
    pub compute: f64,
    pub circuit: f64,
}

impl Energies {
    pub fn total(&self) -> f64 {
        self.uplink + self.compute + self.circuit
    }
}

/// A violated constraint of one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "constraint", rename_all = "snake_case")]
pub enum Violation {
    Latency { total: f64, deadline: f64 },
    Energy { total: f64, budget: f64 },
    Coverage { carried: f64, required: f64 },
    Rate { gamma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub devices: Vec<Vec<Violation>>,
    /// Subcarriers not assigned to exactly one device.
    pub bad_subcarriers: Vec<usize>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.bad_subcarriers.is_empty() && self.devices.iter().all(Vec::is_empty)
    }
}

/// `B log₂(1 + snr)`.
pub fn shannon_rate(bandwidth: f64, snr: f64) -> f64 {
    bandwidth * Float::log2(1.0 + snr)
}

impl NetworkInstance {
    pub fn validate(&self) -> Result<()> {
        let (k, s) = (self.n_devices, self.n_subcarriers);
        if k == 0 || s == 0 {
            return Err(domain_err!("need at least one device and one subcarrier"));
        }
        if self.devices.len() != k {
            return Err(shape_err!("{} device profiles for {k} devices", self.devices.len()));
        }
        for (name, m) in [
            ("gain_dl", &self.gain_dl),
            ("gain_ul", &self.gain_ul),
            ("tx_power_dl", &self.tx_power_dl),
            ("tx_power_ul", &self.tx_power_ul),
        ] {
            if m.len() != k || m.iter().any(|row| row.len() != s) {
                return Err(shape_err!("{name} must be {k}x{s}"));
            }
            if m.iter().flatten().any(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(domain_err!("{name} entries must be positive"));
            }
        }
        for (name, v) in [
            ("subcarrier_bandwidth", self.subcarrier_bandwidth),
            ("noise_power", self.noise_power),
            ("bits_per_param", self.bits_per_param),
            ("round_deadline", self.round_deadline),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(domain_err!("{name} must be positive, got {v}"));
            }
        }
        for (i, d) in self.devices.iter().enumerate() {
            let ok = [d.cpu_freq, d.cycles_per_sample, d.compute_coeff, d.energy_budget]
                .iter()
                .all(|&v| v > 0.0 && v.is_finite())
                && d.circuit_energy >= 0.0
                && d.shard_size > 0;
            if !ok {
                return Err(domain_err!("device {i} has a non-positive profile entry"));
            }
        }
        if self.params_full == 0 {
            return Err(domain_err!("params_full must be positive"));
        }
        Ok(())
    }

    pub fn downlink_rate(&self, k: usize, s: usize) -> f64 {
        let snr = self.gain_dl[k][s] * self.tx_power_dl[k][s] / self.noise_power;
        shannon_rate(self.subcarrier_bandwidth, snr)
    }

    /// Rate reached with the configured uplink power.
    pub fn uplink_rate(&self, k: usize, s: usize) -> f64 {
        let snr = self.gain_ul[k][s] * self.tx_power_ul[k][s] / self.noise_power;
        shannon_rate(self.subcarrier_bandwidth, snr)
    }

    /// `(2^{R/B} − 1) σ² / |h^{ul}|²`.
    pub fn uplink_power_for_rate(&self, k: usize, s: usize, rate: f64) -> f64 {
        (Float::exp2(rate / self.subcarrier_bandwidth) - 1.0) * self.noise_power / self.gain_ul[k][s]
    }

    pub fn uplink_rates(&self) -> Vec<Vec<f64>> {
        (0..self.n_devices)
            .map(|k| (0..self.n_subcarriers).map(|s| self.uplink_rate(k, s)).collect())
            .collect()
    }

    /// `C_k |D_k| / f_k`.
    pub fn compute_latency(&self, k: usize) -> f64 {
        let d = &self.devices[k];
        d.cycles_per_sample * d.shard_size as f64 / d.cpu_freq
    }

    /// `Ω_k T_cmp f_k³`.
    pub fn compute_energy(&self, k: usize) -> f64 {
        let d = &self.devices[k];
        d.compute_coeff * self.compute_latency(k) * Float::powi(d.cpu_freq, 3)
    }

    /// Uplink energy per parameter on subcarrier `s`: `P^{ul} Q / R^{ul}`.
    pub fn uplink_energy_per_param(&self, k: usize, s: usize) -> f64 {
        let r = self.uplink_rate(k, s);
        self.uplink_power_for_rate(k, s, r) * self.bits_per_param / r
    }

    /// Replaces both gain matrices with `path_loss · Exp(1)` Rayleigh draws.
    pub fn redraw_rayleigh(&mut self, path_loss: f64, seed: u64) {
        let (dl, ul) = rayleigh_gains(self.n_devices, self.n_subcarriers, path_loss, seed);
        self.gain_dl = dl;
        self.gain_ul = ul;
    }

    /// Allocation with `z`, `M̂` and rates filled in from this instance.
    pub fn allocation(
        &self,
        assignment: Vec<Vec<bool>>,
        params: Vec<Vec<f64>>,
        dropout_rates: Vec<f64>,
    ) -> RoundAllocation {
        RoundAllocation {
            assignment,
            params,
            dropout_rates,
            uplink_rates: self.uplink_rates(),
        }
    }
}

/// Independent `|h|² = path_loss · Exp(1)` power gains for downlink and uplink.
pub fn rayleigh_gains(k: usize, s: usize, path_loss: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = rng_from(&[tag::CHANNEL, seed]);
    let mut draw = || -> Vec<Vec<f64>> {
        (0..k)
            .map(|_| {
                (0..s)
                    .map(|_| {
                        let e: f64 = Exp1.sample(&mut rng);
                        // an exact zero would make the channel unusable
                        path_loss * e.max(1e-12)
                    })
                    .collect()
            })
            .collect()
    };
    let dl = draw();
    let ul = draw();
    (dl, ul)
}

fn check_alloc(inst: &NetworkInstance, alloc: &RoundAllocation) -> Result<()> {
    let (k, s) = (inst.n_devices, inst.n_subcarriers);
    fn is_grid<T>(m: &[Vec<T>], k: usize, s: usize) -> bool {
        m.len() == k && m.iter().all(|row| row.len() == s)
    }
    if !is_grid(&alloc.assignment, k, s)
        || !is_grid(&alloc.params, k, s)
        || !is_grid(&alloc.uplink_rates, k, s)
        || alloc.dropout_rates.len() != k
    {
        return Err(shape_err!("allocation does not match a {k}x{s} instance"));
    }
    Ok(())
}

fn transfer_time(params: f64, bits: f64, rate: f64) -> f64 {
    if params <= 0.0 {
        0.0
    } else if rate <= 0.0 {
        f64::INFINITY
    } else {
        params * bits / rate
    }
}

/// `(T_dl, T_cmp, T_ul)` of device `k`. Transfers are limited by the slowest
/// assigned subcarrier; a positive load on a zero-rate subcarrier takes forever.
pub fn step_latencies(inst: &NetworkInstance, alloc: &RoundAllocation, k: usize) -> Result<Latencies> {
    check_alloc(inst, alloc)?;
    let q = inst.bits_per_param;
    let (mut dl, mut ul) = (0.0f64, 0.0f64);
    for s in 0..inst.n_subcarriers {
        if !alloc.assignment[k][s] {
            continue;
        }
        let m = alloc.params[k][s];
        dl = dl.max(transfer_time(m, q, inst.downlink_rate(k, s)));
        ul = ul.max(transfer_time(m, q, alloc.uplink_rates[k][s]));
    }
    Ok(Latencies {
        downlink: dl,
        compute: inst.compute_latency(k),
        uplink: ul,
    })
}

/// `(E_ul, E_cmp, ξ_k)` of device `k`; uplink energy sums power × duration over
/// the assigned subcarriers.
pub fn step_energies(inst: &NetworkInstance, alloc: &RoundAllocation, k: usize) -> Result<Energies> {
    check_alloc(inst, alloc)?;
    let mut e_ul = 0.0;
    for s in 0..inst.n_subcarriers {
        if !alloc.assignment[k][s] || alloc.params[k][s] <= 0.0 {
            continue;
        }
        let rate = alloc.uplink_rates[k][s];
        let t = transfer_time(alloc.params[k][s], inst.bits_per_param, rate);
        e_ul += inst.uplink_power_for_rate(k, s, rate) * t;
    }
    Ok(Energies {
        uplink: e_ul,
        compute: inst.compute_energy(k),
        circuit: inst.devices[k].circuit_energy,
    })
}

/// Relative slack used when comparing against deadlines and budgets.
pub const CHECK_TOL: f64 = 1e-9;

/// Evaluates all constraints; an empty report means the allocation is feasible.
pub fn check_constraints(inst: &NetworkInstance, alloc: &RoundAllocation) -> Result<FeasibilityReport> {
    check_constraints_tol(inst, alloc, CHECK_TOL)
}

pub fn check_constraints_tol(inst: &NetworkInstance, alloc: &RoundAllocation, tol: f64) -> Result<FeasibilityReport> {
    check_alloc(inst, alloc)?;
    let m_full = inst.params_full as f64;
    let mut devices = vec![Vec::new(); inst.n_devices];
    for (k, out) in devices.iter_mut().enumerate() {
        let gamma = alloc.dropout_rates[k];
        if !(0.0..1.0).contains(&gamma) {
            out.push(Violation::Rate { gamma });
        }
        let lat = step_latencies(inst, alloc, k)?.total();
        if !(lat <= inst.round_deadline * (1.0 + tol)) {
            out.push(Violation::Latency {
                total: lat,
                deadline: inst.round_deadline,
            });
        }
        let en = step_energies(inst, alloc, k)?.total();
        let budget = inst.devices[k].energy_budget;
        if !(en <= budget * (1.0 + tol)) {
            out.push(Violation::Energy { total: en, budget });
        }
        let carried: f64 = (0..inst.n_subcarriers)
            .filter(|&s| alloc.assignment[k][s])
            .map(|s| alloc.params[k][s])
            .sum();
        let required = (1.0 - gamma) * m_full;
        if !(carried >= required * (1.0 - tol)) {
            out.push(Violation::Coverage { carried, required });
        }
    }
    let bad_subcarriers = (0..inst.n_subcarriers)
        .filter(|&s| (0..inst.n_devices).filter(|&k| alloc.assignment[k][s]).count() != 1)
        .collect();
    Ok(FeasibilityReport {
        devices,
        bad_subcarriers,
    })
}

/// Scalar description of an instance family; gains are drawn per seed.
/// Missing fields deserialize to their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkParams {
    pub subcarrier_bandwidth: f64,
    pub noise_power: f64,
    pub bits_per_param: f64,
    pub tx_power_dl: f64,
    pub tx_power_ul: f64,
    pub path_loss: f64,
    pub round_deadline: f64,
    pub cpu_freq: f64,
    pub cycles_per_sample: f64,
    pub compute_coeff: f64,
    pub circuit_energy: f64,
    pub energy_budget: f64,
}

impl Default for NetworkParams {
    fn default() -> Self {
        NetworkParams {
            subcarrier_bandwidth: 1e4,
            noise_power: 1e-10,
            bits_per_param: 32.0,
            tx_power_dl: 1.0,
            tx_power_ul: 0.1,
            path_loss: 1e-3,
            round_deadline: 0.05,
            cpu_freq: 1e9,
            cycles_per_sample: 1e5,
            compute_coeff: 1e-28,
            circuit_energy: 1e-4,
            energy_budget: 0.01,
        }
    }
}

impl NetworkParams {
    pub fn instance(
        &self,
        shard_sizes: &[usize],
        n_subcarriers: usize,
        params_full: usize,
        seed: u64,
    ) -> Result<NetworkInstance> {
        let k = shard_sizes.len();
        let (gain_dl, gain_ul) = rayleigh_gains(k, n_subcarriers, self.path_loss, seed);
        let inst = NetworkInstance {
            n_devices: k,
            n_subcarriers,
            subcarrier_bandwidth: self.subcarrier_bandwidth,
            noise_power: self.noise_power,
            bits_per_param: self.bits_per_param,
            gain_dl,
            gain_ul,
            tx_power_dl: vec![vec![self.tx_power_dl; n_subcarriers]; k],
            tx_power_ul: vec![vec![self.tx_power_ul; n_subcarriers]; k],
            round_deadline: self.round_deadline,
            devices: shard_sizes
                .iter()
                .map(|&n| DeviceProfile {
                    cpu_freq: self.cpu_freq,
                    cycles_per_sample: self.cycles_per_sample,
                    compute_coeff: self.compute_coeff,
                    circuit_energy: self.circuit_energy,
                    energy_budget: self.energy_budget,
                    shard_size: n,
                })
                .collect(),
            params_full,
        };
        inst.validate()?;
        Ok(inst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use approx::assert_relative_eq;
    use rand::{Rng as _, SeedableRng};

    fn unit_instance(k: usize, s: usize) -> NetworkInstance {
        NetworkInstance {
            n_devices: k,
            n_subcarriers: s,
            subcarrier_bandwidth: 1.0,
            noise_power: 1.0,
            bits_per_param: 32.0,
            gain_dl: vec![vec![1.0; s]; k],
            gain_ul: vec![vec![1.0; s]; k],
            tx_power_dl: vec![vec![3.0; s]; k],
            tx_power_ul: vec![vec![3.0; s]; k],
            round_deadline: 1.0,
            devices: vec![
                DeviceProfile {
                    cpu_freq: 1e9,
                    cycles_per_sample: 1e3,
                    compute_coeff: 1e-28,
                    circuit_energy: 0.0,
                    energy_budget: 1.0,
                    shard_size: 100,
                };
                k
            ],
            params_full: 10,
        }
    }

    #[test]
    fn rate_examples() {
        assert_relative_eq!(shannon_rate(1.0, 3.0), 2.0, epsilon = 1e-15);
        assert_eq!(shannon_rate(1.0, 0.0), 0.0);
        assert_relative_eq!(shannon_rate(1e6, 15.0), 4e6, epsilon = 1e-6);
        let inst = unit_instance(1, 1);
        assert_relative_eq!(inst.downlink_rate(0, 0), 2.0, epsilon = 1e-15);
    }

    #[test]
    fn power_examples() {
        let inst = unit_instance(1, 1);
        assert_eq!(inst.uplink_power_for_rate(0, 0, 0.0), 0.0);
        assert_relative_eq!(inst.uplink_power_for_rate(0, 0, 2.0), 3.0, epsilon = 1e-15);
    }

    #[test]
    fn latency_and_energy_examples() {
        let mut inst = unit_instance(1, 2);
        assert_relative_eq!(inst.compute_latency(0), 1e-4, max_relative = 1e-12);
        assert_relative_eq!(inst.compute_energy(0), 1e-5, max_relative = 1e-12);
        let mut heavy = inst.clone();
        heavy.devices[0].cycles_per_sample = 1e6;
        assert_relative_eq!(heavy.compute_latency(0), 0.1, max_relative = 1e-12);
        inst.subcarrier_bandwidth = 1e4;
        let mut alloc = inst.allocation(vec![vec![true, false]], vec![vec![1e3, 0.0]], vec![0.0]);
        alloc.uplink_rates = vec![vec![3.2e4, 1.0]];
        assert_relative_eq!(step_latencies(&inst, &alloc, 0).unwrap().uplink, 1.0, epsilon = 1e-15);

        alloc.assignment = vec![vec![true, true]];
        alloc.params = vec![vec![400.0, 700.0]];
        alloc.uplink_rates = vec![vec![32_000.0, 32_000.0]];
        assert_relative_eq!(step_latencies(&inst, &alloc, 0).unwrap().uplink, 0.7, epsilon = 1e-15);

        alloc.assignment = vec![vec![false, false]];
        assert_eq!(step_energies(&inst, &alloc, 0).unwrap().uplink, 0.0);
        assert_eq!(step_latencies(&inst, &alloc, 0).unwrap().uplink, 0.0);
    }

    #[test]
    fn uplink_energy_sums_over_subcarriers() {
        let mut inst = unit_instance(1, 2);
        inst.bits_per_param = 1.0;
        // R = 1 bit/s on each: power (2^1 − 1)·σ²/|h|² = 1 W; T = M̂ s
        let mut alloc = inst.allocation(vec![vec![true, true]], vec![vec![0.1, 0.2]], vec![0.0]);
        alloc.uplink_rates = vec![vec![1.0, 1.0]];
        assert_relative_eq!(step_energies(&inst, &alloc, 0).unwrap().uplink, 0.3, epsilon = 1e-15);
    }

    #[test]
    fn zero_rate_with_load_is_infinite() {
        let inst = unit_instance(1, 1);
        let mut alloc = inst.allocation(vec![vec![true]], vec![vec![5.0]], vec![0.0]);
        alloc.uplink_rates = vec![vec![0.0]];
        assert_eq!(step_latencies(&inst, &alloc, 0).unwrap().uplink, f64::INFINITY);
        assert!(!check_constraints(&inst, &alloc).unwrap().is_feasible());
    }

    #[test]
    fn coverage_and_deadline_checks() {
        let mut inst = unit_instance(1, 1);
        inst.round_deadline = 1e6;
        inst.devices[0].energy_budget = 1e6;
        let near_one = inst.allocation(vec![vec![true]], vec![vec![0.5]], vec![0.95]);
        assert!(check_constraints(&inst, &near_one).unwrap().is_feasible());
        inst.round_deadline = 0.0;
        let r = check_constraints(&inst, &near_one).unwrap();
        assert!(matches!(r.devices[0][0], Violation::Latency { .. }));
    }

    #[test]
    fn hand_built_feasible_allocation() {
        // two devices, two subcarriers, one each; everything derived by hand
        let mut inst = unit_instance(2, 2);
        inst.subcarrier_bandwidth = 1e4;
        inst.params_full = 100;
        // rate = 1e4 · log2(4) = 2e4 bit/s; 60 params · 32 bit → 0.096 s per direction
        inst.round_deadline = 0.2 + 1e-4;
        // uplink power 3 W for 0.096 s = 0.288 J, plus 1e-5 J compute
        for d in &mut inst.devices {
            d.energy_budget = 0.3;
        }
        let alloc = inst.allocation(
            vec![vec![true, false], vec![false, true]],
            vec![vec![60.0, 0.0], vec![0.0, 60.0]],
            vec![0.4, 0.4],
        );
        let r = check_constraints(&inst, &alloc).unwrap();
        assert!(r.is_feasible(), "{r:?}");
        let lat = step_latencies(&inst, &alloc, 1).unwrap();
        assert_relative_eq!(lat.total(), 0.192 + 1e-4, epsilon = 1e-12);
        let en = step_energies(&inst, &alloc, 0).unwrap();
        assert_relative_eq!(en.total(), 0.288 + 1e-5, epsilon = 1e-12);
        // tighten each constraint in turn
        let mut tight = inst.clone();
        tight.round_deadline = 0.19;
        assert!(!check_constraints(&tight, &alloc).unwrap().is_feasible());
        let mut tight = inst.clone();
        tight.devices[1].energy_budget = 0.28;
        assert_eq!(check_constraints(&tight, &alloc).unwrap().devices[1].len(), 1);
        let mut shared = alloc.clone();
        shared.assignment[1][0] = true;
        assert_eq!(check_constraints(&inst, &shared).unwrap().bad_subcarriers, vec![0]);
    }

    /// Second, literal implementation of the constraint set.
    fn literal(inst: &NetworkInstance, a: &RoundAllocation) -> (Vec<[bool; 4]>, Vec<bool>) {
        let mut per = Vec::new();
        for k in 0..inst.n_devices {
            let mut t_dl: f64 = 0.0;
            let mut t_ul: f64 = 0.0;
            let mut e_ul = 0.0;
            let mut cover = 0.0;
            for s in 0..inst.n_subcarriers {
                let z = if a.assignment[k][s] { 1.0 } else { 0.0 };
                let r_dl = inst.subcarrier_bandwidth
                    * (1.0 + inst.gain_dl[k][s] * inst.tx_power_dl[k][s] / inst.noise_power).log2();
                let r_ul = a.uplink_rates[k][s];
                let p_ul = (2f64.powf(r_ul / inst.subcarrier_bandwidth) - 1.0) * inst.noise_power / inst.gain_ul[k][s];
                t_dl = t_dl.max(z * a.params[k][s] * inst.bits_per_param / r_dl);
                t_ul = t_ul.max(z * a.params[k][s] * inst.bits_per_param / r_ul);
                e_ul += z * p_ul * a.params[k][s] * inst.bits_per_param / r_ul;
                cover += z * a.params[k][s];
            }
            let d = &inst.devices[k];
            let t_cmp = d.cycles_per_sample * d.shard_size as f64 / d.cpu_freq;
            let e_cmp = d.compute_coeff * t_cmp * d.cpu_freq.powi(3);
            let g = a.dropout_rates[k];
            per.push([
                t_dl + t_cmp + t_ul <= inst.round_deadline,
                e_ul + e_cmp + d.circuit_energy <= d.energy_budget,
                cover >= (1.0 - g) * inst.params_full as f64,
                (0.0..1.0).contains(&g),
            ]);
        }
        let c3 = (0..inst.n_subcarriers)
            .map(|s| (0..inst.n_devices).map(|k| a.assignment[k][s] as usize).sum::<usize>() == 1)
            .collect();
        (per, c3)
    }

    #[test]
    fn checker_agrees_with_literal_transcription() {
        let mut rng = Rng::seed_from_u64(77);
        for trial in 0..1000 {
            let k = rng.random_range(1..4);
            let s = rng.random_range(1..5);
            let p = NetworkParams {
                round_deadline: rng.random_range(0.001..0.1),
                energy_budget: rng.random_range(1e-4..0.02),
                ..NetworkParams::default()
            };
            let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(1..50)).collect();
            let inst = p.instance(&sizes, s, rng.random_range(10..400), trial).unwrap();
            let assignment: Vec<Vec<bool>> = (0..k).map(|_| (0..s).map(|_| rng.random_bool(0.5)).collect()).collect();
            let params: Vec<Vec<f64>> = (0..k)
                .map(|_| (0..s).map(|_| rng.random_range(0.0..300.0)).collect())
                .collect();
            let gammas: Vec<f64> = (0..k).map(|_| rng.random_range(-0.1..1.1)).collect();
            let alloc = inst.allocation(assignment, params, gammas);
            let report = check_constraints_tol(&inst, &alloc, 0.0).unwrap();
            let (per, c3) = literal(&inst, &alloc);
            for kk in 0..k {
                let v = &report.devices[kk];
                let has = |f: fn(&Violation) -> bool| v.iter().any(f);
                assert_eq!(
                    !per[kk][0],
                    has(|x| matches!(x, Violation::Latency { .. })),
                    "trial {trial}"
                );
                assert_eq!(
                    !per[kk][1],
                    has(|x| matches!(x, Violation::Energy { .. })),
                    "trial {trial}"
                );
                assert_eq!(
                    !per[kk][2],
                    has(|x| matches!(x, Violation::Coverage { .. })),
                    "trial {trial}"
                );
                assert_eq!(
                    !per[kk][3],
                    has(|x| matches!(x, Violation::Rate { .. })),
                    "trial {trial}"
                );
            }
            let bad: Vec<usize> = (0..s).filter(|&j| !c3[j]).collect();
            assert_eq!(report.bad_subcarriers, bad);
        }
    }

    #[test]
    fn rayleigh_gains_are_seeded_and_scaled() {
        let (a, b) = rayleigh_gains(3, 4, 1e-3, 5);
        assert_eq!((a.clone(), b.clone()), rayleigh_gains(3, 4, 1e-3, 5));
        assert_ne!(a, rayleigh_gains(3, 4, 1e-3, 6).0);
        let (big, _) = rayleigh_gains(200, 50, 1e-3, 1);
        let mean = big.iter().flatten().sum::<f64>() / 10_000.0;
        assert!((mean - 1e-3).abs() < 5e-5, "{mean}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn power_and_rate_are_inverse(gain in 1e-6f64..1.0, power in 1e-4f64..10.0, bw in 1.0f64..1e6) {
                let mut inst = unit_instance(1, 1);
                inst.gain_ul = vec![vec![gain]];
                inst.tx_power_ul = vec![vec![power]];
                inst.subcarrier_bandwidth = bw;
                inst.noise_power = 1e-6;
                let r = inst.uplink_rate(0, 0);
                let p = inst.uplink_power_for_rate(0, 0, r);
                prop_assert!((p - power).abs() <= 1e-12 * power.max(1.0) * 10.0);
            }

            #[test]
            fn latency_monotone(m1 in 0.0f64..1e3, dm in 0.0f64..1e3, r1 in 1.0f64..1e5, dr in 0.0f64..1e5) {
                let inst = unit_instance(1, 1);
                let lat = |m: f64, r: f64| {
                    let mut a = inst.allocation(vec![vec![true]], vec![vec![m]], vec![0.0]);
                    a.uplink_rates = vec![vec![r]];
                    step_latencies(&inst, &a, 0).unwrap().uplink
                };
                prop_assert!(lat(m1 + dm, r1) >= lat(m1, r1));
                prop_assert!(lat(m1, r1 + dr) <= lat(m1, r1));
            }
        }
    }
}
