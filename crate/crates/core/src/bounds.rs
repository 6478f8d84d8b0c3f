//! Closed-form stability, generalization, gradient-error, loss-descent and
//! convergence bounds, plus estimation of their constants from a run.

use alloc::vec::Vec;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};

/// Constants of the analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    /// Gradient Lipschitz constant `η`.
    pub eta: f64,
    /// Bound `𝓗` on adapter-gradient F-norms.
    pub grad_bound_h: f64,
    /// Bound `𝓖` on adapter-weight F-norms.
    pub weight_bound_g: f64,
    /// PL constant `μ`.
    pub pl_mu: f64,
    /// Optimality gap `ρ` paired with `μ`.
    pub optimality_gap_rho: f64,
    /// Regularization weight `λ`.
    pub reg_lambda: f64,
    /// `Λ_{k,min}` per device.
    pub hessian_min: Vec<f64>,
    /// Loss range `C`.
    pub loss_range_c: f64,
    /// Confidence `δ`.
    pub confidence_delta: f64,
    pub n1: usize,
    pub n2: usize,
    /// Number of adapted layers `U'`.
    pub u_prime: usize,
    pub shard_sizes: Vec<usize>,
}

impl BoundConstants {
    pub fn k(&self) -> usize {
        self.shard_sizes.len()
    }

    pub fn total_size(&self) -> usize {
        self.shard_sizes.iter().sum()
    }

    /// `|D_k| / |D|`.
    pub fn weights(&self) -> Vec<f64> {
        let total = self.total_size() as f64;
        self.shard_sizes.iter().map(|&s| s as f64 / total).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(domain_err!("{name} must be positive and finite, got {v}"))
            }
        };
        pos(self.eta, "eta")?;
        pos(self.grad_bound_h, "grad_bound_h")?;
        pos(self.weight_bound_g, "weight_bound_g")?;
        pos(self.reg_lambda, "reg_lambda")?;
        pos(self.loss_range_c, "loss_range_c")?;
        if !(self.pl_mu >= 0.0 && self.optimality_gap_rho >= 0.0) {
            return Err(domain_err!("pl_mu and optimality_gap_rho must be non-negative"));
        }
        if !(self.confidence_delta > 0.0 && self.confidence_delta < 1.0) {
            return Err(domain_err!("confidence_delta must be in (0, 1)"));
        }
        if self.shard_sizes.is_empty() || self.shard_sizes.contains(&0) {
            return Err(domain_err!("every device needs a non-empty shard"));
        }
        if self.hessian_min.len() != self.k() {
            return Err(shape_err!(
                "{} hessian minima for {} devices",
                self.hessian_min.len(),
                self.k()
            ));
        }
        if self.hessian_min.iter().any(|&h| !(h >= 0.0)) {
            return Err(domain_err!("hessian minima must be non-negative"));
        }
        if self.n1 == 0 || self.n2 == 0 || self.u_prime == 0 {
            return Err(domain_err!("n1, n2 and u_prime must be positive"));
        }
        Ok(())
    }

    fn check_gammas(&self, gammas: &[f64]) -> Result<()> {
        if gammas.len() != self.k() {
            return Err(shape_err!("{} rates for {} devices", gammas.len(), self.k()));
        }
        if let Some(g) = gammas.iter().find(|g| !(0.0..1.0).contains(*g)) {
            return Err(domain_err!("dropout rate {g} outside [0, 1)"));
        }
        Ok(())
    }

    /// `Λ_{k,min} + 2λ(2γ − γ²)`.
    fn stability_denominator(&self, k: usize, gamma: f64) -> f64 {
        self.hessian_min[k] + 2.0 * self.reg_lambda * drop_probability(gamma)
    }

    /// `U'(n1 + n2)𝓗²𝓖⁴`.
    pub fn dropout_coefficient(&self) -> f64 {
        self.u_prime as f64
            * (self.n1 + self.n2) as f64
            * Float::powi(self.grad_bound_h, 2)
            * Float::powi(self.weight_bound_g, 4)
    }
}

/// Probability that an entry of `B̂Â` is dropped: `2γ − γ²`.
pub fn drop_probability(gamma: f64) -> f64 {
    2.0 * gamma - gamma * gamma
}

/// Pointwise hypothesis stability of device `k`:
/// `2η² / ((Λ_k + 2λ(2γ − γ²)) |D_k|)`. Infinite when the denominator vanishes.
pub fn phs_bound_device(c: &BoundConstants, k: usize, gamma: f64) -> Result<f64> {
    if k >= c.k() {
        return Err(shape_err!("device {k} out of range"));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(domain_err!("dropout rate {gamma} outside [0, 1)"));
    }
    let den = c.stability_denominator(k, gamma) * c.shard_sizes[k] as f64;
    if den <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(2.0 * c.eta * c.eta / den)
}

/// Server-side stability: `Σ_k 2η² / ((Λ_k + 2λ(2γ_k − γ_k²)) |D|)`.
pub fn phs_bound_server(c: &BoundConstants, gammas: &[f64]) -> Result<f64> {
    c.check_gammas(gammas)?;
    let total = c.total_size() as f64;
    let mut sum = 0.0;
    for (k, &g) in gammas.iter().enumerate() {
        let den = c.stability_denominator(k, g);
        if den <= 0.0 {
            return Ok(f64::INFINITY);
        }
        sum += 2.0 * c.eta * c.eta / (den * total);
    }
    Ok(sum)
}

/// `sqrt((C² + Σ_k 24Cη² / (Λ_k + 2λ(2γ_k − γ_k²))) / (2|D|δ))`, holding with
/// probability `1 − δ`.
pub fn generalization_gap(c: &BoundConstants, gammas: &[f64]) -> Result<f64> {
    c.check_gammas(gammas)?;
    if !(c.confidence_delta > 0.0 && c.confidence_delta < 1.0) {
        return Err(domain_err!("confidence_delta must be in (0, 1)"));
    }
    let mut inner = c.loss_range_c * c.loss_range_c;
    for (k, &g) in gammas.iter().enumerate() {
        let den = c.stability_denominator(k, g);
        if den <= 0.0 {
            return Err(domain_err!("device {k}: stability denominator {den} is not positive"));
        }
        inner += 24.0 * c.loss_range_c * c.eta * c.eta / den;
    }
    Ok(Float::sqrt(inner / (2.0 * c.total_size() as f64 * c.confidence_delta)))
}

fn weighted_rate(c: &BoundConstants, gammas: &[f64]) -> Result<f64> {
    c.check_gammas(gammas)?;
    Ok(c.weights().iter().zip(gammas).map(|(w, g)| w * g).sum())
}

/// Whole-model bound on `E‖J‖²`: `2(n1 + n2)U'𝓗²𝓖⁴ Σ_k (|D_k|/|D|) γ_k`.
pub fn gradient_error_bound(c: &BoundConstants, gammas: &[f64]) -> Result<f64> {
    Ok(2.0 * c.dropout_coefficient() * weighted_rate(c, gammas)?)
}

/// Single-layer version of [`gradient_error_bound`] (no `U'` factor).
pub fn gradient_error_bound_per_layer(c: &BoundConstants, gammas: &[f64]) -> Result<f64> {
    Ok(gradient_error_bound(c, gammas)? / c.u_prime as f64)
}

/// `−μρ/η + U'(n1 + n2)𝓗²𝓖⁴ Σ_k (|D_k|/|D|) γ_k / η`.
pub fn loss_descent_bound(c: &BoundConstants, gammas: &[f64]) -> Result<f64> {
    let dropout = c.dropout_coefficient() * weighted_rate(c, gammas)?;
    Ok((-c.pl_mu * c.optimality_gap_rho + dropout) / c.eta)
}

/// Average squared gradient norm over `T` rounds:
/// `(2η/T)(L(θ₀) − L*) + (1/T) Σ_t 2(n1 + n2)U'𝓗²𝓖⁴ Σ_k (|D_k|/|D|) γ_{k,t}`.
pub fn convergence_bound(c: &BoundConstants, schedule: &[Vec<f64>], t: usize, loss_init_gap: f64) -> Result<f64> {
    if t == 0 {
        return Err(domain_err!("T must be at least 1"));
    }
    if schedule.len() != t {
        return Err(shape_err!("schedule has {} rounds, T = {t}", schedule.len()));
    }
    let mut floor = 0.0;
    for gammas in schedule {
        floor += gradient_error_bound(c, gammas)?;
    }
    let t = t as f64;
    Ok(2.0 * c.eta / t * loss_init_gap + floor / t)
}

/// `ℓ + λ(2γ − γ²)‖θ − θ₀‖²`: the dropout-expected loss.
pub fn regularized_loss(base_loss: f64, theta: &[f64], theta0: &[f64], lambda: f64, gamma: f64) -> Result<f64> {
    if theta.len() != theta0.len() {
        return Err(shape_err!("theta has {} entries, theta0 {}", theta.len(), theta0.len()));
    }
    let sq: f64 = theta.iter().zip(theta0).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(base_loss + lambda * drop_probability(gamma) * sq)
}

/// One point of a uniform-rate sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub gamma: f64,
    /// Mean over devices of the per-device stability bound.
    pub phs_device_mean: f64,
    pub phs_server: f64,
    pub generalization_gap: f64,
    pub gradient_error: f64,
    pub loss_descent: f64,
}

/// Evaluates every bound with all devices at the same rate.
pub fn sweep(c: &BoundConstants, grid: &[f64]) -> Result<Vec<BoundRow>> {
    c.validate()?;
    grid.iter()
        .map(|&gamma| {
            let gammas = alloc::vec![gamma; c.k()];
            let mut dev = 0.0;
            for k in 0..c.k() {
                dev += phs_bound_device(c, k, gamma)?;
            }
            Ok(BoundRow {
                gamma,
                phs_device_mean: dev / c.k() as f64,
                phs_server: phs_bound_server(c, &gammas)?,
                generalization_gap: generalization_gap(c, &gammas)?,
                gradient_error: gradient_error_bound(c, &gammas)?,
                loss_descent: loss_descent_bound(c, &gammas)?,
            })
        })
        .collect()
}

/// Weights and gradient observed after one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSnapshot {
    /// Flattened trainable parameters.
    pub weights: Vec<f64>,
    /// Flattened full-batch gradient at `weights`.
    pub gradient: Vec<f64>,
    /// Largest F-norm of any single adapter matrix.
    pub max_weight_norm: f64,
    /// Largest F-norm of any single adapter-gradient block.
    pub max_grad_norm: f64,
}

/// Constants that cannot be read off a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantDefaults {
    pub pl_mu: f64,
    pub optimality_gap_rho: f64,
    pub reg_lambda: f64,
    pub hessian_min: Vec<f64>,
    pub loss_range_c: f64,
    pub confidence_delta: f64,
    /// Used when no two snapshots differ in weights.
    pub eta_fallback: f64,
}

/// Measures `𝓗`, `𝓖` and `η` from a trace; everything else comes from `defaults`.
///
/// `η` is the largest `‖∇(θ₂) − ∇(θ₁)‖ / ‖θ₂ − θ₁‖` over consecutive snapshots.
pub fn estimate_constants(
    trace: &[TraceSnapshot],
    defaults: &ConstantDefaults,
    dims: (usize, usize),
    u_prime: usize,
    shard_sizes: &[usize],
) -> Result<BoundConstants> {
    if trace.is_empty() {
        return Err(domain_err!("empty training trace"));
    }
    let h = trace.iter().map(|s| s.max_grad_norm).fold(0.0, f64::max);
    let g = trace.iter().map(|s| s.max_weight_norm).fold(0.0, f64::max);
    let mut eta: Option<f64> = None;
    for pair in trace.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        if a.weights.len() != b.weights.len() || a.gradient.len() != b.gradient.len() {
            return Err(shape_err!("trace snapshots differ in size"));
        }
        let dw: f64 = a.weights.iter().zip(&b.weights).map(|(x, y)| (x - y) * (x - y)).sum();
        if dw == 0.0 {
            continue;
        }
        let dg: f64 = a.gradient.iter().zip(&b.gradient).map(|(x, y)| (x - y) * (x - y)).sum();
        let ratio = Float::sqrt(dg / dw);
        eta = Some(eta.map_or(ratio, |e| e.max(ratio)));
    }
    let eta = match eta {
        Some(e) if e > 0.0 => e,
        _ => defaults.eta_fallback,
    };
    Ok(BoundConstants {
        eta,
        grad_bound_h: h,
        weight_bound_g: g,
        pl_mu: defaults.pl_mu,
        optimality_gap_rho: defaults.optimality_gap_rho,
        reg_lambda: defaults.reg_lambda,
        hessian_min: defaults.hessian_min.clone(),
        loss_range_c: defaults.loss_range_c,
        confidence_delta: defaults.confidence_delta,
        n1: dims.0,
        n2: dims.1,
        u_prime,
        shard_sizes: shard_sizes.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use alloc::vec;
    use approx::assert_relative_eq;
    use rand::{Rng as _, SeedableRng};

    fn base() -> BoundConstants {
        BoundConstants {
            eta: 1.0,
            grad_bound_h: 1.0,
            weight_bound_g: 1.0,
            pl_mu: 0.0,
            optimality_gap_rho: 0.0,
            reg_lambda: 1.0,
            hessian_min: vec![0.5],
            loss_range_c: 1.0,
            confidence_delta: 0.5,
            n1: 4,
            n2: 4,
            u_prime: 1,
            shard_sizes: vec![4],
        }
    }

    fn random(rng: &mut Rng, k: usize) -> BoundConstants {
        BoundConstants {
            eta: rng.random_range(0.1..3.0),
            grad_bound_h: rng.random_range(0.1..3.0),
            weight_bound_g: rng.random_range(0.1..3.0),
            pl_mu: rng.random_range(0.0..2.0),
            optimality_gap_rho: rng.random_range(0.0..2.0),
            reg_lambda: rng.random_range(0.1..2.0),
            hessian_min: (0..k).map(|_| rng.random_range(0.0..2.0)).collect(),
            loss_range_c: rng.random_range(0.5..5.0),
            confidence_delta: rng.random_range(0.05..0.95),
            n1: rng.random_range(1..20),
            n2: rng.random_range(1..20),
            u_prime: rng.random_range(1..4),
            shard_sizes: (0..k).map(|_| rng.random_range(1..200)).collect(),
        }
    }

    #[test]
    fn device_phs_worked_example() {
        assert_relative_eq!(phs_bound_device(&base(), 0, 0.5).unwrap(), 0.25, epsilon = 1e-15);
        assert_relative_eq!(
            phs_bound_device(&base(), 0, 0.0).unwrap(),
            2.0 / (0.5 * 4.0),
            epsilon = 1e-15
        );
        assert!(phs_bound_device(&base(), 0, 0.5).unwrap() < phs_bound_device(&base(), 0, 0.2).unwrap());
        let mut c = base();
        c.hessian_min = vec![0.0];
        assert_eq!(phs_bound_device(&c, 0, 0.0).unwrap(), f64::INFINITY);
        assert!(phs_bound_device(&c, 0, 1.0).is_err());
    }

    #[test]
    fn server_phs_special_cases() {
        let c = base();
        assert_relative_eq!(
            phs_bound_server(&c, &[0.3]).unwrap(),
            phs_bound_device(&c, 0, 0.3).unwrap(),
            epsilon = 1e-15
        );
        let mut two = base();
        two.hessian_min = vec![0.5, 0.5];
        two.shard_sizes = vec![4, 4];
        let term = 2.0 / ((0.5 + 2.0 * 0.75) * 8.0);
        assert_relative_eq!(
            phs_bound_server(&two, &[0.5, 0.5]).unwrap(),
            2.0 * term,
            epsilon = 1e-15
        );
    }

    #[test]
    fn evaluators_match_direct_summation() {
        let mut rng = Rng::seed_from_u64(12);
        for _ in 0..50 {
            let k = rng.random_range(1..6);
            let c = random(&mut rng, k);
            let g: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..0.95)).collect();
            let d: f64 = c.shard_sizes.iter().map(|&s| s as f64).sum();
            let mut phs = 0.0;
            let mut gen = 0.0;
            let mut wg = 0.0;
            for i in 0..k {
                let den = c.hessian_min[i] + 2.0 * c.reg_lambda * (2.0 * g[i] - g[i] * g[i]);
                phs += 2.0 * c.eta * c.eta / (den * d);
                gen += 24.0 * c.loss_range_c * c.eta * c.eta / den;
                wg += c.shard_sizes[i] as f64 / d * g[i];
            }
            let gen = ((c.loss_range_c * c.loss_range_c + gen) / (2.0 * d * c.confidence_delta)).sqrt();
            let coeff = (c.n1 + c.n2) as f64 * c.u_prime as f64 * c.grad_bound_h.powi(2) * c.weight_bound_g.powi(4);
            assert_relative_eq!(phs_bound_server(&c, &g).unwrap(), phs, max_relative = 1e-12);
            assert_relative_eq!(generalization_gap(&c, &g).unwrap(), gen, max_relative = 1e-12);
            assert_relative_eq!(
                gradient_error_bound(&c, &g).unwrap(),
                2.0 * coeff * wg,
                max_relative = 1e-12
            );
            assert_relative_eq!(
                loss_descent_bound(&c, &g).unwrap(),
                -c.pl_mu * c.optimality_gap_rho / c.eta + coeff * wg / c.eta,
                max_relative = 1e-12,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn generalization_worked_example() {
        let c = BoundConstants {
            hessian_min: vec![0.0],
            reg_lambda: 0.5,
            shard_sizes: vec![100],
            ..base()
        };
        assert_relative_eq!(generalization_gap(&c, &[0.5]).unwrap(), 0.33f64.sqrt(), epsilon = 1e-12);
        assert!(generalization_gap(&c, &[0.0]).is_err());
        let double = BoundConstants {
            shard_sizes: vec![200],
            ..c.clone()
        };
        assert_relative_eq!(
            generalization_gap(&c, &[0.5]).unwrap() / generalization_gap(&double, &[0.5]).unwrap(),
            2.0f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn gradient_error_worked_example() {
        let c = base();
        assert_eq!(gradient_error_bound(&c, &[0.0]).unwrap(), 0.0);
        assert_relative_eq!(gradient_error_bound(&c, &[0.25]).unwrap(), 4.0, epsilon = 1e-15);
    }

    #[test]
    fn loss_descent_worked_examples() {
        let mut c = base();
        c.pl_mu = 1.0;
        c.optimality_gap_rho = 2.0;
        c.eta = 2.0;
        assert_relative_eq!(loss_descent_bound(&c, &[0.0]).unwrap(), -1.0, epsilon = 1e-15);
        // dropout term 1: (n1 + n2) 𝓗²𝓖⁴ γ = 8γ = 1
        assert_relative_eq!(loss_descent_bound(&c, &[0.125]).unwrap(), -0.5, epsilon = 1e-15);
        c.pl_mu = 0.0;
        assert_relative_eq!(
            loss_descent_bound(&c, &[0.3]).unwrap(),
            gradient_error_bound(&c, &[0.3]).unwrap() / (2.0 * c.eta),
            epsilon = 1e-15
        );
    }

    #[test]
    fn convergence_worked_examples() {
        let c = base();
        let zeros = vec![vec![0.0]; 4];
        assert_relative_eq!(convergence_bound(&c, &zeros, 4, 2.0).unwrap(), 1.0, epsilon = 1e-15);
        // per-round dropout term 2 · 8 · γ = 0.5
        let sched = vec![vec![0.5 / 16.0]; 4];
        assert_relative_eq!(convergence_bound(&c, &sched, 4, 2.0).unwrap(), 1.5, epsilon = 1e-15);
        let long = vec![vec![0.5 / 16.0]; 400];
        assert_relative_eq!(convergence_bound(&c, &long, 400, 0.0).unwrap(), 0.5, epsilon = 1e-14);
        assert!(convergence_bound(&c, &[], 0, 1.0).is_err());
    }

    #[test]
    fn regularized_loss_examples() {
        assert_eq!(regularized_loss(1.5, &[1.0, 2.0], &[0.0, 0.0], 3.0, 0.0).unwrap(), 1.5);
        assert_relative_eq!(
            regularized_loss(0.5, &[2.0], &[0.0], 1.0, 0.5).unwrap(),
            3.5,
            epsilon = 1e-15
        );
    }

    #[test]
    fn masked_norm_expectation_matches_closed_form() {
        let mut rng = Rng::seed_from_u64(4);
        let theta: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sq: f64 = theta.iter().map(|v| v * v).sum();
        let gamma = 0.3;
        let p = drop_probability(gamma);
        let draws = 100_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            acc += theta.iter().filter(|_| rng.random_bool(p)).map(|v| v * v).sum::<f64>();
        }
        let mc = acc / draws as f64;
        assert!((mc - p * sq).abs() <= 0.01 * p * sq, "{mc} vs {}", p * sq);
    }

    #[test]
    fn estimates_from_constant_and_two_point_traces() {
        let defaults = ConstantDefaults {
            pl_mu: 0.0,
            optimality_gap_rho: 0.0,
            reg_lambda: 1.0,
            hessian_min: vec![1.0],
            loss_range_c: 1.0,
            confidence_delta: 0.1,
            eta_fallback: 7.0,
        };
        let snap = TraceSnapshot {
            weights: vec![1.0, 2.0],
            gradient: vec![0.5, 0.5],
            max_weight_norm: 3.0,
            max_grad_norm: 0.25,
        };
        let c = estimate_constants(&[snap.clone(), snap.clone()], &defaults, (4, 4), 1, &[10]).unwrap();
        assert_eq!((c.grad_bound_h, c.weight_bound_g, c.eta), (0.25, 3.0, 7.0));
        let moved = TraceSnapshot {
            weights: vec![1.0, 4.0],
            gradient: vec![0.5, 1.5],
            ..snap.clone()
        };
        let c = estimate_constants(&[snap, moved], &defaults, (4, 4), 1, &[10]).unwrap();
        assert_relative_eq!(c.eta, 0.5, epsilon = 1e-15);
        assert!(estimate_constants(&[], &defaults, (4, 4), 1, &[10]).is_err());
    }

    #[test]
    fn eta_estimate_respects_quadratic_curvature() {
        use nalgebra::{DMatrix, DVector, SymmetricEigen};
        let mut rng = Rng::seed_from_u64(8);
        let n = 5;
        let m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let h = &m * m.transpose();
        let top = SymmetricEigen::new(h.clone()).eigenvalues.max();
        let mut trace = Vec::new();
        let mut theta = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        for _ in 0..30 {
            let g = &h * &theta;
            trace.push(TraceSnapshot {
                weights: theta.iter().copied().collect(),
                gradient: g.iter().copied().collect(),
                max_weight_norm: theta.norm(),
                max_grad_norm: g.norm(),
            });
            theta -= g * 0.05 + DVector::from_fn(n, |_, _| rng.random_range(-0.1..0.1));
        }
        let defaults = ConstantDefaults {
            pl_mu: 0.0,
            optimality_gap_rho: 0.0,
            reg_lambda: 1.0,
            hessian_min: vec![0.0],
            loss_range_c: 1.0,
            confidence_delta: 0.1,
            eta_fallback: 1.0,
        };
        let c = estimate_constants(&trace, &defaults, (2, 2), 1, &[1]).unwrap();
        assert!(c.eta <= top * 1.05, "{} > {top}", c.eta);
    }

    #[test]
    fn sweep_rows_follow_the_grid() {
        let rows = sweep(&base(), &[0.0, 0.2, 0.4]).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.windows(2).all(|w| w[1].phs_server < w[0].phs_server));
        assert!(rows.windows(2).all(|w| w[1].gradient_error > w[0].gradient_error));
    }

    mod props {
        use super::*;
        use crate::rng::Rng;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn stability_and_gap_decrease_in_rate(seed in any::<u64>(), g1 in 0.0f64..0.98, dg in 1e-3f64..0.5) {
                let mut rng = Rng::seed_from_u64(seed);
                let c = random(&mut rng, 1);
                let g2 = (g1 + dg).min(0.99);
                prop_assume!(g2 > g1);
                prop_assert!(phs_bound_device(&c, 0, g2).unwrap() < phs_bound_device(&c, 0, g1).unwrap());
                if c.hessian_min[0] > 0.0 || g1 > 0.0 {
                    prop_assert!(generalization_gap(&c, &[g2]).unwrap() < generalization_gap(&c, &[g1]).unwrap());
                }
            }

            #[test]
            fn stability_decreases_in_lambda(seed in any::<u64>(), g in 0.01f64..0.99, dl in 1e-3f64..1.0) {
                let mut rng = Rng::seed_from_u64(seed);
                let c = random(&mut rng, 1);
                let bigger = BoundConstants { reg_lambda: c.reg_lambda + dl, ..c.clone() };
                prop_assert!(phs_bound_device(&bigger, 0, g).unwrap() < phs_bound_device(&c, 0, g).unwrap());
            }

            #[test]
            fn gradient_error_is_linear(seed in any::<u64>(), a in 0.0f64..0.99, b in 0.0f64..0.99) {
                let mut rng = Rng::seed_from_u64(seed);
                let c = random(&mut rng, 1);
                let mid = 0.5 * (a + b);
                let fa = gradient_error_bound(&c, &[a]).unwrap();
                let fb = gradient_error_bound(&c, &[b]).unwrap();
                let fm = gradient_error_bound(&c, &[mid]).unwrap();
                prop_assert!((fm - 0.5 * (fa + fb)).abs() <= 1e-12 * fa.abs().max(fb.abs()).max(1.0));
                prop_assert!(fa >= 0.0);
            }
        }
    }
}
