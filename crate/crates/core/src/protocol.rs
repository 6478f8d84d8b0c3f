//! Round engine: per-device sub-adapter generation, client tuning, zero-padded
//! weighted aggregation and the Monte-Carlo gradient-error estimator.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::lora::{
    check_rate, sample_mask, sub_adapter_size, AdapterGradient, DropoutMask, LoraAdapter, MaskMode, Matrix,
    PackedGradient,
};
use crate::model::{Sample, ToyNetwork};
use crate::rng::derive_seed;

/// Which mask distribution the server draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskFamily {
    #[default]
    Bernoulli,
    /// `N(1, rate / (1 - rate))`; nothing is dropped, so the payload is full.
    Gaussian,
}

impl MaskFamily {
    pub fn mode_for(self, rate: f64) -> Result<MaskMode> {
        match self {
            MaskFamily::Bernoulli => Ok(MaskMode::Bernoulli),
            MaskFamily::Gaussian => MaskMode::variance_matched(rate),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub model: ToyNetwork,
    round: u64,
    global_seed: u64,
}

/// What the server dispatches to one device.
#[derive(Debug, Clone, PartialEq)]
pub struct SubAdapters {
    pub device: usize,
    pub rate: f64,
    pub masks: Vec<DropoutMask>,
    /// `(B̂, Â)` per adapted layer.
    pub adapters: Vec<LoraAdapter>,
}

impl SubAdapters {
    /// Parameters carried by the sub-adapters (the full adapter for gaussian masks).
    pub fn payload(&self) -> usize {
        self.masks
            .iter()
            .zip(&self.adapters)
            .map(|(m, a)| sub_adapter_size(m, a.rank()).unwrap_or_else(|_| a.full_size()))
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientReport {
    pub device: usize,
    pub round: u64,
    /// Kept rows of `∂B̂` and kept columns of `∂Â`, per adapted layer.
    pub gradients: Vec<PackedGradient>,
    pub shard_size: usize,
    pub loss_before: f64,
    pub loss_after: f64,
}

impl ClientReport {
    pub fn payload(&self) -> usize {
        self.gradients.iter().map(PackedGradient::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub rates: Vec<f64>,
    /// Parameters uploaded by each device.
    pub payload_params: Vec<usize>,
    /// Loss of the updated global model over all training shards.
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub client_loss_before: Vec<f64>,
    pub client_loss_after: Vec<f64>,
    /// Largest F-norm of any reported adapter gradient block.
    pub max_grad_norm: f64,
    /// Largest F-norm of any global adapter matrix after the update.
    pub max_weight_norm: f64,
    pub gradient_error: Option<f64>,
}

/// Per-round training inputs.
#[derive(Debug, Clone, Copy)]
pub struct RoundInputs<'a> {
    pub shards: &'a [Vec<Sample>],
    pub eval: Option<&'a [Sample]>,
    pub lr: f64,
    pub local_epochs: usize,
    pub mask_family: MaskFamily,
}

impl ServerState {
    pub fn new(model: ToyNetwork, global_seed: u64) -> Self {
        ServerState {
            model,
            round: 0,
            global_seed,
        }
    }

    /// Number of completed aggregations.
    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn global_seed(&self) -> u64 {
        self.global_seed
    }

    /// Seed of the mask of `device` on adapted layer `layer` in the current round.
    pub fn mask_seed(&self, device: usize, layer: usize) -> u64 {
        derive_seed(&[self.global_seed, self.round, device as u64, layer as u64])
    }

    /// Draws the masks of every device and masks the global adapters with them.
    pub fn generate_sub_adapters(&self, rates: &[f64], family: MaskFamily) -> Result<Vec<SubAdapters>> {
        rates
            .iter()
            .enumerate()
            .map(|(k, &rate)| {
                check_rate(rate)?;
                let mode = family.mode_for(rate)?;
                let mut masks = Vec::new();
                let mut adapters = Vec::new();
                for (l, ad) in self.model.adapters().enumerate() {
                    let m = sample_mask(rate, (ad.n1(), ad.n2()), mode, self.mask_seed(k, l))?;
                    adapters.push(ad.masked(&m)?);
                    masks.push(m);
                }
                Ok(SubAdapters {
                    device: k,
                    rate,
                    masks,
                    adapters,
                })
            })
            .collect()
    }

    /// Rebuilds full-size gradients from the reports and applies
    /// `θ ← θ − α Σ_k (|D_k|/|D|) ĝ_k`, summing in device order.
    pub fn zero_pad_and_aggregate(&self, reports: &[ClientReport], lr: f64) -> Result<ServerState> {
        if !(lr > 0.0) {
            return Err(domain_err!("learning rate must be positive, got {lr}"));
        }
        if reports.is_empty() {
            return Err(Error::Protocol("no client reports".into()));
        }
        let mut ordered: Vec<&ClientReport> = reports.iter().collect();
        ordered.sort_by_key(|r| r.device);
        for (k, r) in ordered.iter().enumerate() {
            if r.device != k {
                return Err(Error::Protocol(alloc::format!(
                    "missing or duplicate report for device {k}"
                )));
            }
            if r.round != self.round {
                return Err(Error::Protocol(alloc::format!(
                    "report of device {k} is from round {}, server is at {}",
                    r.round,
                    self.round
                )));
            }
            if r.shard_size == 0 {
                return Err(domain_err!("device {k} reported an empty shard"));
            }
            if r.gradients.len() != self.model.n_adapted() {
                return Err(shape_err!("device {k} reported {} layers", r.gradients.len()));
            }
        }
        let total: usize = ordered.iter().map(|r| r.shard_size).sum();
        let mut sums: Vec<AdapterGradient> = self.model.adapters().map(AdapterGradient::zeros_like).collect();
        for r in &ordered {
            let w = r.shard_size as f64 / total as f64;
            for ((sum, packed), ad) in sums.iter_mut().zip(&r.gradients).zip(self.model.adapters()) {
                sum.add_scaled(&packed.zero_pad(ad.n1(), ad.n2(), ad.rank())?, w);
            }
        }
        let mut next = self.clone();
        next.model.apply_gradients(&sums, lr)?;
        next.round += 1;
        Ok(next)
    }

    /// One full round: masks, local tuning on every device, aggregation, metrics.
    pub fn run_round(&self, rates: &[f64], inputs: &RoundInputs<'_>) -> Result<(ServerState, RoundReport)> {
        if rates.len() != inputs.shards.len() {
            return Err(shape_err!("{} rates for {} devices", rates.len(), inputs.shards.len()));
        }
        let subs = self.generate_sub_adapters(rates, inputs.mask_family)?;
        let reports = subs
            .iter()
            .zip(inputs.shards)
            .map(|(sub, shard)| client_local_tuning(self, sub, shard, inputs.lr, inputs.local_epochs))
            .collect::<Result<Vec<_>>>()?;
        let next = self.zero_pad_and_aggregate(&reports, inputs.lr)?;

        let mut max_grad_norm: f64 = 0.0;
        for r in &reports {
            for g in &r.gradients {
                max_grad_norm = max_grad_norm.max(g.values_a.norm()).max(g.values_b.norm());
            }
        }
        let total: usize = inputs.shards.iter().map(Vec::len).sum();
        let mut train_loss = 0.0;
        for shard in inputs.shards {
            train_loss += next.model.loss(shard, None)? * shard.len() as f64 / total as f64;
        }
        let (eval_loss, eval_accuracy) = match inputs.eval {
            Some(e) => (Some(next.model.loss(e, None)?), Some(next.model.accuracy(e)?)),
            None => (None, None),
        };
        let report = RoundReport {
            round: next.round,
            rates: rates.to_vec(),
            payload_params: reports.iter().map(ClientReport::payload).collect(),
            train_loss,
            eval_loss,
            eval_accuracy,
            client_loss_before: reports.iter().map(|r| r.loss_before).collect(),
            client_loss_after: reports.iter().map(|r| r.loss_after).collect(),
            max_grad_norm,
            max_weight_norm: max_weight_norm(&next.model),
            gradient_error: None,
        };
        Ok((next, report))
    }
}

fn max_weight_norm(net: &ToyNetwork) -> f64 {
    net.adapters()
        .fold(0.0, |m: f64, a| m.max(a.a().norm()).max(a.b().norm()))
}

/// Trains the device's sub-adapters on its shard and packs the result.
///
/// With one local epoch the report is the shard-mean gradient at the dispatched
/// weights. With more epochs the device runs local gradient steps and reports
/// `(start - end) / lr`, so aggregation with the same `lr` applies the
/// weighted mean of the local weight changes.
pub fn client_local_tuning(
    server: &ServerState,
    sub: &SubAdapters,
    shard: &[Sample],
    lr: f64,
    epochs: usize,
) -> Result<ClientReport> {
    if shard.is_empty() {
        return Err(domain_err!("device {} has an empty shard", sub.device));
    }
    if epochs == 0 {
        return Err(domain_err!("at least one local epoch is required"));
    }
    if !(lr > 0.0) {
        return Err(domain_err!("learning rate must be positive, got {lr}"));
    }
    let masks = &sub.masks[..];
    let (loss_before, first) = server.model.loss_and_gradients(shard, Some(masks))?;
    let mut local = server.model.clone();
    local.apply_gradients(&first, lr)?;
    let grads = if epochs == 1 {
        first
    } else {
        for _ in 1..epochs {
            let g = local.backward_all(shard, Some(masks))?;
            local.apply_gradients(&g, lr)?;
        }
        server
            .model
            .adapters()
            .zip(local.adapters())
            .map(|(start, end)| AdapterGradient {
                grad_a: (start.a() - end.a()) / lr,
                grad_b: (start.b() - end.b()) / lr,
            })
            .collect()
    };
    let loss_after = local.loss(shard, Some(masks))?;
    let gradients = grads
        .iter()
        .zip(masks)
        .map(|(g, m)| PackedGradient::pack(g, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClientReport {
        device: sub.device,
        round: server.round,
        gradients,
        shard_size: shard.len(),
        loss_before,
        loss_after,
    })
}

/// Monte-Carlo estimate of the gradient error together with the largest
/// gradient and weight norms seen while computing it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientErrorEstimate {
    /// Mean over mask draws of `sum over layers ‖J‖_F²`.
    pub mean_sq_error: f64,
    pub max_grad_norm: f64,
    pub max_weight_norm: f64,
    pub draws: usize,
}

/// `J = Σ_k w_k [B (∂A_k − ∂Â_k) + (∂B_k − ∂B̂_k) A]` per adapted layer: the
/// ideal aggregated update of `BA` minus the masked one.
pub fn estimate_gradient_error(
    server: &ServerState,
    shards: &[Vec<Sample>],
    rates: &[f64],
    n_mask_samples: usize,
    seed: u64,
) -> Result<GradientErrorEstimate> {
    if n_mask_samples == 0 {
        return Err(domain_err!("need at least one mask draw"));
    }
    if rates.len() != shards.len() {
        return Err(shape_err!("{} rates for {} devices", rates.len(), shards.len()));
    }
    let total: usize = shards.iter().map(Vec::len).sum();
    if total == 0 || shards.iter().any(Vec::is_empty) {
        return Err(domain_err!("every device needs data"));
    }
    let weights: Vec<f64> = shards.iter().map(|s| s.len() as f64 / total as f64).collect();
    let adapters: Vec<&LoraAdapter> = server.model.adapters().collect();
    let ideal: Vec<Vec<AdapterGradient>> = shards
        .iter()
        .map(|s| server.model.backward_all(s, None))
        .collect::<Result<_>>()?;
    let mut max_grad: f64 = 0.0;
    for g in ideal.iter().flatten() {
        max_grad = max_grad.max(g.grad_a.norm()).max(g.grad_b.norm());
    }
    let mut acc = 0.0;
    for draw in 0..n_mask_samples {
        let mut j: Vec<Matrix> = adapters.iter().map(|a| Matrix::zeros(a.n1(), a.n2())).collect();
        for (k, shard) in shards.iter().enumerate() {
            check_rate(rates[k])?;
            let masks = adapters
                .iter()
                .enumerate()
                .map(|(l, a)| {
                    let s = derive_seed(&[seed, draw as u64, k as u64, l as u64]);
                    sample_mask(rates[k], (a.n1(), a.n2()), MaskMode::Bernoulli, s)
                })
                .collect::<Result<Vec<_>>>()?;
            let masked = server.model.backward_all(shard, Some(&masks))?;
            for (l, a) in adapters.iter().enumerate() {
                let g = &ideal[k][l];
                let h = &masked[l];
                max_grad = max_grad.max(h.grad_a.norm()).max(h.grad_b.norm());
                j[l] += (a.b() * (&g.grad_a - &h.grad_a) + (&g.grad_b - &h.grad_b) * a.a()) * weights[k];
            }
        }
        acc += j.iter().map(Matrix::norm_squared).sum::<f64>();
    }
    Ok(GradientErrorEstimate {
        mean_sq_error: acc / n_mask_samples as f64,
        max_grad_norm: max_grad,
        max_weight_norm: max_weight_norm(&server.model),
        draws: n_mask_samples,
    })
}

/// `E‖J‖_F²` summed over adapted layers.
pub fn measure_gradient_error(
    server: &ServerState,
    shards: &[Vec<Sample>],
    rates: &[f64],
    n_mask_samples: usize,
    seed: u64,
) -> Result<f64> {
    Ok(estimate_gradient_error(server, shards, rates, n_mask_samples, seed)?.mean_sq_error)
}
