//! A small feed-forward network whose linear layers are either LoRA-adapted
//! or frozen, plus synthetic Gaussian-cluster data and Dirichlet sharding.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::lora::{AdapterGradient, DropoutMask, LoraAdapter, Matrix, Vector};
use crate::rng::{rng_from, tag, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, h: &Vector) -> Vector {
        match self {
            Activation::Tanh => h.map(Float::tanh),
            Activation::Relu => h.map(|v| v.max(0.0)),
            Activation::Identity => h.clone(),
        }
    }

    fn derivative(self, h: &Vector) -> Vector {
        match self {
            Activation::Tanh => h.map(|v| {
                let t = Float::tanh(v);
                1.0 - t * t
            }),
            Activation::Relu => h.map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
            Activation::Identity => Vector::from_element(h.len(), 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    SoftmaxCrossEntropy,
    /// Mean over output units of the squared error against a one-hot target.
    MeanSquaredError,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Adapted(LoraAdapter),
    Frozen(Matrix),
}

impl Layer {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Layer::Adapted(a) => (a.n1(), a.n2()),
            Layer::Frozen(w) => w.shape(),
        }
    }

    pub fn base(&self) -> &Matrix {
        match self {
            Layer::Adapted(a) => a.base(),
            Layer::Frozen(w) => w,
        }
    }
}

/// Layers applied in order; the activation follows every layer but the last,
/// whose output is the logit (or regression) vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyNetwork {
    layers: Vec<Layer>,
    activation: Activation,
    loss: LossKind,
}

/// Shape of a randomly initialized network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// `[input, hidden..., output]`; there are `dims.len() - 1` layers.
    pub dims: Vec<usize>,
    /// Indices of the layers that carry an adapter.
    pub adapted: Vec<usize>,
    pub rank: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub loss: LossKind,
    /// Std-dev multiplier of the frozen weights (`N(0, scale^2 / n_in)`).
    #[serde(default = "default_base_scale")]
    pub base_scale: f64,
    /// `A ~ U(-s, s)` at initialization.
    #[serde(default = "default_a_scale")]
    pub a_init_scale: f64,
}

fn default_base_scale() -> f64 {
    1.0
}

fn default_a_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub samples: Vec<Sample>,
    pub dim: usize,
    pub n_classes: usize,
    pub generator_seed: u64,
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub dim: usize,
    pub n_classes: usize,
    /// Norm of each class mean.
    #[serde(default = "default_sep")]
    pub class_sep: f64,
    /// Per-coordinate std-dev around the class mean.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Fraction of samples whose label is replaced by a uniformly random class.
    #[serde(default)]
    pub label_noise: f64,
}

fn default_sep() -> f64 {
    3.0
}

fn default_noise() -> f64 {
    1.0
}

/// Index sets of the per-device shards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

/// Inputs and pre-activations of every layer for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub inputs: Vec<Vector>,
    pub pre: Vec<Vector>,
}

impl Trace {
    pub fn output(&self) -> &Vector {
        self.pre.last().expect("network has at least one layer")
    }
}

impl ToyNetwork {
    pub fn new(layers: Vec<Layer>, activation: Activation, loss: LossKind) -> Result<Self> {
        if layers.is_empty() {
            return Err(domain_err!("network needs at least one layer"));
        }
        for w in layers.windows(2) {
            let (out, _) = w[0].shape();
            let (_, inp) = w[1].shape();
            if out != inp {
                return Err(shape_err!("layer output {out} does not feed next input {inp}"));
            }
        }
        Ok(ToyNetwork {
            layers,
            activation,
            loss,
        })
    }

    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        if spec.dims.len() < 2 {
            return Err(domain_err!("dims must list at least input and output"));
        }
        let n_layers = spec.dims.len() - 1;
        if let Some(&bad) = spec.adapted.iter().find(|&&u| u >= n_layers) {
            return Err(domain_err!("adapted layer {bad} out of range"));
        }
        let mut rng = rng_from(&[tag::INIT, seed]);
        let mut layers = Vec::with_capacity(n_layers);
        for u in 0..n_layers {
            let (n_in, n_out) = (spec.dims[u], spec.dims[u + 1]);
            let std = spec.base_scale / Float::sqrt(n_in as f64);
            let base = Matrix::from_fn(n_out, n_in, |_, _| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            });
            if spec.adapted.contains(&u) {
                layers.push(Layer::Adapted(LoraAdapter::init(
                    base,
                    spec.rank,
                    spec.a_init_scale,
                    &mut rng,
                )?));
            } else {
                layers.push(Layer::Frozen(base));
            }
        }
        ToyNetwork::new(layers, spec.activation, spec.loss)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].shape().1
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].shape().0
    }

    /// `U`.
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// `U'`.
    pub fn n_adapted(&self) -> usize {
        self.adapters().count()
    }

    pub fn adapters(&self) -> impl Iterator<Item = &LoraAdapter> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Adapted(a) => Some(a),
            Layer::Frozen(_) => None,
        })
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = &mut LoraAdapter> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Adapted(a) => Some(a),
            Layer::Frozen(_) => None,
        })
    }

    /// Full trainable payload `sum over adapted layers of (n1 + n2) r`.
    pub fn full_payload(&self) -> usize {
        self.adapters().map(LoraAdapter::full_size).sum()
    }

    fn check_masks(&self, masks: Option<&[DropoutMask]>) -> Result<()> {
        if let Some(m) = masks {
            if m.len() != self.n_adapted() {
                return Err(shape_err!("{} masks for {} adapted layers", m.len(), self.n_adapted()));
            }
        }
        Ok(())
    }

    /// Forward pass of one sample, optionally through per-adapted-layer masks.
    pub fn trace(&self, x: &Vector, masks: Option<&[DropoutMask]>) -> Result<Trace> {
        self.check_masks(masks)?;
        if x.len() != self.input_dim() {
            return Err(shape_err!("input length {} != {}", x.len(), self.input_dim()));
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut f = x.clone();
        let mut adapted_idx = 0;
        for (u, layer) in self.layers.iter().enumerate() {
            let h = match layer {
                Layer::Adapted(ad) => {
                    let h = match masks {
                        Some(m) => ad.masked_forward(&m[adapted_idx], &f)?,
                        None => ad.forward(&f)?,
                    };
                    adapted_idx += 1;
                    h
                }
                Layer::Frozen(w) => w * &f,
            };
            let next = if u + 1 < self.layers.len() {
                self.activation.apply(&h)
            } else {
                h.clone()
            };
            inputs.push(core::mem::replace(&mut f, next));
            pre.push(h);
        }
        Ok(Trace { inputs, pre })
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vector> {
        let mut t = self.trace(&Vector::from_column_slice(x), None)?;
        Ok(t.pre.pop().expect("network has at least one layer"))
    }

    /// Per-sample loss and `∂ℓ/∂output`.
    fn sample_loss(&self, out: &Vector, label: usize) -> Result<(f64, Vector)> {
        let c = out.len();
        if label >= c {
            return Err(shape_err!("label {label} out of range for {c} outputs"));
        }
        match self.loss {
            LossKind::SoftmaxCrossEntropy => {
                let max = out.max();
                let exps = out.map(|v| Float::exp(v - max));
                let z = exps.sum();
                let lse = max + Float::ln(z);
                let mut grad = exps / z;
                grad[label] -= 1.0;
                Ok((lse - out[label], grad))
            }
            LossKind::MeanSquaredError => {
                let mut diff = out.clone();
                diff[label] -= 1.0;
                let loss = diff.norm_squared() / c as f64;
                Ok((loss, diff * (2.0 / c as f64)))
            }
        }
    }

    /// Mean loss over the batch and the per-sample traces.
    pub fn forward_loss(&self, batch: &[Sample], masks: Option<&[DropoutMask]>) -> Result<(f64, Vec<Trace>)> {
        if batch.is_empty() {
            return Err(domain_err!("empty batch"));
        }
        let mut total = 0.0;
        let mut traces = Vec::with_capacity(batch.len());
        for s in batch {
            let t = self.trace(&Vector::from_column_slice(&s.x), masks)?;
            total += self.sample_loss(t.output(), s.label)?.0;
            traces.push(t);
        }
        Ok((total / batch.len() as f64, traces))
    }

    pub fn loss(&self, batch: &[Sample], masks: Option<&[DropoutMask]>) -> Result<f64> {
        Ok(self.forward_loss(batch, masks)?.0)
    }

    /// Fraction of samples whose arg-max output equals the label.
    pub fn accuracy(&self, batch: &[Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(domain_err!("empty batch"));
        }
        let mut hits = 0usize;
        for s in batch {
            let out = self.predict(&s.x)?;
            if out.argmax().0 == s.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / batch.len() as f64)
    }

    /// Gradients of one sample's loss w.r.t. every adapted layer.
    pub fn sample_gradients(
        &self,
        sample: &Sample,
        masks: Option<&[DropoutMask]>,
    ) -> Result<(f64, Vec<AdapterGradient>)> {
        let trace = self.trace(&Vector::from_column_slice(&sample.x), masks)?;
        let (loss, mut delta) = self.sample_loss(trace.output(), sample.label)?;
        let n_adapted = self.n_adapted();
        let mut grads: Vec<Option<AdapterGradient>> = vec![None; n_adapted];
        let mut adapted_idx = n_adapted;
        for u in (0..self.layers.len()).rev() {
            let back = match &self.layers[u] {
                Layer::Adapted(ad) => {
                    adapted_idx -= 1;
                    let mask = masks.map(|m| &m[adapted_idx]);
                    let (g, back) = ad.backward_full(mask, &trace.inputs[u], &delta)?;
                    grads[adapted_idx] = Some(g);
                    back
                }
                Layer::Frozen(w) => w.transpose() * &delta,
            };
            if u > 0 {
                delta = back.component_mul(&self.activation.derivative(&trace.pre[u - 1]));
            }
        }
        Ok((loss, grads.into_iter().map(|g| g.expect("filled")).collect()))
    }

    /// Sample-mean adapter gradients over the batch.
    pub fn backward_all(&self, batch: &[Sample], masks: Option<&[DropoutMask]>) -> Result<Vec<AdapterGradient>> {
        Ok(self.loss_and_gradients(batch, masks)?.1)
    }

    pub fn loss_and_gradients(
        &self,
        batch: &[Sample],
        masks: Option<&[DropoutMask]>,
    ) -> Result<(f64, Vec<AdapterGradient>)> {
        if batch.is_empty() {
            return Err(domain_err!("empty batch"));
        }
        self.check_masks(masks)?;
        let mut acc: Vec<AdapterGradient> = self.adapters().map(AdapterGradient::zeros_like).collect();
        let mut loss = 0.0;
        for s in batch {
            let (l, g) = self.sample_gradients(s, masks)?;
            loss += l;
            for (a, gi) in acc.iter_mut().zip(&g) {
                a.add_scaled(gi, 1.0);
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for a in &mut acc {
            a.scale(inv);
        }
        Ok((loss * inv, acc))
    }

    /// One gradient step on every adapter.
    pub fn apply_gradients(&mut self, grads: &[AdapterGradient], lr: f64) -> Result<()> {
        if grads.len() != self.n_adapted() {
            return Err(shape_err!(
                "{} gradients for {} adapters",
                grads.len(),
                self.n_adapted()
            ));
        }
        for (ad, g) in self.adapters_mut().zip(grads) {
            ad.apply_sgd(g, lr)?;
        }
        Ok(())
    }

    /// Copy of the network with every adapter replaced by its masked sub-adapter.
    pub fn masked(&self, masks: &[DropoutMask]) -> Result<ToyNetwork> {
        self.check_masks(Some(masks))?;
        let mut out = self.clone();
        for (ad, m) in out.adapters_mut().zip(masks) {
            *ad = ad.masked(m)?;
        }
        Ok(out)
    }

    /// Flattened `[B_1, A_1, B_2, A_2, ...]` (column-major within a matrix).
    pub fn trainable_vector(&self) -> Vec<f64> {
        self.adapters()
            .flat_map(|a| a.b().iter().chain(a.a().iter()).copied().collect::<Vec<_>>())
            .collect()
    }
}

/// Flattens gradients in the same order as [`ToyNetwork::trainable_vector`].
pub fn flatten_gradients(grads: &[AdapterGradient]) -> Vec<f64> {
    grads
        .iter()
        .flat_map(|g| g.grad_b.iter().chain(g.grad_a.iter()).copied().collect::<Vec<_>>())
        .collect()
}

impl SyntheticSpec {
    /// Gaussian class clusters. The class means depend only on `seed`;
    /// `split` selects an independent sample stream (0 = train, 1 = test, ...).
    pub fn generate(&self, seed: u64, split: u64) -> Result<SyntheticDataset> {
        if self.n_classes < 2 || self.n_samples < self.n_classes || self.dim == 0 {
            return Err(domain_err!(
                "need n_samples >= n_classes >= 2 and dim >= 1 (got {}, {}, {})",
                self.n_samples,
                self.n_classes,
                self.dim
            ));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(domain_err!("label_noise must be in [0, 1]"));
        }
        let mut mean_rng = rng_from(&[tag::DATA, seed]);
        let means: Vec<Vector> = (0..self.n_classes)
            .map(|_| {
                let v = Vector::from_fn(self.dim, |_, _| StandardNormal.sample(&mut mean_rng));
                let n = v.norm().max(1e-12);
                v * (self.class_sep / n)
            })
            .collect();
        let mut rng = rng_from(&[tag::DATA, seed, split.wrapping_add(1)]);
        let mut labels: Vec<usize> = (0..self.n_samples).map(|i| i % self.n_classes).collect();
        labels.shuffle(&mut rng);
        let samples = labels
            .into_iter()
            .map(|c| {
                let x: Vec<f64> = means[c]
                    .iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        m + self.noise * z
                    })
                    .collect();
                let label = if self.label_noise > 0.0 && rng.random_bool(self.label_noise) {
                    rng.random_range(0..self.n_classes)
                } else {
                    c
                };
                Sample { x, label }
            })
            .collect();
        Ok(SyntheticDataset {
            samples,
            dim: self.dim,
            n_classes: self.n_classes,
            generator_seed: seed,
        })
    }
}

/// Balanced Gaussian-cluster dataset with default separation and noise.
pub fn generate_synthetic(n_samples: usize, dim: usize, n_classes: usize, seed: u64) -> Result<SyntheticDataset> {
    SyntheticSpec {
        n_samples,
        dim,
        n_classes,
        class_sep: default_sep(),
        noise: default_noise(),
        label_noise: 0.0,
    }
    .generate(seed, 0)
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Vec<Sample> {
        idx.iter().map(|&i| self.samples[i].clone()).collect()
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for s in &self.samples {
            c[s.label] += 1;
        }
        c
    }
}

/// Splits the dataset across `k` devices. For every class, device shares are
/// drawn from `Dirichlet(concentration, ..., concentration)`; small values give
/// skewed label mixes, large values approach an IID split.
pub fn partition_non_iid(dataset: &SyntheticDataset, k: usize, concentration: f64, seed: u64) -> Result<Partition> {
    let n = dataset.len();
    if k == 0 || n == 0 {
        return Err(domain_err!("need at least one device and one sample"));
    }
    if k > n {
        return Err(domain_err!("{k} devices for {n} samples"));
    }
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(domain_err!("concentration must be positive, got {concentration}"));
    }
    let mut rng: Rng = rng_from(&[tag::PARTITION, seed]);
    let gamma = Gamma::new(concentration, 1.0).map_err(|_| domain_err!("bad concentration"))?;
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    for c in 0..dataset.n_classes {
        let mut idx: Vec<usize> = (0..n).filter(|&i| dataset.samples[i].label == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let mut p: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let sum: f64 = p.iter().sum();
        if !(sum > 0.0) {
            p = vec![1.0; k];
        }
        let sum: f64 = p.iter().sum();
        let m = idx.len();
        let mut start = 0usize;
        let mut cum = 0.0;
        for (j, pj) in p.iter().enumerate() {
            cum += pj / sum;
            let end = if j + 1 == k {
                m
            } else {
                (Float::round(cum * m as f64) as usize).clamp(start, m)
            };
            shards[j].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    // every device needs data: move one sample from the largest shard
    while let Some(empty) = shards.iter().position(Vec::is_empty) {
        let donor = (0..k)
            .max_by_key(|&j| (shards[j].len(), core::cmp::Reverse(j)))
            .expect("k >= 1");
        let moved = shards[donor].pop().expect("donor has more than one sample");
        shards[empty].push(moved);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(Partition { shards })
}

impl Partition {
    pub fn k(&self) -> usize {
        self.shards.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    pub fn total(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    /// `|D_k| / |D|`.
    pub fn weights(&self) -> Vec<f64> {
        let total = self.total() as f64;
        self.shards.iter().map(|s| s.len() as f64 / total).collect()
    }

    /// Disjoint, covering `0..n`, no empty shard.
    pub fn is_valid_for(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        for s in &self.shards {
            if s.is_empty() {
                return false;
            }
            for &i in s {
                if i >= n || seen[i] {
                    return false;
                }
                seen[i] = true;
            }
        }
        seen.into_iter().all(|b| b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{sample_mask, MaskMode};
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn small_net(seed: u64, loss: LossKind) -> ToyNetwork {
        let spec = NetworkSpec {
            dims: vec![4, 5, 3],
            adapted: vec![0, 1],
            rank: 2,
            activation: Activation::Tanh,
            loss,
            base_scale: 1.0,
            a_init_scale: 0.5,
        };
        let mut net = ToyNetwork::build(&spec, seed).unwrap();
        // give B some mass so every gradient path is exercised
        let mut rng = Rng::seed_from_u64(seed);
        for ad in net.adapters_mut() {
            let b = Matrix::from_fn(ad.n1(), ad.rank(), |_, _| rng.random_range(-0.5..0.5));
            let a = ad.a().clone();
            ad.set_trainable(b, a).unwrap();
        }
        net
    }

    fn batch(n: usize, seed: u64) -> Vec<Sample> {
        generate_synthetic(n.max(3), 4, 3, seed).unwrap().samples[..n].to_vec()
    }

    #[test]
    fn rejects_broken_chains() {
        let l1 = Layer::Frozen(Matrix::zeros(3, 2));
        let l2 = Layer::Frozen(Matrix::zeros(2, 4));
        assert!(ToyNetwork::new(vec![l1, l2], Activation::Tanh, LossKind::MeanSquaredError).is_err());
    }

    #[test]
    fn counts_layers() {
        let spec = NetworkSpec {
            dims: vec![6, 8, 8, 2],
            adapted: vec![0, 2],
            rank: 2,
            activation: Activation::Relu,
            loss: LossKind::SoftmaxCrossEntropy,
            base_scale: 1.0,
            a_init_scale: 0.1,
        };
        let net = ToyNetwork::build(&spec, 1).unwrap();
        assert_eq!(net.n_layers(), 3);
        assert_eq!(net.n_adapted(), 2);
        assert_eq!(net.full_payload(), (8 + 6) * 2 + (2 + 8) * 2);
        assert!(net.adapters().all(|a| a.b().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let w = Layer::Frozen(Matrix::zeros(4, 3));
        let net = ToyNetwork::new(vec![w], Activation::Identity, LossKind::SoftmaxCrossEntropy).unwrap();
        let s = vec![Sample {
            x: vec![1.0, 2.0, 3.0],
            label: 2,
        }];
        assert_relative_eq!(net.loss(&s, None).unwrap(), 4.0f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn exact_fit_mse_is_zero() {
        let w = Layer::Frozen(Matrix::identity(3, 3));
        let net = ToyNetwork::new(vec![w], Activation::Identity, LossKind::MeanSquaredError).unwrap();
        let s = vec![Sample {
            x: vec![0.0, 1.0, 0.0],
            label: 1,
        }];
        assert_eq!(net.loss(&s, None).unwrap(), 0.0);
    }

    #[test]
    fn batched_loss_matches_per_sample_loop() {
        let net = small_net(3, LossKind::SoftmaxCrossEntropy);
        let b = batch(4, 9);
        let batched = net.loss(&b, None).unwrap();
        // independent per-sample evaluation with explicit dense weights
        let mut total = 0.0;
        for s in &b {
            let mut f = Vector::from_column_slice(&s.x);
            let n = net.layers().len();
            for (u, l) in net.layers().iter().enumerate() {
                let w = match l {
                    Layer::Adapted(a) => a.effective_weight(),
                    Layer::Frozen(w) => w.clone(),
                };
                f = &w * f;
                if u + 1 < n {
                    f = f.map(|v| v.tanh());
                }
            }
            let lse = f.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - f[s.label];
        }
        assert_relative_eq!(batched, total / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn duplicated_batch_gives_single_sample_gradient() {
        let net = small_net(4, LossKind::SoftmaxCrossEntropy);
        let one = batch(1, 2);
        let dup = vec![one[0].clone(), one[0].clone(), one[0].clone()];
        let g1 = net.backward_all(&one, None).unwrap();
        let g3 = net.backward_all(&dup, None).unwrap();
        for (a, b) in g1.iter().zip(&g3) {
            assert_relative_eq!(a.grad_a, b.grad_a, epsilon = 1e-14);
            assert_relative_eq!(a.grad_b, b.grad_b, epsilon = 1e-14);
        }
    }

    #[test]
    fn zero_rate_masks_equal_unmasked() {
        let net = small_net(5, LossKind::MeanSquaredError);
        let b = batch(5, 3);
        let masks: Vec<_> = net
            .adapters()
            .map(|a| sample_mask(0.0, (a.n1(), a.n2()), MaskMode::Bernoulli, 1).unwrap())
            .collect();
        assert_eq!(
            net.backward_all(&b, Some(&masks)).unwrap(),
            net.backward_all(&b, None).unwrap()
        );
    }

    #[test]
    fn batch_gradient_is_mean_of_sample_gradients() {
        let net = small_net(6, LossKind::SoftmaxCrossEntropy);
        let b = batch(3, 4);
        let masks: Vec<_> = net
            .adapters()
            .enumerate()
            .map(|(i, a)| sample_mask(0.3, (a.n1(), a.n2()), MaskMode::Bernoulli, i as u64).unwrap())
            .collect();
        let batched = net.backward_all(&b, Some(&masks)).unwrap();
        let per: Vec<_> = b
            .iter()
            .map(|s| net.sample_gradients(s, Some(&masks)).unwrap().1)
            .collect();
        for layer in 0..batched.len() {
            let mean_a = per
                .iter()
                .map(|g| &g[layer].grad_a)
                .fold(Matrix::zeros(2, batched[layer].grad_a.ncols()), |acc, m| acc + m)
                / 3.0;
            let mean_b = per
                .iter()
                .map(|g| &g[layer].grad_b)
                .fold(Matrix::zeros(batched[layer].grad_b.nrows(), 2), |acc, m| acc + m)
                / 3.0;
            assert_relative_eq!(batched[layer].grad_a, mean_a, epsilon = 1e-10);
            assert_relative_eq!(batched[layer].grad_b, mean_b, epsilon = 1e-10);
        }
    }

    fn check_fd(net: &ToyNetwork, b: &[Sample], masks: Option<&[DropoutMask]>) {
        let analytic = flatten_gradients(&net.backward_all(b, masks).unwrap());
        let theta = net.trainable_vector();
        let eps = 1e-6;
        let eval = |v: &[f64]| -> f64 {
            let mut n = net.clone();
            let mut off = 0;
            for ad in n.adapters_mut() {
                let nb = ad.b().len();
                let na = ad.a().len();
                let bm = Matrix::from_column_slice(ad.n1(), ad.rank(), &v[off..off + nb]);
                let am = Matrix::from_column_slice(ad.rank(), ad.n2(), &v[off + nb..off + nb + na]);
                ad.set_trainable(bm, am).unwrap();
                off += nb + na;
            }
            n.loss(b, masks).unwrap()
        };
        for i in 0..theta.len() {
            let mut p = theta.clone();
            p[i] += eps;
            let mut m = theta.clone();
            m[i] -= eps;
            let fd = (eval(&p) - eval(&m)) / (2.0 * eps);
            let err = (fd - analytic[i]).abs();
            assert!(
                err <= 1e-4 * fd.abs().max(analytic[i].abs()) + 1e-8,
                "entry {i}: fd {fd} vs {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn network_gradients_pass_finite_differences() {
        for seed in 0..4 {
            for loss in [LossKind::SoftmaxCrossEntropy, LossKind::MeanSquaredError] {
                let net = small_net(seed, loss);
                let b = batch(3, seed + 10);
                check_fd(&net, &b, None);
                let masks: Vec<_> = net
                    .adapters()
                    .enumerate()
                    .map(|(i, a)| sample_mask(0.4, (a.n1(), a.n2()), MaskMode::Bernoulli, seed * 7 + i as u64).unwrap())
                    .collect();
                check_fd(&net, &b, Some(&masks));
            }
        }
    }

    #[test]
    fn relu_network_gradients_pass_finite_differences() {
        let spec = NetworkSpec {
            dims: vec![4, 6, 3],
            adapted: vec![1],
            rank: 2,
            activation: Activation::Relu,
            loss: LossKind::SoftmaxCrossEntropy,
            base_scale: 1.0,
            a_init_scale: 0.5,
        };
        let mut net = ToyNetwork::build(&spec, 2).unwrap();
        for ad in net.adapters_mut() {
            let b = Matrix::from_element(ad.n1(), ad.rank(), 0.3);
            let a = ad.a().clone();
            ad.set_trainable(b, a).unwrap();
        }
        check_fd(&net, &batch(3, 1), None);
    }

    #[test]
    fn generator_is_deterministic_and_balanced() {
        let a = generate_synthetic(300, 5, 3, 7).unwrap();
        let b = generate_synthetic(300, 5, 3, 7).unwrap();
        assert_eq!(a, b);
        for c in a.label_counts() {
            assert!((c as f64 - 100.0).abs() <= 10.0);
        }
        assert!(generate_synthetic(1, 5, 2, 0).is_err());
        assert!(generate_synthetic(10, 5, 1, 0).is_err());
    }

    #[test]
    fn separated_clusters_are_linearly_separable() {
        let spec = SyntheticSpec {
            n_samples: 400,
            dim: 6,
            n_classes: 2,
            class_sep: 4.0,
            noise: 1.0,
            label_noise: 0.0,
        };
        let d = spec.generate(3, 0).unwrap();
        // least-squares probe on [x, 1] with ±1 targets
        let n = d.len();
        let x = Matrix::from_fn(n, 7, |i, j| if j < 6 { d.samples[i].x[j] } else { 1.0 });
        let y = Vector::from_fn(n, |i, _| if d.samples[i].label == 1 { 1.0 } else { -1.0 });
        let w = (x.transpose() * &x).lu().solve(&(x.transpose() * &y)).unwrap();
        let pred = &x * w;
        let acc = (0..n).filter(|&i| (pred[i] > 0.0) == (y[i] > 0.0)).count() as f64 / n as f64;
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn single_device_partition_holds_everything() {
        let d = generate_synthetic(50, 3, 2, 1).unwrap();
        let p = partition_non_iid(&d, 1, 0.5, 3).unwrap();
        assert_eq!(p.shards, vec![(0..50).collect::<Vec<_>>()]);
        assert!(partition_non_iid(&d, 51, 0.5, 3).is_err());
        assert!(partition_non_iid(&d, 0, 0.5, 3).is_err());
    }

    #[test]
    fn huge_concentration_is_nearly_iid() {
        let d = generate_synthetic(1200, 3, 3, 2).unwrap();
        let p = partition_non_iid(&d, 4, 1e6, 5).unwrap();
        let global: Vec<f64> = d.label_counts().iter().map(|&c| c as f64 / 1200.0).collect();
        for s in &p.shards {
            let mut counts = [0usize; 3];
            for &i in s {
                counts[d.samples[i].label] += 1;
            }
            for c in 0..3 {
                let frac = counts[c] as f64 / s.len() as f64;
                assert!((frac - global[c]).abs() < 0.05);
            }
        }
    }

    fn mean_label_entropy(d: &SyntheticDataset, p: &Partition) -> f64 {
        p.shards
            .iter()
            .map(|s| {
                let mut counts = vec![0usize; d.n_classes];
                for &i in s {
                    counts[d.samples[i].label] += 1;
                }
                counts
                    .iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let q = c as f64 / s.len() as f64;
                        -q * q.ln()
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / p.k() as f64
    }

    #[test]
    fn small_concentration_skews_labels() {
        let d = generate_synthetic(1000, 3, 5, 4).unwrap();
        let (mut skewed, mut iid) = (0.0, 0.0);
        for seed in 0..20 {
            skewed += mean_label_entropy(&d, &partition_non_iid(&d, 10, 0.1, seed).unwrap());
            iid += mean_label_entropy(&d, &partition_non_iid(&d, 10, 1e6, seed).unwrap());
        }
        assert!(skewed < iid, "{skewed} vs {iid}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn partitions_are_disjoint_and_covering(k in 1usize..12, alpha in 0.05f64..50.0, seed in any::<u64>()) {
                let d = generate_synthetic(60, 2, 3, seed).unwrap();
                let p = partition_non_iid(&d, k, alpha, seed).unwrap();
                prop_assert_eq!(p.k(), k);
                prop_assert!(p.is_valid_for(60));
            }

            #[test]
            fn loss_and_gradients_are_finite(seed in any::<u64>()) {
                let net = small_net(seed, LossKind::SoftmaxCrossEntropy);
                let b = batch(4, seed);
                let (l, g) = net.loss_and_gradients(&b, None).unwrap();
                prop_assert!(l.is_finite());
                prop_assert!(g.iter().all(|gi| gi.norm_squared().is_finite()));
            }
        }
    }
}
