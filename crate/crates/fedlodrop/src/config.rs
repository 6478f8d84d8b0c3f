//! Experiment configuration (TOML).
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! dims = [6, 12, 3]
//! adapted = [0, 1]
//! rank = 2
//!
//! [data]
//! devices = 4
//! train_samples = 120
//!
//! [training]
//! lr = 0.2
//! rounds = 30
//!
//! [dropout]
//! mode = "fixed"        # or "sweep" with `grid`, or "optimized"
//! rates = [0.3]         # one value for every device, or one per device
//!
//! [network]
//! n_subcarriers = 6
//! round_deadline = 0.01
//!
//! [optimizer]
//! method = "bnb"
//! ```
//!
//! Every table except `[model]` and `[data]` may be omitted.

use std::path::{Path, PathBuf};

use fedlodrop_core::allocator::{BnbOptions, PscaOptions};
use fedlodrop_core::bounds::ConstantDefaults;
use fedlodrop_core::model::NetworkSpec;
use fedlodrop_core::network::NetworkParams;
use fedlodrop_core::protocol::MaskFamily;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, io_err, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed; data, partition, initialization, masks and channels derive from it.
    pub seed: u64,
    pub model: NetworkSpec,
    pub data: DataConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub dropout: DropoutConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub bounds: BoundsConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub compare: CompareConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub devices: usize,
    #[serde(default = "defaults::train_samples")]
    pub train_samples: usize,
    #[serde(default = "defaults::eval_samples")]
    pub eval_samples: usize,
    /// Dirichlet concentration of the label mix per device.
    #[serde(default = "defaults::one")]
    pub concentration: f64,
    #[serde(default = "defaults::class_sep")]
    pub class_sep: f64,
    #[serde(default = "defaults::one")]
    pub noise: f64,
    #[serde(default)]
    pub label_noise: f64,
    /// Overrides the data seed derived from the global one.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Read the training set from CSV instead of generating it.
    #[serde(default)]
    pub train_csv: Option<PathBuf>,
    #[serde(default)]
    pub eval_csv: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub lr: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub mask_family: MaskFamily,
    /// Train loss used for the rounds-to-threshold statistic.
    pub loss_threshold: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 0.1,
            rounds: 20,
            local_epochs: 1,
            mask_family: MaskFamily::Bernoulli,
            loss_threshold: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum DropoutConfig {
    /// The same rates every round; one value is broadcast to all devices.
    Fixed { rates: Vec<f64> },
    /// One uniform-rate run per grid point.
    Sweep { grid: Vec<f64> },
    /// Rates come from the allocator on each round's channels.
    Optimized,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        DropoutConfig::Fixed { rates: vec![0.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    #[serde(default = "defaults::subcarriers")]
    pub n_subcarriers: usize,
    /// Overrides the channel seed derived from the global one.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Instance document (JSON or TOML) to use instead of the scalar parameters.
    #[serde(default)]
    pub instance: Option<PathBuf>,
    #[serde(flatten)]
    pub params: NetworkParams,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            n_subcarriers: defaults::subcarriers(),
            seed: None,
            instance: None,
            params: NetworkParams::default(),
        }
    }
}

/// Constants of the analysis. `eta`, `grad_bound_h` and `weight_bound_g` are
/// measured on a dropout-free calibration run unless given here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundsConfig {
    pub calibration_rounds: usize,
    pub eta: Option<f64>,
    pub grad_bound_h: Option<f64>,
    pub weight_bound_g: Option<f64>,
    pub pl_mu: f64,
    pub optimality_gap_rho: f64,
    pub reg_lambda: f64,
    /// `Λ_min`, the same for every device.
    pub hessian_min: f64,
    pub loss_range_c: f64,
    pub confidence_delta: f64,
    /// `η` when the calibration weights never move.
    pub eta_fallback: f64,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        BoundsConfig {
            calibration_rounds: 5,
            eta: None,
            grad_bound_h: None,
            weight_bound_g: None,
            pl_mu: 0.1,
            optimality_gap_rho: 0.1,
            reg_lambda: 1.0,
            hessian_min: 0.1,
            loss_range_c: 1.0,
            confidence_delta: 0.1,
            eta_fallback: 1.0,
        }
    }
}

impl BoundsConfig {
    pub fn defaults(&self, devices: usize) -> ConstantDefaults {
        ConstantDefaults {
            pl_mu: self.pl_mu,
            optimality_gap_rho: self.optimality_gap_rho,
            reg_lambda: self.reg_lambda,
            hessian_min: vec![self.hessian_min; devices],
            loss_range_c: self.loss_range_c,
            confidence_delta: self.confidence_delta,
            eta_fallback: self.eta_fallback,
        }
    }

    /// All three trace constants are given, so no calibration run is needed.
    pub fn fully_overridden(&self) -> bool {
        self.eta.is_some() && self.grad_bound_h.is_some() && self.weight_bound_g.is_some()
    }
}

/// Allocation schemes. The first three are solvers; `subcarrier-fixed` keeps
/// the round-robin assignment and `no-dropout` pins every rate to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Bnb,
    Psca,
    Oracle,
    SubcarrierFixed,
    NoDropout,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Bnb => "bnb",
            Scheme::Psca => "psca",
            Scheme::Oracle => "oracle",
            Scheme::SubcarrierFixed => "subcarrier-fixed",
            Scheme::NoDropout => "no-dropout",
        }
    }
}

/// What to do when a round has no feasible allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Fallback {
    /// Stop the experiment with the infeasibility report.
    #[default]
    Abort,
    /// Train the round anyway at the scheme's nominal rate (`max_dropout`, or
    /// zero for `no-dropout`) and mark it infeasible.
    Nominal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: Scheme,
    /// P-SCA stopping tolerance on `‖z − z̄‖∞`.
    pub tol: f64,
    pub node_budget: usize,
    pub tau: Option<f64>,
    pub max_outer: usize,
    /// Largest dropout rate the allocator may choose.
    pub max_dropout: f64,
    pub fallback: Fallback,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            method: Scheme::Bnb,
            tol: 1e-4,
            node_budget: BnbOptions::default().node_budget,
            tau: None,
            max_outer: PscaOptions::default().max_outer,
            max_dropout: 0.9,
            fallback: Fallback::Abort,
        }
    }
}

impl OptimizerConfig {
    pub fn bnb_options(&self) -> BnbOptions {
        BnbOptions {
            node_budget: self.node_budget,
            max_dropout: self.max_dropout,
        }
    }

    pub fn psca_options(&self) -> PscaOptions {
        PscaOptions {
            tau: self.tau,
            max_outer: self.max_outer,
            tol: self.tol,
            max_dropout: self.max_dropout,
            ..PscaOptions::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareConfig {
    pub schemes: Vec<Scheme>,
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            schemes: vec![Scheme::Bnb, Scheme::Psca, Scheme::SubcarrierFixed, Scheme::NoDropout],
        }
    }
}

mod defaults {
    pub fn train_samples() -> usize {
        200
    }
    pub fn eval_samples() -> usize {
        500
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn class_sep() -> f64 {
        3.0
    }
    pub fn subcarriers() -> usize {
        8
    }
}

fn check_rate(what: &str, r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(config_err(format!("{what} must be in [0, 1), got {r}")))
    }
}

fn check_positive(what: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(config_err(format!("{what} must be positive, got {v}")))
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file. Relative data and instance paths
    /// are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut cfg.data.train_csv,
            &mut cfg.data.eval_csv,
            &mut cfg.network.instance,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn devices(&self) -> usize {
        self.data.devices
    }

    pub fn n_classes(&self) -> usize {
        self.model.dims.last().copied().unwrap_or(0)
    }

    pub fn input_dim(&self) -> usize {
        self.model.dims.first().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.dims.len() < 2 || m.dims.contains(&0) {
            return Err(config_err("model.dims needs at least two positive sizes"));
        }
        if m.adapted.iter().any(|&u| u + 1 >= m.dims.len()) {
            return Err(config_err("model.adapted refers to a layer that does not exist"));
        }
        if self.n_classes() < 2 {
            return Err(config_err("the last entry of model.dims (classes) must be at least 2"));
        }
        let d = &self.data;
        if d.devices == 0 {
            return Err(config_err("data.devices must be at least 1"));
        }
        if d.train_csv.is_none() && d.train_samples < d.devices.max(self.n_classes()) {
            return Err(config_err("data.train_samples must cover every device and class"));
        }
        if d.eval_csv.is_none() && d.eval_samples == 0 {
            return Err(config_err("data.eval_samples must be positive"));
        }
        check_positive("data.concentration", d.concentration)?;
        if !(0.0..=1.0).contains(&d.label_noise) {
            return Err(config_err("data.label_noise must be in [0, 1]"));
        }
        let t = &self.training;
        check_positive("training.lr", t.lr)?;
        if t.rounds == 0 {
            return Err(config_err("training.rounds must be at least 1"));
        }
        if t.local_epochs == 0 {
            return Err(config_err("training.local_epochs must be at least 1"));
        }
        match &self.dropout {
            DropoutConfig::Fixed { rates } => {
                if rates.len() != 1 && rates.len() != d.devices {
                    return Err(config_err(format!(
                        "dropout.rates needs 1 or {} values, got {}",
                        d.devices,
                        rates.len()
                    )));
                }
                for &r in rates {
                    check_rate("dropout rate", r)?;
                }
            }
            DropoutConfig::Sweep { grid } => {
                if grid.is_empty() {
                    return Err(config_err("dropout.grid is empty"));
                }
                for &r in grid {
                    check_rate("dropout grid value", r)?;
                }
            }
            DropoutConfig::Optimized => {}
        }
        if self.network.n_subcarriers == 0 {
            return Err(config_err("network.n_subcarriers must be at least 1"));
        }
        let o = &self.optimizer;
        check_rate("optimizer.max_dropout", o.max_dropout)?;
        check_positive("optimizer.tol", o.tol)?;
        if o.node_budget == 0 {
            return Err(config_err("optimizer.node_budget must be at least 1"));
        }
        if let Some(tau) = o.tau {
            check_positive("optimizer.tau", tau)?;
        }
        let b = &self.bounds;
        if b.calibration_rounds == 0 && !b.fully_overridden() {
            return Err(config_err(
                "bounds.calibration_rounds must be at least 1 unless eta, grad_bound_h and weight_bound_g are set",
            ));
        }
        Ok(())
    }

    /// Dropout rates of a fixed-mode run, one per device.
    pub fn fixed_rates(&self) -> Option<Vec<f64>> {
        match &self.dropout {
            DropoutConfig::Fixed { rates } if rates.len() == 1 => Some(vec![rates[0]; self.devices()]),
            DropoutConfig::Fixed { rates } => Some(rates.clone()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[model]
dims = [4, 3]
adapted = [0]
rank = 1
[data]
devices = 2
"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.training, TrainingConfig::default());
        assert_eq!(c.fixed_rates(), Some(vec![0.0, 0.0]));
        assert_eq!(c.network.params, NetworkParams::default());
        assert_eq!(c.optimizer.method, Scheme::Bnb);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ExperimentConfig::from_toml(MINIMAL).unwrap();
        c.dropout = DropoutConfig::Sweep { grid: vec![0.0, 0.5] };
        c.network.params.round_deadline = 0.25;
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn network_fields_are_flat() {
        let text = format!("{MINIMAL}\n[network]\nn_subcarriers = 3\nround_deadline = 2\n");
        let c = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(c.network.n_subcarriers, 3);
        assert_eq!(c.network.params.round_deadline, 2.0);
    }

    #[test]
    fn rejects_bad_rates() {
        let text = format!("{MINIMAL}\n[dropout]\nmode = \"fixed\"\nrates = [1.0]\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = format!("{MINIMAL}\n[dropout]\nmode = \"fixed\"\nrates = [0.1, 0.2, 0.3]\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = format!("{MINIMAL}\n[dropout]\nmode = \"sweep\"\ngrid = [0.0, -0.1]\n");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_model() {
        assert!(ExperimentConfig::from_toml(&format!("{MINIMAL}\n[training]\nlearning_rate = 1\n")).is_err());
        let bad = MINIMAL.replace("adapted = [0]", "adapted = [1]");
        assert!(ExperimentConfig::from_toml(&bad).is_err());
    }
}
