//! Experiment orchestration: data and model setup, constant calibration, the
//! per-round allocate → train → measure loop, sweeps and result files.
//!
//! # Output files (schema version 1)
//!
//! * `rounds.csv`: `run,round,gamma_0..gamma_{K-1},train_loss,eval_accuracy,payload_bytes`,
//!   one row per run and round. Payload bytes are the parameters actually
//!   dispatched to all devices times `bits_per_param / 8`.
//! * `rounds.jsonl`: the full round reports of every run, one JSON object per line,
//!   each wrapped as `{"run": .., "report": ..}`.
//! * `allocations.json`: `{schema_version, config, runs: [{run, allocations}]}`,
//!   one [`AllocationRecord`] per optimized round (empty for fixed rates).
//! * `bounds.csv`: `run,round,gamma_mean,phs_server,generalization_gap,gradient_error_bound,loss_descent_bound,objective`.
//! * `summary.json`: [`Summary`].
//! * `config.toml`: the configuration the results came from.

use std::path::Path;
use std::time::{Duration, Instant};

use fedlodrop_core::allocator::{
    branch_and_bound, evaluate_assignment, exhaustive_oracle, lower_to_protocol, objective_p2, psca_solve, round_robin,
    AllocationSolution, BnbOptions, LoweredAllocation, ProblemConstants, SolverMeta,
};
use fedlodrop_core::bounds::{
    estimate_constants, generalization_gap, gradient_error_bound, loss_descent_bound, phs_bound_server, BoundConstants,
    TraceSnapshot,
};
use fedlodrop_core::model::{
    flatten_gradients, partition_non_iid, Sample, SyntheticDataset, SyntheticSpec, ToyNetwork,
};
use fedlodrop_core::network::{check_constraints, FeasibilityReport, NetworkInstance};
use fedlodrop_core::protocol::{RoundInputs, RoundReport, ServerState};
use fedlodrop_core::rng::{derive_seed, tag};
use fedlodrop_core::Error as CoreError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DropoutConfig, ExperimentConfig, Fallback, OptimizerConfig, Scheme};
use crate::error::{config_err, io_err, HarnessError, Result};
use crate::io::{load_document, write_json, write_summary_csv, NetworkDoc, SummaryRow};

pub const SCHEMA_VERSION: u32 = 1;

/// Data, initial model and the round-0 network, shared by every run of a config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub shards: Vec<Vec<Sample>>,
    pub model: ToyNetwork,
    pub instance: NetworkInstance,
    /// Redraw Rayleigh gains every round (false for explicit gains).
    pub redraw: bool,
    pub path_loss: f64,
    pub channel_seed: u64,
}

impl Setup {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data_seed = cfg.data.seed.unwrap_or(derive_seed(&[cfg.seed, tag::DATA]));
        let spec = SyntheticSpec {
            n_samples: cfg.data.train_samples,
            dim: cfg.input_dim(),
            n_classes: cfg.n_classes(),
            class_sep: cfg.data.class_sep,
            noise: cfg.data.noise,
            label_noise: cfg.data.label_noise,
        };
        let train = match &cfg.data.train_csv {
            Some(p) => crate::io::read_dataset_csv(p)?,
            None => spec.generate(data_seed, 0)?.samples,
        };
        let eval = match &cfg.data.eval_csv {
            Some(p) => crate::io::read_dataset_csv(p)?,
            None => {
                SyntheticSpec {
                    n_samples: cfg.data.eval_samples,
                    label_noise: 0.0,
                    ..spec
                }
                .generate(data_seed, 1)?
                .samples
            }
        };
        for s in train.iter().chain(&eval) {
            if s.x.len() != cfg.input_dim() || s.label >= cfg.n_classes() {
                return Err(config_err(format!(
                    "a sample has {} features and label {}; the model expects {} features and {} classes",
                    s.x.len(),
                    s.label,
                    cfg.input_dim(),
                    cfg.n_classes()
                )));
            }
        }
        let ds = SyntheticDataset {
            samples: train,
            dim: cfg.input_dim(),
            n_classes: cfg.n_classes(),
            generator_seed: data_seed,
        };
        let part = partition_non_iid(
            &ds,
            cfg.devices(),
            cfg.data.concentration,
            derive_seed(&[cfg.seed, tag::PARTITION]),
        )?;
        let shards: Vec<Vec<Sample>> = part.shards.iter().map(|idx| ds.subset(idx)).collect();
        let model = ToyNetwork::build(&cfg.model, derive_seed(&[cfg.seed, tag::INIT]))?;
        let sizes: Vec<usize> = shards.iter().map(Vec::len).collect();
        let channel_seed = cfg.network.seed.unwrap_or(derive_seed(&[cfg.seed, tag::CHANNEL]));
        let (instance, redraw, path_loss) = match &cfg.network.instance {
            Some(path) => {
                let doc: NetworkDoc = load_document(path)?;
                let inst = doc.instance()?;
                if inst.n_devices != cfg.devices() || inst.params_full != model.full_payload() {
                    return Err(config_err(format!(
                        "instance has {} devices and M = {}; the experiment has {} devices and M = {}",
                        inst.n_devices,
                        inst.params_full,
                        cfg.devices(),
                        model.full_payload()
                    )));
                }
                match doc {
                    NetworkDoc::Rayleigh(r) => (inst, true, r.params.path_loss),
                    NetworkDoc::Explicit(_) => (inst, false, 0.0),
                }
            }
            None => (
                cfg.network
                    .params
                    .instance(&sizes, cfg.network.n_subcarriers, model.full_payload(), channel_seed)?,
                true,
                cfg.network.params.path_loss,
            ),
        };
        Ok(Setup {
            train: ds.samples,
            eval,
            shards,
            model,
            instance,
            redraw,
            path_loss,
            channel_seed,
        })
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Vec::len).collect()
    }

    /// Channels of round `round` (1-based).
    pub fn round_instance(&self, round: u64) -> NetworkInstance {
        let mut inst = self.instance.clone();
        if self.redraw && round > 1 {
            inst.redraw_rayleigh(self.path_loss, derive_seed(&[self.channel_seed, round]));
        }
        inst
    }
}

/// `(n1, n2)` of the widest adapted layer.
fn adapter_dims(model: &ToyNetwork) -> (usize, usize) {
    model
        .adapters()
        .map(|a| (a.n1(), a.n2()))
        .max_by_key(|(n1, n2)| n1 + n2)
        .unwrap_or((0, 0))
}

fn snapshot(model: &ToyNetwork, train: &[Sample], shards: &[Vec<Sample>]) -> Result<TraceSnapshot> {
    let full = model.backward_all(train, None)?;
    let mut max_grad: f64 = 0.0;
    for g in full.iter().chain(
        shards
            .iter()
            .map(|s| model.backward_all(s, None))
            .collect::<std::result::Result<Vec<_>, _>>()?
            .iter()
            .flatten(),
    ) {
        max_grad = max_grad.max(g.grad_a.norm()).max(g.grad_b.norm());
    }
    let max_weight = model
        .adapters()
        .fold(0.0f64, |m, a| m.max(a.a().norm()).max(a.b().norm()));
    Ok(TraceSnapshot {
        weights: model.trainable_vector(),
        gradient: flatten_gradients(&full),
        max_weight_norm: max_weight,
        max_grad_norm: max_grad,
    })
}

/// Analysis constants: `η`, `𝓗` and `𝓖` are measured on a dropout-free
/// calibration run (unless all three are configured), the rest come from the
/// config.
pub fn calibrate(cfg: &ExperimentConfig, setup: &Setup) -> Result<BoundConstants> {
    let b = &cfg.bounds;
    let defaults = b.defaults(cfg.devices());
    let dims = adapter_dims(&setup.model);
    let u_prime = setup.model.n_adapted();
    let sizes = setup.shard_sizes();
    let mut c = if b.fully_overridden() {
        BoundConstants {
            eta: 0.0,
            grad_bound_h: 0.0,
            weight_bound_g: 0.0,
            pl_mu: defaults.pl_mu,
            optimality_gap_rho: defaults.optimality_gap_rho,
            reg_lambda: defaults.reg_lambda,
            hessian_min: defaults.hessian_min.clone(),
            loss_range_c: defaults.loss_range_c,
            confidence_delta: defaults.confidence_delta,
            n1: dims.0,
            n2: dims.1,
            u_prime,
            shard_sizes: sizes,
        }
    } else {
        let inputs = RoundInputs {
            shards: &setup.shards,
            eval: None,
            lr: cfg.training.lr,
            local_epochs: cfg.training.local_epochs,
            mask_family: cfg.training.mask_family,
        };
        let zeros = vec![0.0; cfg.devices()];
        let mut server = ServerState::new(setup.model.clone(), derive_seed(&[cfg.seed, tag::MASK]));
        let mut trace = vec![snapshot(&server.model, &setup.train, &setup.shards)?];
        for _ in 0..b.calibration_rounds {
            server = server.run_round(&zeros, &inputs)?.0;
            trace.push(snapshot(&server.model, &setup.train, &setup.shards)?);
        }
        estimate_constants(&trace, &defaults, dims, u_prime, &sizes)?
    };
    if let Some(v) = b.eta {
        c.eta = v;
    }
    if let Some(v) = b.grad_bound_h {
        c.grad_bound_h = v;
    }
    if let Some(v) = b.weight_bound_g {
        c.weight_bound_g = v;
    }
    c.validate()?;
    Ok(c)
}

/// Solves one round's allocation with the given scheme.
pub fn solve_scheme(
    scheme: Scheme,
    c: &ProblemConstants,
    inst: &NetworkInstance,
    opt: &OptimizerConfig,
) -> std::result::Result<AllocationSolution, CoreError> {
    match scheme {
        Scheme::Bnb => branch_and_bound(c, inst, &opt.bnb_options()),
        Scheme::Psca => psca_solve(c, inst, &opt.psca_options()),
        Scheme::Oracle => exhaustive_oracle(c, inst, opt.max_dropout),
        Scheme::SubcarrierFixed => evaluate_assignment(
            c,
            inst,
            &round_robin(inst.n_devices, inst.n_subcarriers),
            opt.max_dropout,
        ),
        Scheme::NoDropout => {
            // γ̃ = 1 is only admissible when every a_k > 1; otherwise the
            // closest admissible rate is used
            let max_dropout = if c.a.iter().all(|&a| a > 1.0) { 0.0 } else { 1e-9 };
            let opts = BnbOptions {
                node_budget: opt.node_budget,
                max_dropout,
            };
            branch_and_bound(c, inst, &opts)
        }
    }
}

/// How a run picks its per-round rates.
#[derive(Debug, Clone, PartialEq)]
pub enum RatePolicy {
    Fixed(Vec<f64>),
    Allocate(Scheme),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationRecord {
    pub round: u64,
    pub scheme: Scheme,
    pub feasible: bool,
    /// `None` when infeasible.
    pub objective: Option<f64>,
    /// Rates used for training this round.
    pub gamma: Vec<f64>,
    /// Integer parameter counts per (device, subcarrier) after rounding.
    pub params: Vec<Vec<u64>>,
    pub assignment: Vec<Vec<bool>>,
    pub repaired: bool,
    pub report: Option<FeasibilityReport>,
    pub meta: Option<SolverMeta>,
    pub detail: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRecord {
    pub round: u64,
    pub gamma_mean: f64,
    pub phs_server: f64,
    pub generalization_gap: f64,
    pub gradient_error_bound: f64,
    pub loss_descent_bound: f64,
    /// Allocation objective at `γ̃ = 1 − γ`.
    pub objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub reports: Vec<RoundReport>,
    pub allocations: Vec<AllocationRecord>,
    pub bounds: Vec<BoundRecord>,
    /// Bytes per parameter on the air.
    pub bytes_per_param: f64,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl RunResult {
    pub fn final_report(&self) -> Option<&RoundReport> {
        self.reports.last()
    }

    /// First round whose train loss is at or below `threshold`.
    pub fn rounds_to_threshold(&self, threshold: f64) -> Option<u64> {
        self.reports.iter().find(|r| r.train_loss <= threshold).map(|r| r.round)
    }

    pub fn payload_bytes(&self, r: &RoundReport) -> f64 {
        r.payload_params.iter().sum::<usize>() as f64 * self.bytes_per_param
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub bound_constants: BoundConstants,
    pub problem_constants: ProblemConstants,
    pub runs: Vec<RunResult>,
}

fn bound_record(c: &BoundConstants, p: &ProblemConstants, round: u64, rates: &[f64]) -> Result<BoundRecord> {
    let gt: Vec<f64> = rates.iter().map(|g| 1.0 - g).collect();
    Ok(BoundRecord {
        round,
        gamma_mean: rates.iter().sum::<f64>() / rates.len() as f64,
        phs_server: phs_bound_server(c, rates)?,
        generalization_gap: generalization_gap(c, rates)?,
        gradient_error_bound: gradient_error_bound(c, rates)?,
        loss_descent_bound: loss_descent_bound(c, rates)?,
        objective: objective_p2(p, &gt).ok(),
    })
}

fn allocate(
    cfg: &ExperimentConfig,
    scheme: Scheme,
    p: &ProblemConstants,
    inst: &NetworkInstance,
    round: u64,
    fallback: Fallback,
) -> Result<AllocationRecord> {
    let k = inst.n_devices;
    let infeasible = |detail: String, report: Option<FeasibilityReport>, meta: Option<SolverMeta>| {
        if fallback == Fallback::Abort {
            return Err(HarnessError::Infeasible { round, detail, report });
        }
        let nominal = if scheme == Scheme::NoDropout {
            0.0
        } else {
            cfg.optimizer.max_dropout
        };
        Ok(AllocationRecord {
            round,
            scheme,
            feasible: false,
            objective: None,
            gamma: vec![nominal; k],
            params: Vec::new(),
            assignment: Vec::new(),
            repaired: false,
            report,
            meta,
            detail: Some(detail),
        })
    };
    let sol = match solve_scheme(scheme, p, inst, &cfg.optimizer) {
        Ok(s) => s,
        Err(CoreError::Infeasible(d)) => return infeasible(d, None, None),
        Err(e) => return Err(e.into()),
    };
    let mut low = lower_to_protocol(&sol, inst)?;
    let mut detail = None;
    if low.flagged {
        match floor_loads(&sol, inst, cfg.optimizer.max_dropout)? {
            Some(relaxed) => {
                detail = Some(format!(
                    "rounding up broke a binding constraint; loads rounded down and rates raised by at most {:.3e}",
                    relaxed
                        .gamma
                        .iter()
                        .zip(&low.gamma)
                        .map(|(a, b)| a - b)
                        .fold(0.0, f64::max)
                ));
                low = relaxed;
            }
            None => return infeasible(low.notes.join("; "), Some(low.report), Some(sol.meta)),
        }
    }
    let objective = objective_p2(p, &low.gamma.iter().map(|g| 1.0 - g).collect::<Vec<_>>()).ok();
    Ok(AllocationRecord {
        round,
        scheme,
        feasible: true,
        objective,
        gamma: low.gamma,
        params: low.params,
        assignment: low.assignment,
        repaired: low.repaired,
        report: Some(low.report),
        meta: Some(sol.meta),
        detail,
    })
}

/// Integer loads that never exceed the solver's: `M̂ = ⌊M̃⌋` and the smallest
/// rates that `M̂` still covers, `γ_k = 1 − ΣM̂/M`. `None` if a device would
/// need a rate above `max_dropout` or the result still violates a constraint.
fn floor_loads(
    sol: &AllocationSolution,
    inst: &NetworkInstance,
    max_dropout: f64,
) -> Result<Option<LoweredAllocation>> {
    let m_full = inst.params_full as f64;
    let params: Vec<Vec<u64>> = sol
        .params
        .iter()
        .zip(&sol.assignment)
        .map(|(row, z)| {
            row.iter()
                .zip(z)
                .map(|(&m, &on)| {
                    if on {
                        (m + 1e-9 * m.max(1.0)).floor().max(0.0) as u64
                    } else {
                        0
                    }
                })
                .collect()
        })
        .collect();
    let gamma: Vec<f64> = params
        .iter()
        .map(|row| 1.0 - (row.iter().sum::<u64>() as f64 / m_full).min(1.0))
        .collect();
    if gamma.iter().any(|&g| g > max_dropout) {
        return Ok(None);
    }
    let mut low = LoweredAllocation {
        gamma,
        params,
        assignment: sol.assignment.clone(),
        report: FeasibilityReport {
            devices: Vec::new(),
            bad_subcarriers: Vec::new(),
        },
        repaired: true,
        flagged: false,
        notes: Vec::new(),
    };
    low.report = check_constraints(inst, &low.as_round_allocation(inst))?;
    Ok(low.report.is_feasible().then_some(low))
}

/// Trains one run from the initial model.
pub fn train_run(
    cfg: &ExperimentConfig,
    setup: &Setup,
    constants: &BoundConstants,
    problem: &ProblemConstants,
    policy: &RatePolicy,
    label: &str,
    fallback: Fallback,
) -> Result<RunResult> {
    let start = Instant::now();
    let inputs = RoundInputs {
        shards: &setup.shards,
        eval: Some(&setup.eval),
        lr: cfg.training.lr,
        local_epochs: cfg.training.local_epochs,
        mask_family: cfg.training.mask_family,
    };
    let mut server = ServerState::new(setup.model.clone(), derive_seed(&[cfg.seed, tag::MASK]));
    let mut run = RunResult {
        label: label.to_string(),
        reports: Vec::with_capacity(cfg.training.rounds),
        allocations: Vec::new(),
        bounds: Vec::with_capacity(cfg.training.rounds),
        bytes_per_param: setup.instance.bits_per_param / 8.0,
        elapsed: Duration::ZERO,
    };
    for t in 1..=cfg.training.rounds as u64 {
        let rates = match policy {
            RatePolicy::Fixed(r) => r.clone(),
            RatePolicy::Allocate(scheme) => {
                let rec = allocate(cfg, *scheme, problem, &setup.round_instance(t), t, fallback)?;
                let r = rec.gamma.clone();
                run.allocations.push(rec);
                r
            }
        };
        let (next, report) = server.run_round(&rates, &inputs)?;
        run.bounds.push(bound_record(constants, problem, t, &rates)?);
        run.reports.push(report);
        server = next;
    }
    run.elapsed = start.elapsed();
    Ok(run)
}

/// Runs every run the config describes: one for fixed or optimized rates,
/// one per grid point (in parallel) for a sweep.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let setup = Setup::new(cfg)?;
    let constants = calibrate(cfg, &setup)?;
    let problem = ProblemConstants::from_bounds(&constants)?;
    let fallback = cfg.optimizer.fallback;
    let runs = match &cfg.dropout {
        DropoutConfig::Fixed { .. } => {
            let rates = cfg.fixed_rates().expect("fixed mode");
            vec![train_run(
                cfg,
                &setup,
                &constants,
                &problem,
                &RatePolicy::Fixed(rates),
                "fixed",
                fallback,
            )?]
        }
        DropoutConfig::Optimized => {
            let scheme = cfg.optimizer.method;
            vec![train_run(
                cfg,
                &setup,
                &constants,
                &problem,
                &RatePolicy::Allocate(scheme),
                scheme.name(),
                fallback,
            )?]
        }
        DropoutConfig::Sweep { grid } => grid
            .par_iter()
            .map(|&g| {
                let policy = RatePolicy::Fixed(vec![g; cfg.devices()]);
                train_run(
                    cfg,
                    &setup,
                    &constants,
                    &problem,
                    &policy,
                    &format!("gamma={g}"),
                    fallback,
                )
            })
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(ExperimentResult {
        config: cfg.clone(),
        bound_constants: constants,
        problem_constants: problem,
        runs,
    })
}

/// Runs the same config under several seeds in parallel; results keep the
/// order of `seeds`.
pub fn run_seeds(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<ExperimentResult>> {
    seeds
        .par_iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.seed = s;
            run_experiment(&c)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run: String,
    pub rounds: usize,
    pub final_train_loss: f64,
    pub final_eval_loss: Option<f64>,
    pub final_eval_accuracy: Option<f64>,
    pub best_eval_accuracy: Option<f64>,
    pub rounds_to_threshold: Option<u64>,
    pub total_payload_bytes: f64,
    pub infeasible_rounds: usize,
    /// Mean allocation objective over feasible optimized rounds.
    pub mean_objective: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub bound_constants: BoundConstants,
    pub problem_constants: ProblemConstants,
    pub runs: Vec<RunSummary>,
}

impl ExperimentResult {
    pub fn summary(&self) -> Summary {
        let threshold = self.config.training.loss_threshold;
        let runs = self
            .runs
            .iter()
            .map(|r| {
                let last = r.final_report();
                let objectives: Vec<f64> = r.allocations.iter().filter_map(|a| a.objective).collect();
                RunSummary {
                    run: r.label.clone(),
                    rounds: r.reports.len(),
                    final_train_loss: last.map_or(f64::NAN, |l| l.train_loss),
                    final_eval_loss: last.and_then(|l| l.eval_loss),
                    final_eval_accuracy: last.and_then(|l| l.eval_accuracy),
                    best_eval_accuracy: r.reports.iter().filter_map(|x| x.eval_accuracy).reduce(f64::max),
                    rounds_to_threshold: threshold.and_then(|t| r.rounds_to_threshold(t)),
                    total_payload_bytes: r.reports.iter().map(|x| r.payload_bytes(x)).sum(),
                    infeasible_rounds: r.allocations.iter().filter(|a| !a.feasible).count(),
                    mean_objective: if objectives.is_empty() {
                        None
                    } else {
                        Some(objectives.iter().sum::<f64>() / objectives.len() as f64)
                    },
                }
            })
            .collect();
        Summary {
            schema_version: SCHEMA_VERSION,
            config: self.config.clone(),
            bound_constants: self.bound_constants.clone(),
            problem_constants: self.problem_constants.clone(),
            runs,
        }
    }

    pub fn summary_rows(&self) -> Vec<SummaryRow> {
        self.runs
            .iter()
            .flat_map(|run| {
                run.reports.iter().map(move |r| SummaryRow {
                    run: run.label.clone(),
                    round: r.round,
                    gammas: r.rates.clone(),
                    train_loss: r.train_loss,
                    eval_accuracy: r.eval_accuracy,
                    payload_bytes: run.payload_bytes(r),
                })
            })
            .collect()
    }
}

#[derive(Serialize)]
struct AllocationsFile<'a> {
    schema_version: u32,
    config: &'a ExperimentConfig,
    runs: Vec<RunAllocations<'a>>,
}

#[derive(Serialize)]
struct RunAllocations<'a> {
    run: &'a str,
    allocations: &'a [AllocationRecord],
}

#[derive(Serialize)]
struct ReportLine<'a> {
    run: &'a str,
    report: &'a RoundReport,
}

/// Writes the result files listed in the module docs into `out_dir`.
pub fn emit_results(result: &ExperimentResult, out_dir: &Path) -> Result<()> {
    if result.runs.is_empty() || result.runs.iter().any(|r| r.reports.is_empty()) {
        return Err(config_err("cannot emit a result with no rounds"));
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let path = out_dir.join("rounds.csv");
    let f = std::fs::File::create(&path).map_err(io_err(&path))?;
    write_summary_csv(std::io::BufWriter::new(f), &result.summary_rows())?;

    let path = out_dir.join("rounds.jsonl");
    let mut text = String::new();
    for run in &result.runs {
        for r in &run.reports {
            text.push_str(&serde_json::to_string(&ReportLine {
                run: &run.label,
                report: r,
            })?);
            text.push('\n');
        }
    }
    std::fs::write(&path, text).map_err(io_err(&path))?;

    write_json(
        &out_dir.join("allocations.json"),
        &AllocationsFile {
            schema_version: SCHEMA_VERSION,
            config: &result.config,
            runs: result
                .runs
                .iter()
                .map(|r| RunAllocations {
                    run: &r.label,
                    allocations: &r.allocations,
                })
                .collect(),
        },
    )?;

    let path = out_dir.join("bounds.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        "run",
        "round",
        "gamma_mean",
        "phs_server",
        "generalization_gap",
        "gradient_error_bound",
        "loss_descent_bound",
        "objective",
    ])?;
    for run in &result.runs {
        for b in &run.bounds {
            w.write_record([
                run.label.clone(),
                b.round.to_string(),
                b.gamma_mean.to_string(),
                b.phs_server.to_string(),
                b.generalization_gap.to_string(),
                b.gradient_error_bound.to_string(),
                b.loss_descent_bound.to_string(),
                b.objective.map_or(String::new(), |o| o.to_string()),
            ])?;
        }
    }
    w.flush().map_err(io_err(&path))?;

    write_json(&out_dir.join("summary.json"), &result.summary())?;
    let path = out_dir.join("config.toml");
    std::fs::write(&path, result.config.to_toml()).map_err(io_err(&path))?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// One scheme's line of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scheme: Scheme,
    /// Per-round objective, `None` where the scheme had no feasible allocation.
    pub objectives: Vec<Option<f64>>,
    pub mean_objective: Option<f64>,
    pub final_eval_accuracy: Option<f64>,
    pub feasible_rounds: usize,
    pub rounds: usize,
    pub total_payload_bytes: f64,
}

/// Trains once per scheme on identical data, initialization, masks and
/// channels. Rounds a scheme cannot serve are trained at its nominal rate
/// and counted as infeasible.
pub fn compare_methods(cfg: &ExperimentConfig) -> Result<Vec<ComparisonRow>> {
    let mut schemes = cfg.compare.schemes.clone();
    schemes.dedup();
    let distinct: std::collections::BTreeSet<&str> = schemes.iter().map(|s| s.name()).collect();
    if distinct.len() < 2 {
        return Err(config_err("compare.schemes needs at least two different schemes"));
    }
    let setup = Setup::new(cfg)?;
    let constants = calibrate(cfg, &setup)?;
    let problem = ProblemConstants::from_bounds(&constants)?;
    schemes
        .par_iter()
        .map(|&scheme| {
            let run = train_run(
                cfg,
                &setup,
                &constants,
                &problem,
                &RatePolicy::Allocate(scheme),
                scheme.name(),
                Fallback::Nominal,
            )?;
            let objectives: Vec<Option<f64>> = run.allocations.iter().map(|a| a.objective).collect();
            let feasible: Vec<f64> = objectives.iter().flatten().copied().collect();
            Ok(ComparisonRow {
                scheme,
                mean_objective: if feasible.is_empty() {
                    None
                } else {
                    Some(feasible.iter().sum::<f64>() / feasible.len() as f64)
                },
                objectives,
                final_eval_accuracy: run.final_report().and_then(|r| r.eval_accuracy),
                feasible_rounds: feasible.len(),
                rounds: run.reports.len(),
                total_payload_bytes: run.reports.iter().map(|r| run.payload_bytes(r)).sum(),
            })
        })
        .collect()
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let mut out = format!(
        "{:<18} {:>14} {:>10} {:>10} {:>14}\n",
        "scheme", "mean objective", "accuracy", "feasible", "payload bytes"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<18} {:>14} {:>10} {:>10} {:>14.0}\n",
            r.scheme.name(),
            r.mean_objective.map_or("-".into(), |o| format!("{o:.6e}")),
            r.final_eval_accuracy.map_or("-".into(), |a| format!("{a:.4}")),
            format!("{}/{}", r.feasible_rounds, r.rounds),
            r.total_payload_bytes
        ));
    }
    out
}
