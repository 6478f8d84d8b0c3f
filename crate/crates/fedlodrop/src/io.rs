//! File formats: dataset CSV, round-report JSON lines, the per-round summary
//! CSV, bound-sweep CSV, instance documents and solver output.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use fedlodrop_core::allocator::{AllocationSolution, ProblemConstants};
use fedlodrop_core::bounds::{BoundConstants, BoundRow};
use fedlodrop_core::model::Sample;
use fedlodrop_core::network::{NetworkInstance, NetworkParams};
use fedlodrop_core::protocol::RoundReport;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, io_err, HarnessError, Result};

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

/// Writes samples as `x0,...,x{d-1},label`.
pub fn write_dataset_csv(path: &Path, samples: &[Sample]) -> Result<()> {
    let dim = samples.first().map_or(0, |s| s.x.len());
    let mut w = csv::Writer::from_writer(create(path)?);
    let mut header: Vec<String> = (0..dim).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    w.write_record(&header)?;
    for s in samples {
        if s.x.len() != dim {
            return Err(config_err("samples differ in feature dimension"));
        }
        let mut row: Vec<String> = s.x.iter().map(|v| v.to_string()).collect();
        row.push(s.label.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Reads a dataset CSV with a header row; the last column is the integer label.
pub fn read_dataset_csv(path: &Path) -> Result<Vec<Sample>> {
    let mut r = csv::Reader::from_path(path)?;
    let width = r.headers()?.len();
    if width < 2 {
        return Err(config_err(format!(
            "{}: need feature columns and a label column",
            path.display()
        )));
    }
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| config_err(format!("{}: row {}: {what}", path.display(), i + 1));
        let x = rec
            .iter()
            .take(width - 1)
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad("non-numeric feature")))
            .collect::<Result<Vec<_>>>()?;
        let label = rec[width - 1]
            .trim()
            .parse::<usize>()
            .map_err(|_| bad("label is not a non-negative integer"))?;
        out.push(Sample { x, label });
    }
    Ok(out)
}

pub fn write_reports_jsonl(path: &Path, reports: &[RoundReport]) -> Result<()> {
    let mut w = create(path)?;
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_reports_jsonl(path: &Path) -> Result<Vec<RoundReport>> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// One row of `rounds.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub run: String,
    pub round: u64,
    pub gammas: Vec<f64>,
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub payload_bytes: f64,
}

/// `run,round,gamma_0..gamma_{K-1},train_loss,eval_accuracy,payload_bytes`.
pub fn write_summary_csv<W: Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let k = rows.first().map_or(0, |r| r.gammas.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["run".to_string(), "round".to_string()];
    header.extend((0..k).map(|i| format!("gamma_{i}")));
    header.extend(["train_loss", "eval_accuracy", "payload_bytes"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        if r.gammas.len() != k {
            return Err(config_err("summary rows differ in device count"));
        }
        let mut rec = vec![r.run.clone(), r.round.to_string()];
        rec.extend(r.gammas.iter().map(|g| g.to_string()));
        rec.push(r.train_loss.to_string());
        rec.push(r.eval_accuracy.map_or(String::new(), |a| a.to_string()));
        rec.push(r.payload_bytes.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| HarnessError::Csv(e.into()))?;
    Ok(())
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let k = r.headers()?.iter().filter(|h| h.starts_with("gamma_")).count();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .map_err(|_| config_err(format!("{}: bad number {:?}", path.display(), &rec[i])))
        };
        out.push(SummaryRow {
            run: rec[0].to_string(),
            round: num(1)? as u64,
            gammas: (0..k).map(|i| num(2 + i)).collect::<Result<_>>()?,
            train_loss: num(2 + k)?,
            eval_accuracy: if rec[3 + k].is_empty() { None } else { Some(num(3 + k)?) },
            payload_bytes: num(4 + k)?,
        });
    }
    Ok(out)
}

/// `gamma,phs_device_mean,phs_server,generalization_gap,gradient_error,loss_descent`.
pub fn write_bound_sweep_csv<W: Write>(out: W, rows: &[BoundRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| HarnessError::Csv(e.into()))?;
    Ok(())
}

/// `start:stop:step` (stop included up to rounding) or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = || config_err(format!("bad grid {spec:?}; expected start:stop:step or a,b,c"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
            if step.is_nan() || step <= 0.0 || stop < start {
                return Err(bad());
            }
            let n = ((stop - start) / step + 1e-9).floor() as usize;
            // rounded so that 0.1 * 3 prints as 0.3
            Ok((0..=n)
                .map(|i| ((start + i as f64 * step) * 1e12).round() / 1e12)
                .collect())
        }
        [list] => list.split(',').map(num).collect(),
        _ => Err(bad()),
    }
}

/// Gains are given explicitly or drawn from a seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "gains", rename_all = "snake_case")]
pub enum NetworkDoc {
    Explicit(NetworkInstance),
    /// Rayleigh gains with mean `path_loss`.
    Rayleigh(RayleighNetwork),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RayleighNetwork {
    pub seed: u64,
    pub shard_sizes: Vec<usize>,
    pub n_subcarriers: usize,
    pub params_full: usize,
    #[serde(flatten)]
    pub params: NetworkParams,
}

impl NetworkDoc {
    pub fn instance(&self) -> Result<NetworkInstance> {
        let inst = match self {
            NetworkDoc::Explicit(i) => i.clone(),
            NetworkDoc::Rayleigh(r) => r
                .params
                .instance(&r.shard_sizes, r.n_subcarriers, r.params_full, r.seed)?,
        };
        inst.validate()?;
        Ok(inst)
    }
}

/// Input of `fedlodrop solve`: the network plus the objective's constants,
/// either directly (`constants`) or as analysis constants (`bounds`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveDocument {
    pub network: NetworkDoc,
    #[serde(default)]
    pub constants: Option<ProblemConstants>,
    #[serde(default)]
    pub bounds: Option<BoundConstants>,
    #[serde(default)]
    pub max_dropout: Option<f64>,
}

impl SolveDocument {
    pub fn problem_constants(&self) -> Result<ProblemConstants> {
        let c = match (&self.constants, &self.bounds) {
            (Some(c), None) => c.clone(),
            (None, Some(b)) => ProblemConstants::from_bounds(b)?,
            _ => return Err(config_err("give exactly one of `constants` and `bounds`")),
        };
        c.validate()?;
        Ok(c)
    }
}

/// Parses JSON for `.json` files and TOML otherwise.
pub fn load_document<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        Ok(serde_json::from_str(&text)?)
    } else {
        Ok(toml::from_str(&text)?)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// Per-device summary of a solution.
pub fn solution_table(sol: &AllocationSolution) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "objective {:.6e}  ({:?})", sol.objective, sol.meta.method);
    let _ = writeln!(
        out,
        "{:>6} {:>9} {:>12} {:>12} {:>12}  subcarriers",
        "device", "gamma", "params", "t_dl (s)", "t_ul (s)"
    );
    for k in 0..sol.gamma.len() {
        let subs: Vec<String> = sol.assignment[k]
            .iter()
            .enumerate()
            .filter(|(_, &z)| z)
            .map(|(s, _)| s.to_string())
            .collect();
        let params: f64 = sol.params[k].iter().sum();
        let _ = writeln!(
            out,
            "{:>6} {:>9.5} {:>12.2} {:>12.4e} {:>12.4e}  {}",
            k,
            sol.gamma[k],
            params,
            sol.latency_dl[k],
            sol.latency_ul[k],
            subs.join(",")
        );
    }
    let m = &sol.meta;
    let _ = writeln!(
        out,
        "nodes {}  assignments {}  iterations {}  optimal {}  converged {}",
        m.nodes_explored, m.assignments_evaluated, m.iterations, m.optimal, m.converged
    );
    for n in &m.notes {
        let _ = writeln!(out, "note: {n}");
    }
    out
}
