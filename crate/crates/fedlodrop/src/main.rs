use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use fedlodrop::config::{ExperimentConfig, OptimizerConfig, Scheme};
use fedlodrop::experiment::{
    calibrate, compare_methods, comparison_table, emit_results, run_experiment, solve_scheme, Setup,
};
use fedlodrop::io::{load_document, parse_grid, solution_table, write_bound_sweep_csv, write_json, SolveDocument};
use fedlodrop::HarnessError;
use fedlodrop_core::bounds::sweep;

#[derive(Parser)]
#[command(
    name = "fedlodrop",
    version,
    about = "Federated LoRA with dropout: simulate, bound and allocate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SolveMethod {
    Bnb,
    Psca,
    Oracle,
}

#[derive(Subcommand)]
enum Command {
    /// Train according to a config and write the result files.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one allocation problem.
    Solve {
        /// Network plus constants, JSON or TOML.
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum, default_value = "bnb")]
        method: SolveMethod,
        /// P-SCA stopping tolerance.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        node_budget: Option<usize>,
        /// P-SCA penalty weight.
        #[arg(long)]
        tau: Option<f64>,
        /// Write the solution JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate every bound on a grid of uniform dropout rates.
    Bounds {
        #[arg(long)]
        config: PathBuf,
        /// `start:stop:step` or a comma-separated list.
        #[arg(long, default_value = "0:0.6:0.05")]
        gamma_grid: String,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per allocation scheme on identical seeds and channels.
    Compare {
        #[arg(long)]
        config: PathBuf,
        /// Also write the comparison as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let infeasible = e.chain().any(|c| {
                c.downcast_ref::<HarnessError>()
                    .is_some_and(HarnessError::is_infeasible)
            }) || e
                .chain()
                .any(|c| matches!(c.downcast_ref(), Some(fedlodrop_core::Error::Infeasible(_))));
            ExitCode::from(if infeasible { 2 } else { 1 })
        }
    }
}

fn load_config(path: &Path) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn dispatch(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let result = run_experiment(&cfg)?;
            emit_results(&result, &out)?;
            for r in &result.runs {
                let last = r.final_report().expect("at least one round");
                eprintln!(
                    "{}: {} rounds in {:.2?}, train loss {:.4}, eval accuracy {}",
                    r.label,
                    r.reports.len(),
                    r.elapsed,
                    last.train_loss,
                    last.eval_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Solve {
            instance,
            method,
            tol,
            node_budget,
            tau,
            out,
        } => {
            let doc: SolveDocument =
                load_document(&instance).with_context(|| format!("loading {}", instance.display()))?;
            let inst = doc.network.instance()?;
            let c = doc.problem_constants()?;
            let mut opt = OptimizerConfig::default();
            if let Some(v) = doc.max_dropout {
                opt.max_dropout = v;
            }
            if let Some(v) = tol {
                opt.tol = v;
            }
            if let Some(v) = node_budget {
                opt.node_budget = v;
            }
            opt.tau = tau;
            let scheme = match method {
                SolveMethod::Bnb => Scheme::Bnb,
                SolveMethod::Psca => Scheme::Psca,
                SolveMethod::Oracle => Scheme::Oracle,
            };
            let sol = solve_scheme(scheme, &c, &inst, &opt)?;
            let table = solution_table(&sol);
            match out {
                Some(path) => {
                    write_json(&path, &sol)?;
                    print!("{table}");
                }
                None => {
                    println!("{}", serde_json::to_string_pretty(&sol)?);
                    eprint!("{table}");
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Bounds {
            config,
            gamma_grid,
            out,
        } => {
            let cfg = load_config(&config)?;
            let grid = parse_grid(&gamma_grid)?;
            let setup = Setup::new(&cfg)?;
            let constants = calibrate(&cfg, &setup)?;
            let rows = sweep(&constants, &grid)?;
            match out {
                Some(path) => {
                    let f = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
                    write_bound_sweep_csv(f, &rows)?;
                }
                None => {
                    let stdout = std::io::stdout();
                    write_bound_sweep_csv(stdout.lock(), &rows)?;
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Compare { config, out } => {
            let cfg = load_config(&config)?;
            let rows = compare_methods(&cfg)?;
            print!("{}", comparison_table(&rows));
            std::io::stdout().flush()?;
            if let Some(path) = out {
                write_json(&path, &rows)?;
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
