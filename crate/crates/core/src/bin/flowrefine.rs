use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use flowrefine::harness::{
    cmd_gen, cmd_run, cmd_sweep, compute_optimal_iteration_stats, run_verify, Dataset, ExperimentConfig,
    ExperimentReport, Suite, VerifyOptions,
};
use flowrefine::Error;

#[derive(Parser)]
#[command(name = "flowrefine", version, about = "Prompt refinement experiments on synthetic segmentation tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override: the task seed for `gen`, the flow seed for `run` and `sweep`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Jobs {
    /// Worker threads.
    #[arg(long, env = "FLOWREFINE_JOBS")]
    jobs: Option<usize>,
}

impl Jobs {
    fn resolve(&self) -> usize {
        self.jobs
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Refine every sample and write a report.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        jobs: Jobs,
        #[arg(long)]
        dataset: PathBuf,
        /// Report path; defaults to the config's output_path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean IoU per iteration over a grid of flow settings, as CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        jobs: Jobs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated step sizes; overrides the config's sweep grid.
        #[arg(long, value_delimiter = ',')]
        etas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        iterations: Option<Vec<usize>>,
    },
    /// Run numerical checks; exits 1 if any fails.
    Verify {
        /// all, decay, moment, fokker-planck or gradient.
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the verdicts here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimal-iteration statistics of a report.
    Stats {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    match &common.config {
        Some(path) => ExperimentConfig::load(path),
        None => Ok(ExperimentConfig::default()),
    }
}

fn emit(value: &impl serde::Serialize, out: Option<&Path>) -> Result<(), Error> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        context: "serializing output".into(),
        source: e,
    })?;
    // A closed stdout (e.g. piped into `head`) is not an error.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    if let Some(path) = out {
        std::fs::write(path, format!("{text}\n")).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Gen { common, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.task.seed = seed;
            }
            let ds = cmd_gen(&cfg, &out)?;
            eprintln!("wrote {} samples to {}", ds.samples.len(), out.display());
        }
        Command::Run {
            common,
            jobs,
            dataset,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.flow.seed = seed;
            }
            let out = out.or_else(|| cfg.output_path.clone()).ok_or_else(|| {
                Error::Validation("no report path: pass --out or set output_path in the config".into())
            })?;
            let ds = Dataset::load(&dataset)?;
            let report = cmd_run(&cfg, &ds, &out, jobs.resolve())?;
            let a = &report.aggregate;
            eprintln!(
                "n={} baseline {:.4} top1 {:.4} oracle {:.4} truncated {}",
                a.n_samples, a.baseline_miou, a.top1_miou, a.oracle_miou, a.n_truncated
            );
        }
        Command::Sweep {
            common,
            jobs,
            dataset,
            out,
            etas,
            gammas,
            iterations,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(seed) = common.seed {
                cfg.flow.seed = seed;
            }
            let mut grid = cfg.sweep.clone();
            if let Some(v) = etas {
                grid.etas = v;
            }
            if let Some(v) = gammas {
                grid.gammas = v;
            }
            if let Some(v) = iterations {
                grid.iterations = v;
            }
            let ds = Dataset::load(&dataset)?;
            let rows = cmd_sweep(&cfg, &ds, &grid, &out, jobs.resolve())?;
            eprintln!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Verify { suite, seed, out } => {
            let report = run_verify(
                suite,
                &VerifyOptions {
                    seed,
                    ..VerifyOptions::default()
                },
            )?;
            emit(&report, out.as_deref())?;
            return Ok(report.passed);
        }
        Command::Stats { report, out } => {
            let report = ExperimentReport::load(&report)?;
            let stats = compute_optimal_iteration_stats(&report)?;
            emit(&stats, out.as_deref())?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
