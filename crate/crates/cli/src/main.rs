//! `gradnet` — train, sweep, and inspect GradNet experiments.
//!
//! Exit codes: 0 success, 1 config/usage error, 2 diverged training run,
//! 3 gradient-check failure.

mod inspect;
mod report;
mod sweep;

use clap::{Parser, Subcommand};
use gradnet_core::{gradcheck_suite, train_with, ExperimentConfig, RunStatus, DEFAULT_TOL};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gradnet", version, about = "GradNet training harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a JSON experiment config.
    Train {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify every operation and layer against finite differences.
    Gradcheck {
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },
    /// Run a config across a parameter grid and seeds.
    Sweep {
        /// Base experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Grid axis as KEY=V1,V2,... where KEY is a dot path into the
        /// config (e.g. model.depth=8,16,64). Repeatable; axes combine as a
        /// cartesian product.
        #[arg(long, required = true)]
        vary: Vec<String>,
        /// Number of seeds per grid point (config.seed, config.seed+1, ...).
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Output directory (default: the config's out_dir, or "sweep").
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel worker threads (runs are independent; each is
        /// single-threaded and deterministic).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Print shape and statistics of a dataset file or directory.
    Inspect {
        /// IDX images file, CIFAR-10 .bin file, or a dataset directory.
        #[arg(long)]
        data: PathBuf,
    },
    /// Combine per-run metrics from a sweep/run directory into one CSV.
    Report {
        /// Directory containing run subdirectories with metrics.csv files.
        #[arg(long)]
        runs: PathBuf,
    },
}

fn main() -> ExitCode {
    // Die quietly when a downstream pipe closes (`gradnet report ... | head`)
    // instead of panicking on the first failed println.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap would exit 2 on usage errors; this tool reserves 2 for
            // diverged runs and reports usage problems as 1. --help/--version
            // land here too and stay successful.
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, gradnet_core::Error> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let mut cfg = ExperimentConfig::from_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out_dir = Some(o);
            }
            let history = train_with(&cfg, &mut |r| {
                println!(
                    "epoch {:>3}  g={:<5.3}  train_loss={:<9.4}  train_acc={:<7.4}  val_loss={:<9.4}  val_acc={:<7.4}",
                    r.epoch, r.g, r.train_loss, r.train_acc, r.val_loss, r.val_acc
                );
            })?;
            println!(
                "status={:?} best_epoch={} best_val_acc={} params={}",
                history.status,
                history.best_epoch.map_or("none".into(), |e| e.to_string()),
                history.best_val_acc,
                history.param_count
            );
            if let Some(dir) = &cfg.out_dir {
                println!("artifacts written to {}", dir.display());
            }
            Ok(if history.status == RunStatus::Diverged {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Gradcheck { tol } => {
            let report = gradcheck_suite(tol);
            print!("{}", report.render());
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(3) })
        }
        Command::Sweep { config, vary, seeds, out, jobs } => {
            sweep::run(&config, &vary, seeds, out, jobs)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Inspect { data } => {
            inspect::run(&data)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { runs } => {
            report::run(&runs)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
