mod artifacts;
mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::Result;

/// 4D-Var twin experiments with serial, augmented-Lagrangian and hybrid solvers.
#[derive(Parser, Debug)]
#[command(name = "al4dvar", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set experiment.outer.rho=8`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one twin experiment and write its artifacts.
    Run(Common),
    /// Compare adjoint gradients with central finite differences.
    GradientCheck {
        #[command(flatten)]
        common: Common,
        /// Scale adjoint gradients before comparing (negative-control hook).
        #[arg(long, hide = true, default_value_t = 1.0)]
        corrupt_gradient: f64,
    },
    /// Weak-scaling timings of cost and gradient evaluations.
    BenchScaling {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sub-interval counts, e.g. `1,2,4`.
        #[arg(long, value_delimiter = ',')]
        k_list: Option<Vec<usize>>,
        /// `equal-to-k`, `fixed` or `fixed:<n>`.
        #[arg(long)]
        workers_policy: Option<String>,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = config::load(common.config.as_deref(), &common.set)?;
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.experiment.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => commands::run(&resolve(&common)?),
        Command::GradientCheck {
            common,
            corrupt_gradient,
        } => commands::gradient_check_cmd(&resolve(&common)?, corrupt_gradient),
        Command::BenchScaling {
            common,
            k_list,
            workers_policy,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(k) = k_list {
                cfg.scaling.k_list = k;
            }
            if let Some(p) = workers_policy {
                cfg.scaling.workers_policy = p;
            }
            let policy = cfg.scaling.policy()?;
            commands::bench_scaling(&cfg, &cfg.scaling.k_list.clone(), policy)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are config errors; 2 is reserved for numerical failures.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
