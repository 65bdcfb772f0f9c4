//! `ivr`: runs the experiment commands from a TOML config.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ivr_core::experiments::{self as exp, ExperimentConfig, Report, RunContext};

#[derive(Parser, Debug)]
#[command(name = "ivr", version, about = "Behavior-regularized offline RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config with one section per command; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for CSV files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; 0 uses all cores.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Exact regularized solution with KKT report.
    Solve,
    /// SQL, EQL and IQL on Four Rooms.
    Fourrooms,
    /// Expert/random mixtures.
    Noisy,
    /// Distance-discarded data with coordinate features.
    Smalldata,
    /// Noisy-sine extrema demo.
    Toy,
    /// Temperature sweep with non-sparsity ratios.
    Sweep,
    /// One training run with a metrics trace.
    Train,
}

fn run(cli: &Cli) -> Result<Report> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    ivr_core::par::configure_threads(cli.jobs);
    let ctx = RunContext::new(&cli.out);
    let report = match cli.command {
        Command::Solve => exp::cmd_solve(&cfg.solve, &ctx)?,
        Command::Fourrooms => exp::cmd_fourrooms(&cfg.fourrooms, &ctx)?.0,
        Command::Noisy => exp::cmd_noisy(&cfg.noisy, &ctx)?.0,
        Command::Smalldata => exp::cmd_smalldata(&cfg.smalldata, &ctx)?.0,
        Command::Toy => exp::cmd_toy(&cfg.toy, &ctx)?,
        Command::Sweep => {
            let (report, _) = exp::cmd_sweep(&cfg.sweep, &ctx)?;
            if report.skipped > 0 {
                log::info!("reused {} completed cells", report.skipped);
            }
            report
        }
        Command::Train => exp::cmd_train(&cfg.train, &ctx)?,
    };
    Ok(report)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli).with_context(|| format!("{:?} failed", cli.command)) {
        Ok(report) => {
            for f in &report.files {
                println!("wrote {}", f.display());
            }
            if report.ok() {
                ExitCode::SUCCESS
            } else {
                for c in &report.failed {
                    eprintln!("failed cell {}: {}", c.cell, c.error);
                }
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
