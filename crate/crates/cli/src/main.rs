use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use vaoi_cli::{cmd_check, cmd_oracle, cmd_samplepath, cmd_solve, cmd_sweep, ExperimentConfig, Outcome, Overrides};
use vaoi_core::Execution;

#[derive(Parser)]
#[command(
    name = "vaoi",
    version,
    about = "Version-AoI optimal caching: solve, check, simulate"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (default: `out_dir` from the config, else ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Simulation master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// RVI span tolerance.
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true, env = "VAOI_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the MDP; write policy, values and the solver report.
    Solve,
    /// Check the structural properties of a saved policy and value function.
    Check {
        /// Policy CSV (default: <out>/policy.csv).
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Value CSV (default: <out>/values.csv if present).
        #[arg(long)]
        values: Option<PathBuf>,
    },
    /// Run the configured parameter sweeps.
    Sweep {
        /// Only run the named sweep; repeatable.
        #[arg(long = "only")]
        only: Vec<String>,
    },
    /// Trace optimal and greedy policies on a shared outcome stream.
    Samplepath,
    /// Brute-force the optimal policy of a tiny instance.
    Oracle,
}

fn run(cli: Cli) -> Result<Outcome> {
    let c = &cli.common;
    let path = c.config.as_ref().context("--config is required")?;
    let mut cfg = ExperimentConfig::load(path)?;
    let exec = match c.threads {
        Some(0) => anyhow::bail!("--threads must be at least 1"),
        Some(1) => Some(Execution::Sequential),
        Some(n) => {
            #[cfg(feature = "parallel")]
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("configuring the thread pool")?;
            #[cfg(not(feature = "parallel"))]
            let _ = n;
            Some(Execution::Parallel)
        }
        None => None,
    };
    cfg.apply(&Overrides {
        out_dir: c.out.clone(),
        seed: c.seed,
        epsilon: c.epsilon,
        exec,
    });

    match cli.command {
        Command::Solve => cmd_solve(&cfg),
        Command::Check { policy, values } => {
            let out = cfg.out_dir();
            let policy = policy.unwrap_or_else(|| out.join("policy.csv"));
            let values = values.or_else(|| Some(out.join("values.csv")).filter(|p| p.exists()));
            cmd_check(&cfg, &policy, values.as_deref())
        }
        Command::Sweep { only } => cmd_sweep(&cfg, &only).map(|(o, _)| o),
        Command::Samplepath => cmd_samplepath(&cfg),
        Command::Oracle => cmd_oracle(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => ExitCode::from(outcome.exit_code() as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
