//! Benchmark runner: builds the configured LGDS systems, runs every
//! policy over seeded simulations, and writes regret/diagnostics CSVs
//! plus a JSON summary.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use lgds_bandit::{run_experiment, ExperimentConfig, Overrides};

#[derive(Parser, Debug)]
#[command(
    name = "ares-bench",
    about = "Bandit regret benchmark on linear Gaussian dynamical systems",
    version
)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Coupling-decay values of the test systems (overrides the config).
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    psi: Option<Vec<f64>>,

    /// Rounds per simulation.
    #[arg(long)]
    rounds: Option<u64>,

    /// Simulations per system.
    #[arg(long)]
    sims: Option<u64>,

    /// Base seed for the deterministic cell-seed scheme.
    #[arg(long)]
    seed: Option<u64>,

    /// Policy ids to run (comma separated), e.g.
    /// oracle,ares,ucb,swucb,rexp3,random,pies-s1,pies-s10
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    policies: Option<Vec<String>>,

    /// Output directory for CSV/JSON artifacts.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Emit true-system diagnostic columns (confidence radii).
    #[arg(long)]
    instrumented: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut config = match &cli.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(cfg) => cfg,
            Err(err) => {
                eprintln!("error: {err}");
                return ExitCode::FAILURE;
            }
        },
        None => ExperimentConfig::default(),
    };
    let overrides = Overrides {
        psi: cli.psi,
        rounds: cli.rounds,
        sims: cli.sims,
        seed: cli.seed,
        policies: cli.policies,
        out: cli.out,
        instrumented: cli.instrumented,
    };
    if let Err(err) = config.apply_overrides(&overrides) {
        eprintln!("error: {err}");
        return ExitCode::FAILURE;
    }

    eprintln!(
        "running {} system(s) x {} sims x {} rounds, policies: {}",
        config.environment.psi.len(),
        config.environment.num_sims,
        config.environment.horizon,
        config.policies.ids.join(", ")
    );
    match run_experiment(&config) {
        Ok(report) => {
            for psi_report in &report.psis {
                eprintln!("psi = {}:", psi_report.psi);
                for id in &psi_report.policy_ids {
                    let median = psi_report.final_median(id).unwrap_or(f64::NAN);
                    eprintln!("  {id:<10} median final regret {median:.3}");
                }
            }
            eprintln!("artifacts written to {}", config.output.dir.display());
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
