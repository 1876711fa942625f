use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sapef::harness::{self, ExperimentConfig, RunOptions, OUTPUT_DIR_ENV};

#[derive(Parser)]
#[command(name = "sapef", version, about = "Step-ahead partial error feedback simulator")]
struct Cli {
    /// Worker threads for client-parallel work. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Directory for metrics and summaries; overrides the config.
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every replicate of a config and write metrics and summaries.
    Run { config: PathBuf },
    /// Run the config once per preview coefficient with shared seeds.
    SweepAlpha {
        config: PathBuf,
        /// Comma-separated list, e.g. 0,0.5,0.85,1.
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        alphas: Vec<f64>,
    },
    /// Print estimated constants and the closed-form quantities built from them.
    Constants { config: PathBuf },
    /// Run the invariant and bound suite; exits nonzero if any check fails.
    Verify { config: PathBuf },
    /// Per-client label histograms of a Dirichlet task, as CSV.
    PartitionStats { config: PathBuf },
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    harness::load_config(path).with_context(|| format!("loading {}", path.display()))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let opts = RunOptions {
        threads: cli.threads,
        output_dir: cli.output_dir,
    };
    match cli.command {
        Command::Run { config } => {
            let cfg = load(&config)?;
            let mut failed = false;
            for seed in harness::replicate_seeds(&cfg) {
                let s = harness::run_seed(&cfg, seed, &opts)?;
                let reached = s
                    .rounds_to_threshold
                    .map_or("not reached".to_string(), |r| format!("round {r}"));
                println!(
                    "{} seed {}: final |grad f|^2 {:.6e}, threshold {}, {} uplink bits",
                    s.name, s.seed, s.final_grad_norm_sq, reached, s.uplink_bits
                );
                if let Some(e) = &s.failure {
                    eprintln!("{} seed {} diverged: {e}", s.name, s.seed);
                    failed = true;
                }
            }
            Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::SweepAlpha { config, alphas } => {
            let cfg = load(&config)?;
            let cells = harness::sweep_alpha(&cfg, &alphas, &opts)?;
            print!("{}", harness::sweep_table(&cells));
            let failed = cells
                .iter()
                .any(|c| c.runs.as_ref().map_or(true, |r| r.iter().any(|s| s.failure.is_some())));
            Ok(if failed { ExitCode::FAILURE } else { ExitCode::SUCCESS })
        }
        Command::Constants { config } => {
            let cfg = load(&config)?;
            let (_, report) = harness::constants(&cfg, &opts)?;
            print!("{}", report.to_text());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { config } => {
            let cfg = load(&config)?;
            let report = harness::verify(&cfg, &opts)?;
            print!("{}", report.to_text());
            Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::PartitionStats { config } => {
            let cfg = load(&config)?;
            print!("{}", harness::partition_stats(&cfg)?.to_csv());
            Ok(ExitCode::SUCCESS)
        }
    }
}
