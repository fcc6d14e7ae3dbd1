//! Command-line entry point: `run` executes a configured experiment,
//! `overhead` prints the closed-form traffic table, `verify` runs the
//! built-in theory checks. Diagnostics go to stderr; exit codes are
//! 0 success, 2 config error, 3 numeric error, 4 I/O or format error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hfcl_core::cli::{
    emit_overhead_table, parse_config, run_experiment, run_verification, verification_passed,
};
use hfcl_core::Error;

#[derive(Parser)]
#[command(
    name = "hfcl",
    version,
    about = "Deterministic simulator of hybrid federated/centralized learning over noisy links"
)]
struct Cli {
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true, value_name = "SEED")]
    seed_override: Option<u64>,
    /// Write outputs here instead of the config's output_dir.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment across its seeds.
    Run { config: PathBuf },
    /// Print the communication overhead per scheme and phase.
    Overhead { config: PathBuf },
    /// Run the theory self-checks (smoothness, descent bound, noise
    /// ordering, convexity split, bandwidth allocation).
    Verify,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn execute(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run { config } => {
            let mut cfg = parse_config(&config)?;
            if let Some(seed) = cli.seed_override {
                cfg.seeds = vec![seed];
            }
            let report = run_experiment(&cfg, cli.output_dir.as_deref())?;
            for (seed, acc) in &report.final_accuracy {
                println!("seed {seed}: final accuracy {acc:.2}%");
            }
            println!("results: {}", report.results_csv.display());
            println!("ledger: {}", report.ledger_json.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Overhead { config } => {
            let mut cfg = parse_config(&config)?;
            if let Some(seed) = cli.seed_override {
                cfg.seeds = vec![seed];
            }
            print!("{}", emit_overhead_table(&cfg)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let checks = run_verification();
            for c in &checks {
                let tag = if c.pass { "PASS" } else { "FAIL" };
                println!("{tag} {}: {}", c.name, c.detail);
            }
            if verification_passed(&checks) {
                Ok(ExitCode::SUCCESS)
            } else {
                Err(Error::Numeric("verification failed".into()))
            }
        }
    }
}
