use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedcsd_core::compare::{compare_runs, render_table};
use fedcsd_core::config::ExperimentConfig;
use fedcsd_core::experiment::{run_experiment, run_explore, run_mask_rates};
use fedcsd_core::Error;

/// Federated learning experiment runner.
#[derive(Parser)]
#[command(name = "fedcsd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a method for the configured number of rounds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Threads used for client training; results do not depend on it.
        #[arg(long, default_value_t = 1, value_parser = positive)]
        workers: usize,
    },
    /// One round of local epochs from a pretrained model, probing drift.
    Explore {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = positive)]
        workers: usize,
    },
    /// Per-round filter rates of the adaptive and arg-max masks.
    Maskrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1, value_parser = positive)]
        workers: usize,
    },
    /// Final and best accuracy of finished runs, relative to the first.
    Compare {
        #[arg(required = true, num_args = 2..)]
        dirs: Vec<PathBuf>,
    },
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

fn fail(err: Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME })
}

fn load(path: &Path) -> Result<ExperimentConfig, ExitCode> {
    ExperimentConfig::from_file(path).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(EXIT_CONFIG)
    })
}

fn main() -> ExitCode {
    // Usage errors count as configuration errors.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run { config, workers } => match load(&config) {
            Ok(cfg) => run_experiment(&cfg, workers).map(|run| {
                if let Some(last) = run.metrics.last() {
                    println!(
                        "{}: {} rounds, final accuracy {:.4}",
                        cfg.method.variant_label(),
                        last.round,
                        last.global_acc
                    );
                }
                println!("wrote {}", run.dir.display());
            }),
            Err(code) => return code,
        },
        Command::Explore { config, workers } => match load(&config) {
            Ok(cfg) => run_explore(&cfg, workers).map(|p| println!("wrote {}", p.display())),
            Err(code) => return code,
        },
        Command::Maskrate { config, workers } => match load(&config) {
            Ok(cfg) => run_mask_rates(&cfg, workers).map(|p| println!("wrote {}", p.display())),
            Err(code) => return code,
        },
        Command::Compare { dirs } => compare_runs(&dirs).map(|runs| print!("{}", render_table(&runs))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}
