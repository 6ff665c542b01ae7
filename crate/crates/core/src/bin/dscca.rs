//! `dscca` command line. Outputs go under `$DSCCA_OUTPUT_DIR` (default `runs/`).
//!
//! Exit status: 0 on success, 1 for configuration and I/O errors, 2 when
//! training aborts on a numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dscca::cli::experiment::{parse_grid, train_run};
use dscca::cli::{eval_command, exit_code, output_root, retrieve_command, run_experiment, sweep, ExperimentConfig};
use dscca::eval::Direction;
use dscca::Result;

#[derive(Parser)]
#[command(name = "dscca", version, about = "Deep CCA with dynamically scaled layers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and evaluate it on the test split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Skip the test-split evaluation.
        #[arg(long)]
        no_test: bool,
    },
    /// Evaluate a saved checkpoint on the dataset of a config.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Retrieve the top-k targets for each query with a ranking checkpoint.
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        targets: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "1to2")]
        direction: Direction,
    },
    /// Train every point of a hyperparameter grid and test the best one.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    let root = output_root();
    match cli.command {
        Command::Train { config, no_test } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = root.join(&cfg.name);
            if no_test {
                let run = train_run(&cfg, &dir)?;
                println!("validation metric {:.6}", run.validation_metric);
            } else {
                let report = run_experiment(&cfg, &dir)?;
                println!("validation metric {:.6}", report.validation_metric);
                if let Some(m) = report.test_metric() {
                    println!("test metric {m:.6}");
                }
            }
            println!("wrote {}", dir.display());
        }
        Command::Eval { checkpoint, config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = root.join(&cfg.name);
            let report = eval_command(&checkpoint, &cfg, &dir)?;
            if let Some(m) = report.test_metric() {
                println!("test metric {m:.6}");
            }
            println!("wrote {}", dir.join("eval_report.json").display());
        }
        Command::Retrieve {
            checkpoint,
            queries,
            targets,
            k,
            direction,
        } => {
            let hits = retrieve_command(&checkpoint, &queries, &targets, k, direction, &root)?;
            for (q, row) in hits.iter().enumerate() {
                let ids: Vec<String> = row.iter().map(|(t, _)| t.to_string()).collect();
                println!("{q}: {}", ids.join(" "));
            }
        }
        Command::Sweep { config, grid } => {
            let cfg = ExperimentConfig::load(&config)?;
            let grid = parse_grid(&std::fs::read_to_string(&grid)?)?;
            let dir = root.join(&cfg.name).join("sweep");
            let summary = sweep(&cfg, &grid, &dir)?;
            println!("selected point {} of {}", summary.selected, summary.rows.len());
            if let Some(m) = summary.selected_report.test_metric() {
                println!("test metric {m:.6}");
            }
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
