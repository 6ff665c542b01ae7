//! What `dscca train` and `dscca eval` do, driven from library code: load a
//! TOML config, train, write artifacts, reload the checkpoint.
//!
//!     cargo run --release --example config_experiment -- [config.toml]

use std::path::PathBuf;

use dscca::cli::{eval_command, load_checkpoint, output_root, run_experiment, ExperimentConfig};

fn main() -> dscca::Result<()> {
    let path = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/ranking_synthetic.toml")
    });
    let cfg = ExperimentConfig::load(&path)?;
    let dir = output_root().join(&cfg.name);
    let report = run_experiment(&cfg, &dir)?;
    println!(
        "{} ({}): best epoch {}, validation {:.4}, test {:.4}",
        cfg.name,
        cfg.mode.as_str(),
        report.best_epoch,
        report.validation_metric,
        report.test_metric().unwrap_or(f64::NAN)
    );

    let checkpoint = load_checkpoint(&dir.join("checkpoint.dscca"))?;
    assert_eq!(checkpoint.config, cfg);
    let again = eval_command(&dir.join("checkpoint.dscca"), &cfg, &dir)?;
    assert_eq!(again.test_metric(), report.test_metric());
    for entry in std::fs::read_dir(&dir)? {
        println!("  {}", entry?.path().display());
    }
    Ok(())
}
