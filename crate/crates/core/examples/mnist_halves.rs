//! Left and right halves of MNIST digits as two views: DCCA against DS-DCCA.
//!
//!     cargo run --release --example mnist_halves -- [epochs]

use std::path::Path;

use dscca::data::{make_splits, read_idx_images, split_halves, SplitSpec};
use dscca::dcca::{train_dsdcca, ArchitectureConfig, TrainingConfig};
use dscca::dsl::DslVariant;
use dscca::eval::{total_correlation_protocol, DEFAULT_POSTHOC_GRID};

fn main() -> dscca::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(60);
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata/mnist10k-images-idx3-ubyte.gz");
    let (images, h, w) = read_idx_images(&path)?;
    let ds = make_splits(split_halves(&images, h, w)?, SplitSpec::Counts(5000, 1000, 1000), 0)?;
    println!("views: {} and {} pixels, {} samples", ds.view1.rows(), ds.view2.rows(), ds.len());

    for (name, variant, warmup) in [
        ("DCCA", DslVariant::Conventional, epochs),
        ("DS-DCCA", DslVariant::Dynamic, epochs / 2),
    ] {
        let cfg = TrainingConfig {
            d: 10,
            epochs,
            warmup_epochs: warmup,
            batch_size: 250,
            arch: ArchitectureConfig {
                hidden1: vec![128, 128],
                hidden2: vec![128, 128],
                feature_dim: None,
                scaler_hidden: vec![128],
                variant,
                ..Default::default()
            },
            ..Default::default()
        };
        let model = train_dsdcca(&cfg, &ds)?;
        let report = total_correlation_protocol(&model, &ds, 10, &DEFAULT_POSTHOC_GRID)?;
        println!(
            "{name:<8} test total {:.3} / 10, best epoch {}, post-hoc reg {:?}",
            report.total, model.best_epoch, report.posthoc_reg
        );
    }
    Ok(())
}
