//! DS-DCCA against linear CCA on views passed through a saturating nonlinearity.
//!
//!     cargo run --release --example dsdcca_synthetic

use dscca::data::{make_splits, synth_correlated, Nonlinearity, Split, SplitSpec};
use dscca::dcca::{train_dsdcca_with, ArchitectureConfig, TrainingConfig};
use dscca::dsl::DslVariant;
use dscca::eval::{total_correlation_protocol, DEFAULT_POSTHOC_GRID};
use dscca::linear_cca::fit_linear_cca;

fn main() -> dscca::Result<()> {
    let ds = synth_correlated(8000, 4, (4, 4), &[0.9; 4], Nonlinearity::TanhMix, 0)?;
    let ds = make_splits(ds, SplitSpec::Counts(6000, 1000, 1000), 0)?;

    let (x1, x2) = ds.split_views(Split::Train);
    let linear = fit_linear_cca(&x1, &x2, 1e-6, 1e-6, 4)?;
    let linear = total_correlation_protocol(&linear, &ds, 4, &DEFAULT_POSTHOC_GRID)?;

    let cfg = TrainingConfig {
        d: 4,
        epochs: 150,
        warmup_epochs: 75,
        batch_size: 1000,
        lr: 1e-2,
        r1: 1e-3,
        r2: 1e-3,
        arch: ArchitectureConfig {
            hidden1: vec![64, 64],
            hidden2: vec![64, 64],
            feature_dim: None,
            scaler_hidden: vec![32],
            variant: DslVariant::Dynamic,
            ..Default::default()
        },
        ..Default::default()
    };
    let model = train_dsdcca_with(&cfg, &ds, &mut |rec, _, _| {
        if rec.epoch % 25 == 0 {
            println!("epoch {:>3} {:?}: validation objective {:.3}", rec.epoch, rec.phase, -rec.val_loss.unwrap_or(f64::NAN));
        }
    })?;
    let deep = total_correlation_protocol(&model, &ds, 4, &DEFAULT_POSTHOC_GRID)?;

    println!("test total correlation (max 4):");
    println!("  linear CCA {:.3}", linear.total);
    println!("  DS-DCCA    {:.3} (best epoch {})", deep.total, model.best_epoch);
    println!("  per component {:?}", deep.per_component.iter().map(|c| (c * 1e3).round() / 1e3).collect::<Vec<_>>());
    Ok(())
}
