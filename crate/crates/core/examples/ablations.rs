//! Every head variant on the same data, with parameter counts.
//!
//!     cargo run --release --example ablations

use dscca::data::{make_splits, synth_correlated, Nonlinearity, SplitSpec};
use dscca::dcca::{train_dsdcca, ArchitectureConfig, TrainingConfig};
use dscca::dsl::DslVariant;
use dscca::eval::{total_correlation_protocol, DEFAULT_POSTHOC_GRID};

fn main() -> dscca::Result<()> {
    let ds = synth_correlated(3000, 4, (8, 8), &[0.9, 0.8, 0.7, 0.6], Nonlinearity::TanhMix, 3)?;
    let ds = make_splits(ds, SplitSpec::Fractions(0.7, 0.15, 0.15), 3)?;
    let runs = [
        ("conventional", DslVariant::Conventional, 30),
        ("dynamic", DslVariant::Dynamic, 15),
        ("no warm-up", DslVariant::Dynamic, 0),
        ("global scale", DslVariant::GlobalScale, 15),
        ("scale outputs", DslVariant::ScaleOutputs, 15),
        ("hypernet", DslVariant::Hypernet, 15),
    ];
    println!("{:<14} {:>8} {:>8} {:>7}", "variant", "params", "extra", "total");
    for (name, variant, warmup) in runs {
        let cfg = TrainingConfig {
            d: 4,
            epochs: 30,
            warmup_epochs: warmup,
            batch_size: 300,
            arch: ArchitectureConfig {
                hidden1: vec![32, 32],
                hidden2: vec![32, 32],
                feature_dim: None,
                scaler_hidden: vec![16],
                variant,
                ..Default::default()
            },
            ..Default::default()
        };
        let m = train_dsdcca(&cfg, &ds)?;
        let report = total_correlation_protocol(&m, &ds, 4, &DEFAULT_POSTHOC_GRID)?;
        let base = m.net1.conventional_param_count() + m.net2.conventional_param_count();
        let extra = m.net1.extra_param_count() + m.net2.extra_param_count();
        println!("{name:<14} {base:>8} {extra:>8} {:>7.3}", report.total);
    }
    Ok(())
}
