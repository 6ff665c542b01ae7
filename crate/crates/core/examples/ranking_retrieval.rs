//! DS-Ranking CCA on a separable toy: cross-view retrieval by cosine similarity.
//!
//!     cargo run --release --example ranking_retrieval

use dscca::data::{make_splits, synth_correlated, Nonlinearity, Split, SplitSpec};
use dscca::dcca::{ArchitectureConfig, TrainingConfig};
use dscca::dsl::DslVariant;
use dscca::eval::{recall_at_k, Direction};
use dscca::ranking::{retrieve_batch, train_ds_ranking, RankingConfig};

fn main() -> dscca::Result<()> {
    let ds = synth_correlated(400, 8, (8, 8), &[0.99; 8], Nonlinearity::None, 81)?;
    let ds = make_splits(ds, SplitSpec::Counts(200, 100, 100), 81)?;
    let cfg = RankingConfig {
        training: TrainingConfig {
            d: 8,
            epochs: 40,
            warmup_epochs: 10,
            batch_size: 100,
            lr: 1e-2,
            seed: 82,
            arch: ArchitectureConfig {
                hidden1: vec![32],
                hidden2: vec![32],
                feature_dim: None,
                scaler_hidden: vec![16],
                variant: DslVariant::Dynamic,
                ..Default::default()
            },
            ..Default::default()
        },
        alpha: 0.95,
        margin: 0.6,
    };
    let model = train_ds_ranking(&cfg, &ds)?;
    println!("best epoch {} (validation mean R@1 {:.3})", model.best_epoch, model.best_val_recall);

    let (t1, t2) = ds.split_views(Split::Test);
    for (dir, q, t) in [(Direction::OneToTwo, &t1, &t2), (Direction::TwoToOne, &t2, &t1)] {
        let r = recall_at_k(&model, q, t, &[1, 5, 10], dir)?;
        println!("{dir}: R@1 {:.2} R@5 {:.2} R@10 {:.2}", r.recalls[0], r.recalls[1], r.recalls[2]);
    }

    let hits = retrieve_batch(&model, &t1.leading_columns(3), &t2, Direction::OneToTwo, 3)?;
    for (q, row) in hits.iter().enumerate() {
        let shown: Vec<String> = row.iter().map(|(j, s)| format!("{j} ({s:.3})")).collect();
        println!("query {q}: {}", shown.join(", "));
    }
    Ok(())
}
