//! Linear CCA recovers the planted correlations of a synthetic two-view dataset.
//!
//!     cargo run --release --example linear_cca

use dscca::data::{synth_correlated, Nonlinearity};
use dscca::dcca::estimate_covariances;
use dscca::linear_cca::{canonical_correlations, fit_linear_cca, transform, View};
use dscca::Matrix;

fn main() -> dscca::Result<()> {
    let targets = [0.9, 0.6, 0.3];
    let ds = synth_correlated(20_000, 3, (8, 6), &targets, Nonlinearity::None, 0)?;
    let (r1, r2) = (1e-6, 1e-6);
    let model = fit_linear_cca(&ds.view1, &ds.view2, r1, r2, 3)?;
    for (k, (got, want)) in model.correlations.iter().zip(&targets).enumerate() {
        println!("component {k}: {got:.4} (planted {want})");
    }

    let p1 = transform(&model, &ds.view1, View::One)?;
    let p2 = transform(&model, &ds.view2, View::Two)?;
    let empirical = canonical_correlations(&p1, &p2)?;
    println!("total correlation of the projections: {:.4}", empirical.total());

    let (cov, _) = estimate_covariances(&ds.view1, &ds.view2, r1, r2)?;
    let white = model.a1.t_matmul(&cov.sigma11).matmul(&model.a1);
    println!(
        "max |A1' S11 A1 - I| = {:.1e}",
        white.max_abs_diff(&Matrix::identity(3))
    );
    Ok(())
}
