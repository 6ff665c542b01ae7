//! The correlation objective shared by every model in the crate: regularized
//! covariance estimates, the whitened cross-covariance `Ψ`, the negative sum of
//! its top singular values and the gradient of that sum with respect to the
//! (uncentered) feature matrices.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{center_columns, svd, sym_inv_sqrt_default, Matrix, SvdResult};

/// Singular values closer than this are treated as repeated.
pub const DEGENERACY_TOLERANCE: f64 = 1e-9;

/// Regularized auto- and cross-covariances of two `d x N` feature matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimates {
    pub sigma11: Matrix,
    pub sigma12: Matrix,
    pub sigma22: Matrix,
    pub r1: f64,
    pub r2: f64,
    pub n: usize,
}

/// Centers both feature matrices and estimates
/// `Σ11 = F̄1F̄1ᵀ/(N-1) + r1·I`, `Σ22` likewise and `Σ12 = F̄1F̄2ᵀ/(N-1)`.
///
/// Returns the estimates together with the centered features and their means.
pub fn estimate_covariances(
    f1: &Matrix,
    f2: &Matrix,
    r1: f64,
    r2: f64,
) -> Result<(CovarianceEstimates, Centered)> {
    if f1.cols() != f2.cols() {
        return Err(Error::dim(format!(
            "views have {} and {} samples",
            f1.cols(),
            f2.cols()
        )));
    }
    let n = f1.cols();
    if n < 2 {
        return Err(Error::invalid(format!(
            "covariance estimation needs at least 2 samples, got {n}"
        )));
    }
    if !(r1 >= 0.0 && r2 >= 0.0 && r1.is_finite() && r2.is_finite()) {
        return Err(Error::invalid(format!(
            "regularization must be finite and non-negative, got r1={r1}, r2={r2}"
        )));
    }
    if !f1.is_finite() || !f2.is_finite() {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    let (c1, m1) = center_columns(f1)?;
    let (c2, m2) = center_columns(f2)?;
    let k = 1.0 / (n as f64 - 1.0);
    let sigma11 = c1.matmul_t(&c1).scale(k).symmetrize().add_scaled_identity(r1);
    let sigma22 = c2.matmul_t(&c2).scale(k).symmetrize().add_scaled_identity(r2);
    let sigma12 = c1.matmul_t(&c2).scale(k);
    Ok((
        CovarianceEstimates {
            sigma11,
            sigma12,
            sigma22,
            r1,
            r2,
            n,
        },
        Centered {
            f1: c1,
            f2: c2,
            mean1: m1,
            mean2: m2,
        },
    ))
}

/// Centered feature matrices and the means that were removed.
#[derive(Debug, Clone)]
pub struct Centered {
    pub f1: Matrix,
    pub f2: Matrix,
    pub mean1: Vec<f64>,
    pub mean2: Vec<f64>,
}

/// Whitened cross-covariance `Ψ = Σ11^{-1/2} Σ12 Σ22^{-1/2}` and its SVD.
#[derive(Debug, Clone)]
pub struct CcaSolution {
    pub inv_sqrt11: Matrix,
    pub inv_sqrt22: Matrix,
    pub psi: Matrix,
    pub svd: SvdResult,
    pub d: usize,
}

impl CcaSolution {
    pub fn from_covariances(cov: &CovarianceEstimates, d: usize) -> Result<Self> {
        let max_d = cov.sigma11.rows().min(cov.sigma22.rows());
        if d == 0 || d > max_d {
            return Err(Error::invalid(format!(
                "projection dimension {d} must be in 1..={max_d}"
            )));
        }
        let inv_sqrt11 = sym_inv_sqrt_default(&cov.sigma11)?;
        let inv_sqrt22 = sym_inv_sqrt_default(&cov.sigma22)?;
        let psi = inv_sqrt11.matmul(&cov.sigma12).matmul(&inv_sqrt22);
        let svd = svd(&psi)?;
        Ok(CcaSolution {
            inv_sqrt11,
            inv_sqrt22,
            psi,
            svd,
            d,
        })
    }

    /// Top-`d` canonical correlations.
    pub fn correlations(&self) -> &[f64] {
        &self.svd.singular_values[..self.d]
    }

    /// `A1 = Σ11^{-1/2} U_d`, `A2 = Σ22^{-1/2} V_d`.
    pub fn projections(&self) -> (Matrix, Matrix) {
        let a1 = self.inv_sqrt11.matmul(&self.svd.u.leading_columns(self.d));
        let a2 = self.inv_sqrt22.matmul(&self.svd.v.leading_columns(self.d));
        (a1, a2)
    }

    /// True when two of the top `d` singular values (or the `d`-th and the
    /// next one) coincide, so the objective is not differentiable here.
    pub fn is_degenerate(&self) -> bool {
        let s = &self.svd.singular_values;
        let upto = (self.d + 1).min(s.len());
        s[..upto]
            .windows(2)
            .any(|w| (w[0] - w[1]).abs() < DEGENERACY_TOLERANCE)
    }
}

/// Everything the loss, its gradient and the projection matrices share.
#[derive(Debug, Clone)]
pub struct LossCache {
    pub centered: Centered,
    pub cov: CovarianceEstimates,
    pub solution: CcaSolution,
}

impl LossCache {
    pub fn new(f1: &Matrix, f2: &Matrix, r1: f64, r2: f64, d: usize) -> Result<Self> {
        let (cov, centered) = estimate_covariances(f1, f2, r1, r2)?;
        let solution = CcaSolution::from_covariances(&cov, d)?;
        Ok(LossCache {
            centered,
            cov,
            solution,
        })
    }

    pub fn d(&self) -> usize {
        self.solution.d
    }

    /// `-Σ_{k≤d} σ_k(Ψ)`.
    pub fn loss(&self) -> f64 {
        -self.solution.correlations().iter().sum::<f64>()
    }

    pub fn correlations(&self) -> &[f64] {
        self.solution.correlations()
    }
}

/// Deep CCA loss: negative sum of the top `d` singular values of `Ψ`.
pub fn dcca_loss(f1: &Matrix, f2: &Matrix, r1: f64, r2: f64, d: usize) -> Result<(f64, LossCache)> {
    let cache = LossCache::new(f1, f2, r1, r2, d)?;
    Ok((cache.loss(), cache))
}

/// Gradient of [`dcca_loss`] with respect to both feature matrices.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub d_f1: Matrix,
    pub d_f2: Matrix,
    /// Set when the top singular values are repeated; the result is then a
    /// subgradient.
    pub degenerate: bool,
}

/// Analytic gradient of the loss.
///
/// With `U_d`, `V_d`, `D` the top-`d` singular triplets of `Ψ`:
/// `∇12 = Σ11^{-1/2} U_d V_dᵀ Σ22^{-1/2}`,
/// `∇11 = -½ Σ11^{-1/2} U_d D U_dᵀ Σ11^{-1/2}` (and `∇22` symmetrically), and the
/// correlation sum has gradient `(2∇11 F̄1 + ∇12 F̄2)/(N-1)` in `F̄1`. The loss
/// gradient is its negation, pulled back through the centering map.
pub fn dcca_loss_grad(cache: &LossCache) -> LossGradient {
    let sol = &cache.solution;
    let d = sol.d;
    let n = cache.cov.n as f64;
    let sigmas = &sol.svd.singular_values[..d];
    let a1 = sol.inv_sqrt11.matmul(&sol.svd.u.leading_columns(d));
    let a2 = sol.inv_sqrt22.matmul(&sol.svd.v.leading_columns(d));

    let grad12 = a1.matmul_t(&a2);
    let mut a1_scaled = a1.clone();
    let mut a2_scaled = a2.clone();
    for (k, &s) in sigmas.iter().enumerate() {
        a1_scaled.col_mut(k).iter_mut().for_each(|v| *v *= s);
        a2_scaled.col_mut(k).iter_mut().for_each(|v| *v *= s);
    }
    // 2∇11 = -A1 D A1ᵀ
    let two_grad11 = a1_scaled.matmul_t(&a1).scale(-1.0);
    let two_grad22 = a2_scaled.matmul_t(&a2).scale(-1.0);

    let c = &cache.centered;
    let mut g1 = two_grad11.matmul(&c.f1);
    g1.add_assign(&grad12.matmul(&c.f2));
    let mut g2 = two_grad22.matmul(&c.f2);
    g2.add_assign(&grad12.t_matmul(&c.f1));

    let scale = -1.0 / (n - 1.0);
    let d_f1 = remove_row_means(&g1.scale(scale));
    let d_f2 = remove_row_means(&g2.scale(scale));

    let degenerate = sol.is_degenerate();
    if degenerate {
        warn!("repeated canonical correlations; using a subgradient");
    }
    LossGradient {
        d_f1,
        d_f2,
        degenerate,
    }
}

/// Pullback through `F ↦ F - mean(F)`: subtract the per-row mean of the gradient.
fn remove_row_means(g: &Matrix) -> Matrix {
    let means = g.row_means();
    g.sub_row_vector(&means)
}

/// Projection matrices `A1`, `A2` satisfying the whitening constraints on the
/// cached data.
pub fn compute_projections(cache: &LossCache) -> (Matrix, Matrix) {
    cache.solution.projections()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = crate::rng::stream(seed, 0);
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identical_views_cross_equals_auto_minus_ridge() {
        let f = random(3, 20, 1);
        let (cov, _) = estimate_covariances(&f, &f, 1e-3, 1e-3).unwrap();
        let auto = cov.sigma11.add_scaled_identity(-1e-3);
        assert!(auto.max_abs_diff(&cov.sigma12) < 1e-15);
    }

    #[test]
    fn constant_features_give_ridge_only() {
        let f = Matrix::filled(2, 10, 3.5);
        let (cov, _) = estimate_covariances(&f, &f, 0.25, 0.5).unwrap();
        assert_eq!(cov.sigma11, Matrix::identity(2).scale(0.25));
        assert_eq!(cov.sigma22, Matrix::identity(2).scale(0.5));
    }

    #[test]
    fn covariance_matches_double_loop() {
        let f1 = random(3, 20, 2);
        let f2 = random(3, 20, 3);
        let (cov, _) = estimate_covariances(&f1, &f2, 0.1, 0.2).unwrap();
        let n = 20;
        let mean = |f: &Matrix, i: usize| (0..n).map(|j| f[(i, j)]).sum::<f64>() / n as f64;
        for a in 0..3 {
            for b in 0..3 {
                let mut s11 = 0.0;
                let mut s12 = 0.0;
                let mut s22 = 0.0;
                for j in 0..n {
                    let x1a = f1[(a, j)] - mean(&f1, a);
                    let x1b = f1[(b, j)] - mean(&f1, b);
                    let x2a = f2[(a, j)] - mean(&f2, a);
                    let x2b = f2[(b, j)] - mean(&f2, b);
                    s11 += x1a * x1b;
                    s12 += x1a * x2b;
                    s22 += x2a * x2b;
                }
                let k = 1.0 / (n as f64 - 1.0);
                let ridge = if a == b { 1.0 } else { 0.0 };
                assert!((cov.sigma11[(a, b)] - (k * s11 + 0.1 * ridge)).abs() < 1e-12);
                assert!((cov.sigma12[(a, b)] - k * s12).abs() < 1e-12);
                assert!((cov.sigma22[(a, b)] - (k * s22 + 0.2 * ridge)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn covariance_needs_two_samples() {
        let f = Matrix::zeros(2, 1);
        assert!(estimate_covariances(&f, &f, 0.1, 0.1).is_err());
    }

    #[test]
    fn identical_views_approach_perfect_correlation() {
        let f = random(3, 50, 4);
        for r in [1e-4, 1e-6, 1e-8] {
            let (loss, _) = dcca_loss(&f, &f, r, r, 3).unwrap();
            assert!(loss >= -3.0 - 1e-9);
            assert!((loss + 3.0).abs() < 1e3 * r, "r={r} loss={loss}");
        }
    }

    #[test]
    fn tiny_instance_composed_by_hand() {
        let f1 = Matrix::from_rows(&[
            &[0.3, -1.2, 0.8, 2.0, -0.4, 0.1],
            &[1.1, 0.5, -0.7, 0.2, 0.9, -1.5],
        ]);
        let f2 = Matrix::from_rows(&[
            &[0.5, -0.9, 1.0, 1.6, -0.1, 0.4],
            &[-0.3, 1.2, 0.1, -0.8, 0.7, 0.6],
        ]);
        let (loss, _) = dcca_loss(&f1, &f2, 1e-3, 1e-3, 2).unwrap();

        // assemble Ψ explicitly from the definition
        let c = |f: &Matrix| {
            let m = f.row_means();
            f.sub_row_vector(&m)
        };
        let (c1, c2) = (c(&f1), c(&f2));
        let s11 = c1.matmul_t(&c1).scale(0.2).add_scaled_identity(1e-3);
        let s22 = c2.matmul_t(&c2).scale(0.2).add_scaled_identity(1e-3);
        let s12 = c1.matmul_t(&c2).scale(0.2);
        let w1 = crate::linalg::sym_inv_sqrt(&s11, 1e-14).unwrap();
        let w2 = crate::linalg::sym_inv_sqrt(&s22, 1e-14).unwrap();
        let sv = svd(&w1.matmul(&s12).matmul(&w2)).unwrap();
        let expected = -(sv.singular_values[0] + sv.singular_values[1]);
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_translation_invariant() {
        let f1 = random(4, 32, 5);
        let f2 = random(4, 32, 6);
        let (_, cache) = dcca_loss(&f1, &f2, 1e-3, 1e-3, 4).unwrap();
        let g = dcca_loss_grad(&cache);
        let mut shifted = f1.clone();
        shifted.add_row_vector(&[3.0, -1.0, 0.5, 7.0]);
        let (_, cache2) = dcca_loss(&shifted, &f2, 1e-3, 1e-3, 4).unwrap();
        let g2 = dcca_loss_grad(&cache2);
        assert!(g.d_f1.max_abs_diff(&g2.d_f1) < 1e-10);
        assert!(g.d_f2.max_abs_diff(&g2.d_f2) < 1e-10);
    }

    #[test]
    fn identical_views_have_symmetric_gradient() {
        let f = random(3, 40, 7);
        let (_, cache) = dcca_loss(&f, &f, 1e-2, 1e-2, 3).unwrap();
        let g = dcca_loss_grad(&cache);
        assert!(g.d_f1.max_abs_diff(&g.d_f2) < 1e-10);
    }

    #[test]
    fn projections_whiten_and_reproduce_trace() {
        let f1 = random(4, 30, 8);
        let f2 = random(5, 30, 9);
        let (loss, cache) = dcca_loss(&f1, &f2, 1e-3, 1e-3, 3).unwrap();
        let (a1, a2) = compute_projections(&cache);
        let i1 = a1.t_matmul(&cache.cov.sigma11).matmul(&a1);
        let i2 = a2.t_matmul(&cache.cov.sigma22).matmul(&a2);
        assert!(i1.max_abs_diff(&Matrix::identity(3)) < 1e-6);
        assert!(i2.max_abs_diff(&Matrix::identity(3)) < 1e-6);
        let tr = a1.t_matmul(&cache.cov.sigma12).matmul(&a2).trace();
        assert!((tr + loss).abs() < 1e-8);
    }

    #[test]
    fn identical_views_share_projections() {
        let f = random(3, 40, 10);
        let (_, cache) = dcca_loss(&f, &f, 1e-6, 1e-6, 3).unwrap();
        let (a1, a2) = compute_projections(&cache);
        assert!(a1.max_abs_diff(&a2) < 1e-6);
    }

    #[test]
    fn rejects_bad_dimension_and_nan() {
        let f = random(3, 10, 11);
        assert!(dcca_loss(&f, &f, 1e-3, 1e-3, 4).is_err());
        let mut bad = f.clone();
        bad[(0, 0)] = f64::NAN;
        assert!(matches!(
            dcca_loss(&bad, &f, 1e-3, 1e-3, 2),
            Err(Error::NonFinite(_))
        ));
    }
}
