//! Regularized linear CCA.
//!
//! Used both as a baseline and as the post-hoc extractor of canonical
//! components in the total-correlation protocol.

use serde::{Deserialize, Serialize};

use crate::dcca::objective::LossCache;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Which of the two paired views a matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearCcaModel {
    /// `n1 x d`
    pub a1: Matrix,
    /// `n2 x d`
    pub a2: Matrix,
    pub mean1: Vec<f64>,
    pub mean2: Vec<f64>,
    /// Canonical correlations on the training data, descending.
    pub correlations: Vec<f64>,
    pub r1: f64,
    pub r2: f64,
}

impl LinearCcaModel {
    pub fn d(&self) -> usize {
        self.correlations.len()
    }

    pub fn input_dim(&self, view: View) -> usize {
        match view {
            View::One => self.a1.rows(),
            View::Two => self.a2.rows(),
        }
    }
}

/// Fits linear CCA on `n1 x N` and `n2 x N` views with ridge terms `r1`, `r2`.
pub fn fit_linear_cca(
    x1: &Matrix,
    x2: &Matrix,
    r1: f64,
    r2: f64,
    d: usize,
) -> Result<LinearCcaModel> {
    if x1.cols() < 2 {
        return Err(Error::invalid(format!(
            "linear CCA needs at least 2 samples, got {}",
            x1.cols()
        )));
    }
    let max_d = x1.rows().min(x2.rows());
    if d > max_d {
        return Err(Error::invalid(format!(
            "d = {d} exceeds min(n1, n2) = {max_d}"
        )));
    }
    let cache = LossCache::new(x1, x2, r1, r2, d)?;
    let (a1, a2) = cache.solution.projections();
    Ok(LinearCcaModel {
        a1,
        a2,
        mean1: cache.centered.mean1,
        mean2: cache.centered.mean2,
        correlations: cache.solution.correlations().to_vec(),
        r1,
        r2,
    })
}

/// `Aⱼᵀ (X - meanⱼ)`.
pub fn transform(model: &LinearCcaModel, x: &Matrix, view: View) -> Result<Matrix> {
    let (a, mean) = match view {
        View::One => (&model.a1, &model.mean1),
        View::Two => (&model.a2, &model.mean2),
    };
    if x.rows() != a.rows() {
        return Err(Error::dim(format!(
            "view {view:?} expects {} features, got {}",
            a.rows(),
            x.rows()
        )));
    }
    Ok(a.t_matmul(&x.sub_row_vector(mean)))
}

/// Per-row Pearson correlations between two `d x N` projections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CanonicalCorrelations {
    pub values: Vec<f64>,
    /// Rows where either side had zero variance; their value is reported as 0.
    pub zero_variance: Vec<usize>,
}

impl CanonicalCorrelations {
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

pub fn canonical_correlations(p1: &Matrix, p2: &Matrix) -> Result<CanonicalCorrelations> {
    if p1.shape() != p2.shape() {
        return Err(Error::dim(format!(
            "projections are {}x{} and {}x{}",
            p1.rows(),
            p1.cols(),
            p2.rows(),
            p2.cols()
        )));
    }
    let n = p1.cols();
    if n < 2 {
        return Err(Error::invalid("correlation needs at least 2 samples"));
    }
    let m1 = p1.row_means();
    let m2 = p2.row_means();
    let mut values = Vec::with_capacity(p1.rows());
    let mut zero_variance = Vec::new();
    for k in 0..p1.rows() {
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for j in 0..n {
            let x = p1[(k, j)] - m1[k];
            let y = p2[(k, j)] - m2[k];
            sxy += x * y;
            sxx += x * x;
            syy += y * y;
        }
        if sxx == 0.0 || syy == 0.0 {
            zero_variance.push(k);
            values.push(0.0);
        } else {
            values.push((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0));
        }
    }
    Ok(CanonicalCorrelations {
        values,
        zero_variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = crate::rng::stream(seed, 7);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn self_correlation_is_one() {
        let x = gaussian(3, 200, 1);
        let m = fit_linear_cca(&x, &x, 1e-8, 1e-8, 3).unwrap();
        for c in &m.correlations {
            assert!((c - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn independent_views_are_uncorrelated() {
        for seed in 0..5 {
            let x1 = gaussian(4, 10_000, 10 + seed);
            let x2 = gaussian(4, 10_000, 20 + seed);
            let m = fit_linear_cca(&x1, &x2, 1e-8, 1e-8, 2).unwrap();
            assert!(m.correlations.iter().all(|&c| c < 0.05), "{:?}", m.correlations);
        }
    }

    #[test]
    fn transform_whitens_training_data() {
        let x1 = gaussian(4, 500, 2);
        let x2 = x1.add(&gaussian(4, 500, 3).scale(0.7));
        let m = fit_linear_cca(&x1, &x2, 1e-6, 1e-6, 3).unwrap();
        let p1 = transform(&m, &x1, View::One).unwrap();
        let p2 = transform(&m, &x2, View::Two).unwrap();
        for k in 0..3 {
            let row = p1.row(k);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 499.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
        let cc = canonical_correlations(&p1, &p2).unwrap();
        for (a, b) in cc.values.iter().zip(&m.correlations) {
            assert!((a - b).abs() < 1e-6);
        }
        let single = transform(&m, &x1.column_range(0, 1), View::One).unwrap();
        assert_eq!(single.shape(), (3, 1));
        assert!(transform(&m, &x1, View::Two).is_ok());
        assert!(transform(&m, &gaussian(2, 5, 1), View::One).is_err());
    }

    #[test]
    fn fit_validates_arguments() {
        let x = gaussian(2, 10, 4);
        assert!(fit_linear_cca(&x, &x, 1e-3, 1e-3, 3).is_err());
        assert!(fit_linear_cca(&x.column_range(0, 1), &x.column_range(0, 1), 1e-3, 1e-3, 1).is_err());
    }

    #[test]
    fn correlation_signs() {
        let p = gaussian(3, 50, 5);
        let cc = canonical_correlations(&p, &p).unwrap();
        assert!(cc.values.iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let cc = canonical_correlations(&p, &p.scale(-1.0)).unwrap();
        assert!(cc.values.iter().all(|&v| (v + 1.0).abs() < 1e-12));
    }

    #[test]
    fn correlation_matches_textbook_formula() {
        let p1 = gaussian(3, 50, 6);
        let p2 = gaussian(3, 50, 7);
        let cc = canonical_correlations(&p1, &p2).unwrap();
        for k in 0..3 {
            let (a, b) = (p1.row(k), p2.row(k));
            let ma = a.iter().sum::<f64>() / 50.0;
            let mb = b.iter().sum::<f64>() / 50.0;
            let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / 49.0;
            let sa = (a.iter().map(|x| (x - ma).powi(2)).sum::<f64>() / 49.0).sqrt();
            let sb = (b.iter().map(|y| (y - mb).powi(2)).sum::<f64>() / 49.0).sqrt();
            assert!((cc.values[k] - cov / (sa * sb)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_variance_row_reports_zero() {
        let mut p1 = gaussian(2, 20, 8);
        for j in 0..20 {
            p1[(1, j)] = 2.0;
        }
        let p2 = gaussian(2, 20, 9);
        let cc = canonical_correlations(&p1, &p2).unwrap();
        assert_eq!(cc.values[1], 0.0);
        assert_eq!(cc.zero_variance, vec![1]);
    }
}
