//! Benchmark protocols: total canonical correlation and cross-view recall@k.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Split, ViewPairDataset};
use crate::dcca::train::{project, DsccaModel};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::linear_cca::{canonical_correlations, fit_linear_cca, transform, LinearCcaModel, View};
use crate::ranking::{cosine_score_matrix, project_ranking, RankingModel};

/// Regularizers tried for the post-hoc linear CCA.
pub const DEFAULT_POSTHOC_GRID: [f64; 3] = [1e-6, 1e-4, 1e-2];

/// Regularizers tried for the linear CCA baseline on raw inputs, one per decade.
pub const LINEAR_BASELINE_GRID: [f64; 11] = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2];

/// A trained model that maps each view independently to `d` dimensions.
pub trait Projector {
    fn output_dim(&self) -> usize;
    fn project(&self, x: &Matrix, view: View) -> Result<Matrix>;
}

impl Projector for DsccaModel {
    fn output_dim(&self) -> usize {
        self.d()
    }

    fn project(&self, x: &Matrix, view: View) -> Result<Matrix> {
        project(self, x, view)
    }
}

impl Projector for LinearCcaModel {
    fn output_dim(&self) -> usize {
        self.d()
    }

    fn project(&self, x: &Matrix, view: View) -> Result<Matrix> {
        transform(self, x, view)
    }
}

impl Projector for RankingModel {
    fn output_dim(&self) -> usize {
        self.a1.cols()
    }

    fn project(&self, x: &Matrix, view: View) -> Result<Matrix> {
        project_ranking(self, x, view)
    }
}

/// Projects nothing: both views pass through unchanged.
#[derive(Debug, Clone, Copy)]
pub struct IdentityProjector(pub usize);

impl Projector for IdentityProjector {
    fn output_dim(&self) -> usize {
        self.0
    }

    fn project(&self, x: &Matrix, _view: View) -> Result<Matrix> {
        if x.rows() != self.0 {
            return Err(Error::dim(format!("expected {} rows, got {}", self.0, x.rows())));
        }
        Ok(x.clone())
    }
}

/// Passes raw views of any width through untouched.
struct RawInputs(usize);

impl Projector for RawInputs {
    fn output_dim(&self) -> usize {
        self.0
    }

    fn project(&self, x: &Matrix, _view: View) -> Result<Matrix> {
        Ok(x.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotalCorrelationReport {
    pub per_component: Vec<f64>,
    pub total: f64,
    pub upper_bound: f64,
    pub posthoc_reg: (f64, f64),
    /// Total correlation on the validation split for the chosen regularizer.
    pub validation_total: Option<f64>,
}

pub type ViewPair<'a> = (&'a Matrix, &'a Matrix);

/// Total correlation of a model on `test`: a regularized linear CCA is fit
/// on the projected training views and the per-component correlations of
/// the projected, rotated test views are summed. With a validation pair the
/// regularizer is picked from `reg_grid` by validation total; otherwise the
/// smallest grid value is used.
pub fn total_correlation_on(
    model: &dyn Projector,
    train: ViewPair<'_>,
    val: Option<ViewPair<'_>>,
    test: ViewPair<'_>,
    d: usize,
    reg_grid: &[f64],
) -> Result<TotalCorrelationReport> {
    if model.output_dim() < d {
        return Err(Error::dim(format!(
            "model projects to {} dimensions, protocol needs d = {d}",
            model.output_dim()
        )));
    }
    if reg_grid.is_empty() {
        return Err(Error::invalid("regularization grid is empty"));
    }
    let proj = |(x1, x2): ViewPair<'_>| -> Result<(Matrix, Matrix)> {
        Ok((model.project(x1, View::One)?, model.project(x2, View::Two)?))
    };
    let (t1, t2) = proj(train)?;
    let total_with = |cca: &LinearCcaModel, p: &(Matrix, Matrix)| -> Result<Vec<f64>> {
        let q1 = transform(cca, &p.0, View::One)?;
        let q2 = transform(cca, &p.1, View::Two)?;
        Ok(canonical_correlations(&q1, &q2)?.values)
    };

    let (reg, validation_total) = match val {
        None => (reg_grid.iter().copied().fold(f64::INFINITY, f64::min), None),
        Some(v) => {
            let pv = proj(v)?;
            let mut best: Option<(f64, f64)> = None;
            for &r in reg_grid {
                let cca = fit_linear_cca(&t1, &t2, r, r, d)?;
                let total: f64 = total_with(&cca, &pv)?.iter().sum();
                if best.map_or(true, |(_, b)| total > b) {
                    best = Some((r, total));
                }
            }
            let (r, t) = best.expect("grid is not empty");
            (r, Some(t))
        }
    };
    let cca = fit_linear_cca(&t1, &t2, reg, reg, d)?;
    let per_component = total_with(&cca, &proj(test)?)?;
    Ok(TotalCorrelationReport {
        total: per_component.iter().sum(),
        per_component,
        upper_bound: d as f64,
        posthoc_reg: (reg, reg),
        validation_total,
    })
}

/// [`total_correlation_on`] over the dataset's train, validation and test splits.
pub fn total_correlation_protocol(
    model: &dyn Projector,
    data: &ViewPairDataset,
    d: usize,
    reg_grid: &[f64],
) -> Result<TotalCorrelationReport> {
    let train = data.split_views(Split::Train);
    let test = data.split_views(Split::Test);
    if test.0.cols() < 2 {
        return Err(Error::invalid("test split needs at least 2 samples"));
    }
    let val = (!data.splits.val.is_empty()).then(|| data.split_views(Split::Val));
    total_correlation_on(
        model,
        (&train.0, &train.1),
        val.as_ref().map(|(a, b)| (a, b)),
        (&test.0, &test.1),
        d,
        reg_grid,
    )
}

/// Linear CCA fit directly on the raw views, scored like a trained model.
pub fn linear_baseline_protocol(data: &ViewPairDataset, d: usize, reg_grid: &[f64]) -> Result<TotalCorrelationReport> {
    let width = data.view1.rows().min(data.view2.rows());
    if width < d {
        return Err(Error::dim(format!("inputs have {width} dimensions, protocol needs d = {d}")));
    }
    total_correlation_protocol(&RawInputs(width), data, d, reg_grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "1to2")]
    OneToTwo,
    #[serde(rename = "2to1")]
    TwoToOne,
}

impl Direction {
    /// Views of the queries and of the targets.
    pub fn views(self) -> (View, View) {
        match self {
            Direction::OneToTwo => (View::One, View::Two),
            Direction::TwoToOne => (View::Two, View::One),
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1to2" => Ok(Direction::OneToTwo),
            "2to1" => Ok(Direction::TwoToOne),
            _ => Err(Error::invalid(format!("direction must be 1to2 or 2to1, got {s:?}"))),
        }
    }
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::OneToTwo => "1to2",
            Direction::TwoToOne => "2to1",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub direction: Direction,
    pub k_values: Vec<usize>,
    pub recalls: Vec<f64>,
}

/// 0-based rank of the true match for every query: the number of targets
/// scoring higher, plus equal-scoring targets with a lower index.
pub fn match_ranks(scores: &Matrix) -> Vec<usize> {
    (0..scores.rows())
        .map(|i| {
            let sii = scores[(i, i)];
            (0..scores.cols())
                .filter(|&j| {
                    let s = scores[(i, j)];
                    s > sii || (s == sii && j < i)
                })
                .count()
        })
        .collect()
}

/// Recall@k for already projected queries (column `i` matches target column `i`).
pub fn recall_from_projections(
    queries: &Matrix,
    targets: &Matrix,
    ks: &[usize],
    direction: Direction,
) -> Result<RecallReport> {
    let n = queries.cols();
    if n == 0 || targets.cols() == 0 {
        return Err(Error::Empty("query or target set".into()));
    }
    if targets.cols() != n {
        return Err(Error::dim(format!(
            "{n} queries but {} targets; pairs must align",
            targets.cols()
        )));
    }
    let mut k_values = ks.to_vec();
    k_values.sort_unstable();
    k_values.dedup();
    if k_values.first() == Some(&0) {
        return Err(Error::invalid("k must be at least 1"));
    }
    let ranks = match_ranks(&cosine_score_matrix(queries, targets)?);
    let recalls = k_values
        .iter()
        .map(|&k| ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64)
        .collect();
    Ok(RecallReport {
        direction,
        k_values,
        recalls,
    })
}

/// Recall@k of paired query/target sets through a model.
pub fn recall_at_k(
    model: &dyn Projector,
    queries: &Matrix,
    targets: &Matrix,
    ks: &[usize],
    direction: Direction,
) -> Result<RecallReport> {
    let (qv, tv) = direction.views();
    let pq = model.project(queries, qv)?;
    let pt = model.project(targets, tv)?;
    recall_from_projections(&pq, &pt, ks, direction)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// `component,correlation` rows followed by a `total` row.
pub fn write_total_correlation_csv(path: &Path, report: &TotalCorrelationReport) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "component,correlation")?;
    for (k, c) in report.per_component.iter().enumerate() {
        writeln!(w, "{},{c:?}", k + 1)?;
    }
    writeln!(w, "total,{:?}", report.total)?;
    w.flush()?;
    Ok(())
}

/// `direction,k,recall` rows.
pub fn write_recall_csv(path: &Path, reports: &[RecallReport]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "direction,k,recall")?;
    for r in reports {
        for (k, v) in r.k_values.iter().zip(&r.recalls) {
            writeln!(w, "{},{k},{v:?}", r.direction)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = crate::rng::stream(seed, 13);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn linear_baseline_recovers_planted_correlations() {
        use crate::data::{make_splits, synth_correlated, Nonlinearity, SplitSpec};
        let ds = synth_correlated(6000, 2, (5, 3), &[0.9, 0.5], Nonlinearity::None, 3).unwrap();
        let ds = make_splits(ds, SplitSpec::Counts(4000, 1000, 1000), 4).unwrap();
        let r = linear_baseline_protocol(&ds, 2, &LINEAR_BASELINE_GRID).unwrap();
        assert!((r.per_component[0] - 0.9).abs() < 0.05 && (r.per_component[1] - 0.5).abs() < 0.05, "{r:?}");
        assert!(r.validation_total.is_some());
        assert!(linear_baseline_protocol(&ds, 4, &LINEAR_BASELINE_GRID).is_err());
    }

    #[test]
    fn duplicated_views_reach_the_bound() {
        let x = gaussian(3, 400, 1);
        let r = total_correlation_on(&IdentityProjector(3), (&x, &x), None, (&x, &x), 3, &DEFAULT_POSTHOC_GRID)
            .unwrap();
        assert!((r.total - 3.0).abs() < 1e-4);
        assert_eq!(r.posthoc_reg, (1e-6, 1e-6));
        assert!(r.total <= r.upper_bound + 1e-6);
    }

    #[test]
    fn independent_views_score_low() {
        for seed in 0..5 {
            let (a, b) = (gaussian(3, 300, 10 + seed), gaussian(3, 300, 20 + seed));
            let (c, e) = (gaussian(3, 300, 30 + seed), gaussian(3, 300, 40 + seed));
            let r = total_correlation_on(&IdentityProjector(3), (&a, &b), None, (&c, &e), 3, &[1e-6]).unwrap();
            assert!(r.total < 0.3, "{}", r.total);
        }
    }

    #[test]
    fn validation_picks_regularizer() {
        let x = gaussian(3, 100, 2);
        let y = x.add(&gaussian(3, 100, 3));
        let r = total_correlation_on(&IdentityProjector(3), (&x, &y), Some((&x, &y)), (&x, &y), 2, &[1e-6, 1e3])
            .unwrap();
        assert!(r.validation_total.is_some());
        assert!(total_correlation_on(&IdentityProjector(2), (&x, &y), None, (&x, &y), 3, &[1e-6]).is_err());
    }

    #[test]
    fn perfect_and_exhaustive_recall() {
        let p = gaussian(4, 30, 4);
        let r = recall_from_projections(&p, &p, &[1, 30], Direction::OneToTwo).unwrap();
        assert_eq!(r.recalls, vec![1.0, 1.0]);
        let q = gaussian(4, 30, 5);
        let r = recall_from_projections(&p, &q, &[5, 1, 30], Direction::TwoToOne).unwrap();
        assert_eq!(r.k_values, vec![1, 5, 30]);
        assert_eq!(r.recalls[2], 1.0);
        assert!(r.recalls.windows(2).all(|w| w[0] <= w[1]));
        assert!(recall_from_projections(&Matrix::zeros(4, 0), &Matrix::zeros(4, 0), &[1], Direction::OneToTwo).is_err());
    }

    #[test]
    fn direction_strings() {
        assert_eq!("1to2".parse::<Direction>().unwrap(), Direction::OneToTwo);
        assert_eq!(Direction::TwoToOne.to_string(), "2to1");
        assert!("3to1".parse::<Direction>().is_err());
        assert_eq!(serde_json::to_string(&Direction::OneToTwo).unwrap(), "\"1to2\"");
    }
}
