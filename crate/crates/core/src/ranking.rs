//! Ranking CCA with dynamically-scaled feature extractors.
//!
//! Each mini-batch is projected with CCA matrices recomputed from running
//! covariance statistics, scored with cosine similarity and trained with a
//! symmetric pairwise hinge loss. The projection matrices and the running
//! mean are constants of each step; gradients reach the networks through
//! `P = Aᵀ(F − m)`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Split, ViewPairDataset};
use crate::dcca::objective::{estimate_covariances, CcaSolution, CovarianceEstimates};
use crate::dcca::train::{enter_phase, epoch_batches, numerical, view_seed, EpochRecord, Observer, TrainingConfig};
use crate::dsl::DslNetwork;
use crate::error::{Error, Result};
use crate::eval::{recall_from_projections, Direction, Projector, RecallReport};
use crate::linalg::Matrix;
use crate::linear_cca::View;
use crate::nn::{Mode, Rmsprop};

/// Exponentially averaged covariance statistics of the two feature views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningCcaState {
    /// Unregularized `F̄1F̄1ᵀ/(N−1)`.
    pub sigma11: Matrix,
    pub sigma12: Matrix,
    pub sigma22: Matrix,
    pub mean1: Vec<f64>,
    pub mean2: Vec<f64>,
    /// Weight of the previous statistics in each update.
    pub alpha: f64,
    pub initialized: bool,
}

impl RunningCcaState {
    pub fn new(dim1: usize, dim2: usize, alpha: f64) -> Self {
        RunningCcaState {
            sigma11: Matrix::zeros(dim1, dim1),
            sigma12: Matrix::zeros(dim1, dim2),
            sigma22: Matrix::zeros(dim2, dim2),
            mean1: vec![0.0; dim1],
            mean2: vec![0.0; dim2],
            alpha,
            initialized: false,
        }
    }

    /// `stat ← α·stat + (1−α)·batch`; the first batch is copied.
    pub fn update(&mut self, f1: &Matrix, f2: &Matrix) -> Result<()> {
        let (cov, centered) = estimate_covariances(f1, f2, 0.0, 0.0)?;
        if self.sigma11.shape() != cov.sigma11.shape() || self.sigma22.shape() != cov.sigma22.shape() {
            return Err(Error::dim("feature dimensions do not match the running state"));
        }
        if !self.initialized {
            self.sigma11 = cov.sigma11;
            self.sigma12 = cov.sigma12;
            self.sigma22 = cov.sigma22;
            self.mean1 = centered.mean1;
            self.mean2 = centered.mean2;
            self.initialized = true;
            return Ok(());
        }
        let a = self.alpha;
        let mix = |old: &Matrix, new: &Matrix| old.scale(a).add(&new.scale(1.0 - a));
        self.sigma11 = mix(&self.sigma11, &cov.sigma11).symmetrize();
        self.sigma12 = mix(&self.sigma12, &cov.sigma12);
        self.sigma22 = mix(&self.sigma22, &cov.sigma22).symmetrize();
        let mixv = |old: &[f64], new: &[f64]| -> Vec<f64> {
            old.iter().zip(new).map(|(o, n)| a * o + (1.0 - a) * n).collect()
        };
        self.mean1 = mixv(&self.mean1, &centered.mean1);
        self.mean2 = mixv(&self.mean2, &centered.mean2);
        Ok(())
    }

    /// Regularized covariance estimates from the running statistics.
    pub fn covariances(&self, r1: f64, r2: f64) -> CovarianceEstimates {
        CovarianceEstimates {
            sigma11: self.sigma11.add_scaled_identity(r1),
            sigma12: self.sigma12.clone(),
            sigma22: self.sigma22.add_scaled_identity(r2),
            r1,
            r2,
            n: 0,
        }
    }

    pub fn projections(&self, r1: f64, r2: f64, d: usize) -> Result<(Matrix, Matrix)> {
        if !self.initialized {
            return Err(Error::invalid("running CCA statistics are not initialized"));
        }
        Ok(CcaSolution::from_covariances(&self.covariances(r1, r2), d)?.projections())
    }
}

/// What the backward pass of the CCA layer needs.
#[derive(Debug, Clone)]
pub struct CcaLayerTape {
    pub a1: Matrix,
    pub a2: Matrix,
}

impl CcaLayerTape {
    /// `dF = A·dP` with `A` and the mean held fixed.
    pub fn backward(&self, dp1: &Matrix, dp2: &Matrix) -> (Matrix, Matrix) {
        (self.a1.matmul(dp1), self.a2.matmul(dp2))
    }
}

/// Projects a batch through the CCA layer. In train mode the running
/// statistics are updated with the batch first; in eval mode they are used as is.
#[allow(clippy::too_many_arguments)]
pub fn cca_layer_forward(
    state: &mut RunningCcaState,
    f1: &Matrix,
    f2: &Matrix,
    r1: f64,
    r2: f64,
    d: usize,
    mode: Mode,
) -> Result<(Matrix, Matrix, CcaLayerTape)> {
    match mode {
        Mode::Train => {
            if f1.cols() <= d {
                return Err(Error::invalid(format!(
                    "batch of {} samples must exceed d = {d}",
                    f1.cols()
                )));
            }
            state.update(f1, f2)?;
        }
        Mode::Eval => {
            if !state.initialized {
                return Err(Error::invalid("running CCA statistics are not initialized"));
            }
        }
    }
    let (a1, a2) = state.projections(r1, r2, d)?;
    let p1 = a1.t_matmul(&f1.sub_row_vector(&state.mean1));
    let p2 = a2.t_matmul(&f2.sub_row_vector(&state.mean2));
    Ok((p1, p2, CcaLayerTape { a1, a2 }))
}

fn column_norms(p: &Matrix) -> Vec<f64> {
    (0..p.cols())
        .map(|j| p.col(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

fn normalized(p: &Matrix, norms: &[f64]) -> Matrix {
    let mut out = p.clone();
    for (j, &n) in norms.iter().enumerate() {
        let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
        out.col_mut(j).iter_mut().for_each(|v| *v *= inv);
    }
    out
}

/// `N×M` cosine similarities between the columns of `p1` and `p2`. Pairs
/// involving a zero column score 0.
pub fn cosine_score_matrix(p1: &Matrix, p2: &Matrix) -> Result<Matrix> {
    if p1.rows() != p2.rows() {
        return Err(Error::dim(format!(
            "projections have {} and {} rows",
            p1.rows(),
            p2.rows()
        )));
    }
    let n1 = column_norms(p1);
    let n2 = column_norms(p2);
    let zeros = n1.iter().chain(&n2).filter(|&&n| n == 0.0).count();
    if zeros > 0 {
        log::warn!("{zeros} zero-norm projection columns scored as 0");
    }
    let s = normalized(p1, &n1).t_matmul(&normalized(p2, &n2));
    Ok(s.map(|v| v.clamp(-1.0, 1.0)))
}

/// Gradients of a loss with respect to `p1` and `p2` given its gradient `ds`
/// with respect to `cosine_score_matrix(p1, p2)`.
pub fn cosine_score_backward(p1: &Matrix, p2: &Matrix, ds: &Matrix) -> (Matrix, Matrix) {
    let n1 = column_norms(p1);
    let n2 = column_norms(p2);
    let u1 = normalized(p1, &n1);
    let u2 = normalized(p2, &n2);
    let project_out = |u: &Matrix, g: Matrix, norms: &[f64]| {
        let mut g = g;
        for (j, &n) in norms.iter().enumerate() {
            if n == 0.0 {
                g.col_mut(j).iter_mut().for_each(|v| *v = 0.0);
                continue;
            }
            let uj = u.col(j);
            let dot: f64 = uj.iter().zip(g.col(j)).map(|(a, b)| a * b).sum();
            for (gv, &uv) in g.col_mut(j).iter_mut().zip(uj) {
                *gv = (*gv - dot * uv) / n;
            }
        }
        g
    };
    let g1 = u2.matmul_t(ds);
    let g2 = u1.matmul(ds);
    (project_out(&u1, g1, &n1), project_out(&u2, g2, &n2))
}

/// Symmetric pairwise hinge loss over a square score matrix whose diagonal
/// holds the matched pairs:
/// `Σᵢ Σ_{j≠i} max(0, m − Sᵢᵢ + Sᵢⱼ) + max(0, m − Sᵢᵢ + Sⱼᵢ)`.
/// The returned subgradient is 0 at the hinge kinks.
pub fn pairwise_ranking_loss(s: &Matrix, margin: f64) -> Result<(f64, Matrix)> {
    let n = s.rows();
    if s.cols() != n {
        return Err(Error::dim(format!("score matrix is {}x{}, expected square", n, s.cols())));
    }
    if !(margin >= 0.0) {
        return Err(Error::invalid("margin must be non-negative"));
    }
    let mut loss = 0.0;
    let mut ds = Matrix::zeros(n, n);
    for i in 0..n {
        let sii = s[(i, i)];
        for j in 0..n {
            if j == i {
                continue;
            }
            let u = margin - sii + s[(i, j)];
            if u > 0.0 {
                loss += u;
                ds[(i, i)] -= 1.0;
                ds[(i, j)] += 1.0;
            }
            let u = margin - sii + s[(j, i)];
            if u > 0.0 {
                loss += u;
                ds[(i, i)] -= 1.0;
                ds[(j, i)] += 1.0;
            }
        }
    }
    Ok((loss, ds))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingConfig {
    pub training: TrainingConfig,
    /// Running-average coefficient of the CCA layer.
    pub alpha: f64,
    pub margin: f64,
}

impl Default for RankingConfig {
    fn default() -> Self {
        RankingConfig {
            training: TrainingConfig {
                batch_size: 1024,
                ..TrainingConfig::default()
            },
            alpha: 0.95,
            margin: 0.6,
        }
    }
}

impl RankingConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.training.violations();
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            v.push(format!("alpha {} must lie in (0, 1)", self.alpha));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            v.push(format!("margin {} must be non-negative", self.margin));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingModel {
    pub net1: DslNetwork,
    pub net2: DslNetwork,
    pub cca_state: RunningCcaState,
    /// Projections frozen from `cca_state` at the selected epoch.
    pub a1: Matrix,
    pub a2: Matrix,
    pub margin: f64,
    pub config: RankingConfig,
    pub best_epoch: usize,
    pub best_val_recall: f64,
    pub history: Vec<EpochRecord>,
}

impl RankingModel {
    pub fn network(&self, view: View) -> &DslNetwork {
        match view {
            View::One => &self.net1,
            View::Two => &self.net2,
        }
    }
}

/// Eval-mode projection with the frozen statistics.
pub fn project_ranking(model: &RankingModel, x: &Matrix, view: View) -> Result<Matrix> {
    let f = model.network(view).infer(x)?;
    let (a, mean) = match view {
        View::One => (&model.a1, &model.cca_state.mean1),
        View::Two => (&model.a2, &model.cca_state.mean2),
    };
    Ok(a.t_matmul(&f.sub_row_vector(mean)))
}

/// Mean of both directions' validation recall at each cutoff.
fn mean_recalls(
    net1: &DslNetwork,
    net2: &DslNetwork,
    state: &RunningCcaState,
    cfg: &TrainingConfig,
    x1: &Matrix,
    x2: &Matrix,
    ks: &[usize],
) -> Result<Vec<f64>> {
    let (a1, a2) = state.projections(cfg.r1, cfg.r2, cfg.d)?;
    let p1 = a1.t_matmul(&net1.infer(x1)?.sub_row_vector(&state.mean1));
    let p2 = a2.t_matmul(&net2.infer(x2)?.sub_row_vector(&state.mean2));
    let r12 = recall_from_projections(&p1, &p2, ks, Direction::OneToTwo)?;
    let r21 = recall_from_projections(&p2, &p1, ks, Direction::TwoToOne)?;
    let at = |r: &RecallReport, k: usize| r.recalls[r.k_values.binary_search(&k).expect("cutoff was requested")];
    Ok(ks.iter().map(|&k| 0.5 * (at(&r12, k) + at(&r21, k))).collect())
}

/// The epoch picked for one cutoff `k` by mean validation recall@k.
#[derive(Debug, Clone)]
pub struct KSelection {
    pub k: usize,
    pub epoch: usize,
    pub val_recall: f64,
    pub model: RankingModel,
}

pub fn train_ds_ranking(config: &RankingConfig, data: &ViewPairDataset) -> Result<RankingModel> {
    train_ds_ranking_with(config, data, &mut |_, _, _| {})
}

pub fn train_ds_ranking_with(
    config: &RankingConfig,
    data: &ViewPairDataset,
    observer: &mut Observer<'_>,
) -> Result<RankingModel> {
    Ok(train_ds_ranking_per_k(config, data, &[], observer)?.0)
}

/// Like [`train_ds_ranking_with`], additionally keeping the best epoch for
/// every cutoff in `k_values`.
pub fn train_ds_ranking_per_k(
    config: &RankingConfig,
    data: &ViewPairDataset,
    k_values: &[usize],
    observer: &mut Observer<'_>,
) -> Result<(RankingModel, Vec<KSelection>)> {
    config.validate()?;
    if k_values.contains(&0) {
        return Err(Error::invalid("recall cutoffs must be positive"));
    }
    let cfg = &config.training;
    let (x1, x2) = data.split_views(Split::Train);
    if x1.cols() <= cfg.d {
        return Err(Error::invalid(format!(
            "training split has {} samples, needs more than d = {}",
            x1.cols(),
            cfg.d
        )));
    }
    let (v1, v2) = if data.splits.val.is_empty() {
        (x1.clone(), x2.clone())
    } else {
        data.split_views(Split::Val)
    };
    let (mut net1, mut net2) = (
        DslNetwork::new(&cfg.network_spec(View::One, x1.rows()), view_seed(cfg.seed, View::One))?,
        DslNetwork::new(&cfg.network_spec(View::Two, x2.rows()), view_seed(cfg.seed, View::Two))?,
    );
    let k = cfg.feature_dim();
    let mut state = RunningCcaState::new(k, k, config.alpha);
    let mut opt = Rmsprop::new(cfg.lr, cfg.weight_decay);
    let mut shuffle = crate::rng::stream(cfg.seed, 100);
    let mut best: Option<(f64, usize, DslNetwork, DslNetwork, RunningCcaState)> = None;
    let mut best_k: Vec<Option<(f64, usize, f64, DslNetwork, DslNetwork, RunningCcaState)>> = vec![None; k_values.len()];
    let ks: Vec<usize> = std::iter::once(1).chain(k_values.iter().copied()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let phase = enter_phase(epoch, cfg.warmup_epochs, [&mut net1, &mut net2]);
        let batches = epoch_batches(x1.cols(), cfg.batch_size, cfg.d, &mut shuffle);
        let mut loss_sum = 0.0;
        for (b, idx) in batches.iter().enumerate() {
            let abort = numerical(epoch, b + 1);
            let (b1, b2) = (x1.select_columns(idx), x2.select_columns(idx));
            let (f1, t1) = net1.forward(&b1, Mode::Train).map_err(&abort)?;
            let (f2, t2) = net2.forward(&b2, Mode::Train).map_err(&abort)?;
            let (p1, p2, tape) =
                cca_layer_forward(&mut state, &f1, &f2, cfg.r1, cfg.r2, cfg.d, Mode::Train).map_err(&abort)?;
            let s = cosine_score_matrix(&p1, &p2)?;
            let (loss, ds) = pairwise_ranking_loss(&s, config.margin)?;
            if !loss.is_finite() {
                return Err(abort(Error::NonFinite("ranking loss".into())));
            }
            let (dp1, dp2) = cosine_score_backward(&p1, &p2, &ds);
            let (df1, df2) = tape.backward(&dp1, &dp2);
            let g1 = net1.backward(&t1, &df1).map_err(&abort)?;
            let g2 = net2.backward(&t2, &df2).map_err(&abort)?;
            net1.apply_gradients(&g1, "net1", &mut opt).map_err(&abort)?;
            net2.apply_gradients(&g2, "net2", &mut opt).map_err(&abort)?;
            loss_sum += loss / idx.len() as f64;
        }
        let recalls = mean_recalls(&net1, &net2, &state, cfg, &v1, &v2, &ks).map_err(numerical(epoch, 0))?;
        let recall = recalls[0];
        let record = EpochRecord {
            epoch,
            phase,
            train_loss: loss_sum / batches.len().max(1) as f64,
            val_loss: None,
            val_recall: Some(recall),
            degenerate_batches: 0,
        };
        log::info!(
            "epoch {epoch} ({phase:?}): train {:.5} val R@1 {recall:.4}",
            record.train_loss
        );
        if best.as_ref().map_or(true, |(r, ..)| recall > *r) {
            best = Some((recall, epoch, net1.clone(), net2.clone(), state.clone()));
        }
        for (slot, &r) in best_k.iter_mut().zip(&recalls[1..]) {
            if slot.as_ref().map_or(true, |(b, ..)| r > *b) {
                *slot = Some((r, epoch, recall, net1.clone(), net2.clone(), state.clone()));
            }
        }
        observer(&record, &net1, &net2);
        history.push(record);
    }

    let (best_val_recall, best_epoch, net1, net2, cca_state) =
        best.unwrap_or((0.0, 0, net1, net2, state));
    if !cca_state.initialized {
        return Err(Error::invalid("no training batch was processed"));
    }
    let mut selections = Vec::with_capacity(k_values.len());
    for (&k, slot) in k_values.iter().zip(best_k) {
        let (val_recall, epoch, r1, net1, net2, cca_state) = slot.expect("at least one epoch ran");
        let (a1, a2) = cca_state.projections(cfg.r1, cfg.r2, cfg.d)?;
        let model = RankingModel {
            net1,
            net2,
            cca_state,
            a1,
            a2,
            margin: config.margin,
            config: config.clone(),
            best_epoch: epoch,
            best_val_recall: r1,
            history: Vec::new(),
        };
        selections.push(KSelection {
            k,
            epoch,
            val_recall,
            model,
        });
    }
    let (a1, a2) = cca_state.projections(cfg.r1, cfg.r2, cfg.d)?;
    let model = RankingModel {
        net1,
        net2,
        cca_state,
        a1,
        a2,
        margin: config.margin,
        config: config.clone(),
        best_epoch,
        best_val_recall,
        history,
    };
    Ok((model, selections))
}

/// Indices of the `k` highest scores, descending; ties go to the lower index.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Top-`k` targets for one query column, with their cosine scores.
pub fn retrieve_scored(
    model: &dyn Projector,
    query: &Matrix,
    targets: &Matrix,
    direction: Direction,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if query.cols() != 1 {
        return Err(Error::dim(format!("query must be one column, got {}", query.cols())));
    }
    let hits = retrieve_batch(model, query, targets, direction, k)?;
    Ok(hits.into_iter().next().expect("one query"))
}

pub fn retrieve_topk(
    model: &dyn Projector,
    query: &Matrix,
    targets: &Matrix,
    direction: Direction,
    k: usize,
) -> Result<Vec<usize>> {
    Ok(retrieve_scored(model, query, targets, direction, k)?
        .into_iter()
        .map(|(i, _)| i)
        .collect())
}

/// Top-`k` for every query column. Queries and targets are projected
/// independently.
pub fn retrieve_batch(
    model: &dyn Projector,
    queries: &Matrix,
    targets: &Matrix,
    direction: Direction,
    k: usize,
) -> Result<Vec<Vec<(usize, f64)>>> {
    if targets.cols() == 0 {
        return Err(Error::Empty("target set".into()));
    }
    if k == 0 || k > targets.cols() {
        return Err(Error::invalid(format!(
            "k = {k} must be in 1..={}",
            targets.cols()
        )));
    }
    let (qv, tv) = direction.views();
    let pq = model.project(queries, qv)?;
    let pt = model.project(targets, tv)?;
    let s = cosine_score_matrix(&pq, &pt)?;
    Ok((0..s.rows())
        .map(|i| {
            let row = s.row(i);
            topk_indices(&row, k).into_iter().map(|j| (j, row[j])).collect()
        })
        .collect())
}

/// Writes `query_id,rank,target_id,score` rows; ranks start at 1.
pub fn write_retrieval_csv(path: &Path, hits: &[Vec<(usize, f64)>]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "query_id,rank,target_id,score")?;
    for (q, row) in hits.iter().enumerate() {
        for (r, (t, s)) in row.iter().enumerate() {
            writeln!(w, "{q},{},{t},{s:?}", r + 1)?;
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
        let mut rng = crate::rng::stream(seed, 9);
        Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn cosine_basics() {
        let p = gaussian(4, 5, 1);
        let s = cosine_score_matrix(&p, &p).unwrap();
        for i in 0..5 {
            assert!((s[(i, i)] - 1.0).abs() < 1e-12);
        }
        let a = Matrix::from_rows(&[&[1.0], &[0.0]]);
        let b = Matrix::from_rows(&[&[0.0, 0.0], &[3.0, 0.0]]);
        let s = cosine_score_matrix(&a, &b).unwrap();
        assert_eq!(s.row(0), vec![0.0, 0.0]);
        assert!(cosine_score_matrix(&a, &gaussian(3, 2, 1)).is_err());
    }

    #[test]
    fn ranking_loss_edge_cases() {
        let n = 4;
        let s = Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { -1.0 });
        assert_eq!(pairwise_ranking_loss(&s, 0.5).unwrap().0, 0.0);
        let s = Matrix::filled(n, n, 0.3);
        let (loss, _) = pairwise_ranking_loss(&s, 0.5).unwrap();
        assert!((loss - 2.0 * (n * (n - 1)) as f64 * 0.5).abs() < 1e-12);
        assert!(pairwise_ranking_loss(&gaussian(2, 3, 0), 0.5).is_err());
    }

    #[test]
    fn running_state_fixed_point_and_first_copy() {
        let f1 = gaussian(3, 20, 2);
        let f2 = gaussian(3, 20, 3);
        let mut st = RunningCcaState::new(3, 3, 0.9);
        st.update(&f1, &f2).unwrap();
        let (cov, c) = estimate_covariances(&f1, &f2, 0.0, 0.0).unwrap();
        assert_eq!(st.sigma11, cov.sigma11);
        assert_eq!(st.mean1, c.mean1);
        st.update(&f1, &f2).unwrap();
        assert!(st.sigma11.max_abs_diff(&cov.sigma11) < 1e-15);
        assert!(st.sigma12.max_abs_diff(&cov.sigma12) < 1e-15);
    }

    #[test]
    fn single_batch_matches_batch_cca() {
        let f1 = gaussian(3, 30, 4);
        let f2 = f1.add(&gaussian(3, 30, 5).scale(0.5));
        let mut st = RunningCcaState::new(3, 3, 1e-9);
        let (p1, _, tape) = cca_layer_forward(&mut st, &f1, &f2, 1e-3, 1e-3, 2, Mode::Train).unwrap();
        let cache = crate::dcca::LossCache::new(&f1, &f2, 1e-3, 1e-3, 2).unwrap();
        let (a1, _) = crate::dcca::compute_projections(&cache);
        assert!(tape.a1.max_abs_diff(&a1) < 1e-12);
        let expect = a1.t_matmul(&cache.centered.f1);
        assert!(p1.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn eval_needs_statistics() {
        let mut st = RunningCcaState::new(2, 2, 0.9);
        let f = gaussian(2, 5, 6);
        assert!(cca_layer_forward(&mut st, &f, &f, 1e-3, 1e-3, 1, Mode::Eval).is_err());
    }

    #[test]
    fn topk_breaks_ties_by_index() {
        assert_eq!(topk_indices(&[0.5, 0.9, 0.5, 0.9], 4), vec![1, 3, 0, 2]);
        assert_eq!(topk_indices(&[0.1, 0.2], 1), vec![1]);
    }

    #[test]
    fn cosine_backward_matches_finite_differences() {
        let p1 = gaussian(3, 4, 7);
        let p2 = gaussian(3, 4, 8);
        let w = gaussian(4, 4, 9);
        let f = |a: &Matrix, b: &Matrix| cosine_score_matrix(a, b).unwrap().hadamard(&w).data().iter().sum::<f64>();
        let (g1, g2) = cosine_score_backward(&p1, &p2, &w);
        let h = 1e-6;
        for (p, g, first) in [(&p1, &g1, true), (&p2, &g2, false)] {
            for idx in 0..p.data().len() {
                let mut plus = p.clone();
                plus.data_mut()[idx] += h;
                let mut minus = p.clone();
                minus.data_mut()[idx] -= h;
                let fd = if first {
                    (f(&plus, &p2) - f(&minus, &p2)) / (2.0 * h)
                } else {
                    (f(&p1, &plus) - f(&p1, &minus)) / (2.0 * h)
                };
                assert!((fd - g.data()[idx]).abs() < 1e-7, "{fd} vs {}", g.data()[idx]);
            }
        }
    }
}
