//! Two-phase DS-DCCA training: warm-up with conventional parameters only,
//! then joint training with the scaling networks.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::objective::{dcca_loss, dcca_loss_grad, LossCache};
use crate::data::{Split, ViewPairDataset};
use crate::dsl::{Conditioning, DslNetwork, DslNetworkSpec, DslVariant, Phase};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::linear_cca::View;
use crate::nn::{Mode, Rmsprop};

/// Network layout shared by both views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    /// Backbone widths of view 1 (each dense → BN → ReLU).
    pub hidden1: Vec<usize>,
    pub hidden2: Vec<usize>,
    /// Output width of the head; defaults to `d`.
    pub feature_dim: Option<usize>,
    pub scaler_hidden: Vec<usize>,
    pub variant: DslVariant,
    pub conditioning: Conditioning,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            hidden1: vec![1024, 1024, 1024],
            hidden2: vec![1024, 1024, 1024],
            feature_dim: None,
            scaler_hidden: vec![128],
            variant: DslVariant::Dynamic,
            conditioning: Conditioning::ZOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub d: usize,
    pub epochs: usize,
    /// Epochs trained before the scaling networks are switched on.
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub r1: f64,
    pub r2: f64,
    pub seed: u64,
    pub arch: ArchitectureConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            d: 50,
            epochs: 100,
            warmup_epochs: 50,
            batch_size: 750,
            lr: 1e-3,
            weight_decay: 1e-5,
            r1: 1e-4,
            r2: 1e-4,
            seed: 0,
            arch: ArchitectureConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim.unwrap_or(self.d)
    }

    /// Every violated constraint, one message each.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.d == 0 {
            v.push("d must be positive".to_string());
        }
        if self.feature_dim() < self.d {
            v.push(format!("feature_dim {} is smaller than d = {}", self.feature_dim(), self.d));
        }
        if self.warmup_epochs > self.epochs {
            v.push(format!(
                "warmup_epochs {} exceeds epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if self.batch_size <= self.d {
            v.push(format!("batch_size {} must exceed d = {}", self.batch_size, self.d));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push("lr must be positive".to_string());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push("weight_decay must be non-negative".to_string());
        }
        if !(self.r1 > 0.0 && self.r1.is_finite()) {
            v.push("r1 must be positive".to_string());
        }
        if !(self.r2 > 0.0 && self.r2.is_finite()) {
            v.push("r2 must be positive".to_string());
        }
        if self.arch.variant.uses_scaler() && self.arch.scaler_hidden.iter().any(|&w| w == 0) {
            v.push("scaler widths must be positive".to_string());
        }
        if self.arch.hidden1.iter().chain(&self.arch.hidden2).any(|&w| w == 0) {
            v.push("backbone widths must be positive".to_string());
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

    pub fn network_spec(&self, view: View, input_dim: usize) -> DslNetworkSpec {
        DslNetworkSpec {
            input_dim,
            hidden: match view {
                View::One => self.arch.hidden1.clone(),
                View::Two => self.arch.hidden2.clone(),
            },
            output_dim: self.feature_dim(),
            variant: self.arch.variant,
            conditioning: self.arch.conditioning,
            scaler_hidden: self.arch.scaler_hidden.clone(),
        }
    }

    /// Initial networks for both views. The view networks draw from
    /// different seeds derived from `self.seed`.
    pub fn init_networks(&self, n1: usize, n2: usize) -> Result<(DslNetwork, DslNetwork)> {
        Ok((
            DslNetwork::new(&self.network_spec(View::One, n1), view_seed(self.seed, View::One))?,
            DslNetwork::new(&self.network_spec(View::Two, n2), view_seed(self.seed, View::Two))?,
        ))
    }
}

pub(crate) fn view_seed(seed: u64, view: View) -> u64 {
    let k = match view {
        View::One => 1,
        View::Two => 2,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// Mean mini-batch loss.
    pub train_loss: f64,
    /// Full-set validation objective used for model selection.
    pub val_loss: Option<f64>,
    /// Mean recall@1 over both directions (ranking models).
    pub val_recall: Option<f64>,
    pub degenerate_batches: usize,
}

/// Called after every epoch with the record and the current networks.
pub type Observer<'a> = dyn FnMut(&EpochRecord, &DslNetwork, &DslNetwork) + 'a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsccaModel {
    pub net1: DslNetwork,
    pub net2: DslNetwork,
    /// `feature_dim × d`
    pub a1: Matrix,
    pub a2: Matrix,
    pub mean1: Vec<f64>,
    pub mean2: Vec<f64>,
    pub config: TrainingConfig,
    pub best_epoch: usize,
    /// Validation objective of the untrained networks.
    pub initial_val_loss: f64,
    /// Objective of the selected networks on the full training set.
    pub train_objective: f64,
    pub train_correlations: Vec<f64>,
    pub history: Vec<EpochRecord>,
}

impl DsccaModel {
    pub fn d(&self) -> usize {
        self.a1.cols()
    }

    pub fn network(&self, view: View) -> &DslNetwork {
        match view {
            View::One => &self.net1,
            View::Two => &self.net2,
        }
    }
}

/// Eval-mode features of one view.
pub fn features(model: &DsccaModel, x: &Matrix, view: View) -> Result<Matrix> {
    model.network(view).infer(x)
}

/// `Aⱼᵀ (fⱼ(x) − mⱼ)`, where `mⱼ` is the training feature mean.
pub fn project(model: &DsccaModel, x: &Matrix, view: View) -> Result<Matrix> {
    let f = features(model, x, view)?;
    let (a, mean) = match view {
        View::One => (&model.a1, &model.mean1),
        View::Two => (&model.a2, &model.mean2),
    };
    Ok(a.t_matmul(&f.sub_row_vector(mean)))
}

/// Shuffled mini-batches of `0..n`. A trailing batch with `min_size` or
/// fewer samples is dropped.
pub(crate) fn epoch_batches(
    n: usize,
    batch_size: usize,
    min_size: usize,
    rng: &mut impl rand::Rng,
) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size)
        .filter(|c| c.len() > min_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Wraps numerical failures as an abort that names the epoch and batch.
pub(crate) fn numerical(epoch: usize, batch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) | Error::Indefinite { .. } | Error::NoConvergence { .. } => {
            Error::NumericalAbort {
                epoch,
                batch,
                reason: e.to_string(),
            }
        }
        other => other,
    }
}

pub(crate) fn enter_phase(epoch: usize, warmup: usize, nets: [&mut DslNetwork; 2]) -> Phase {
    let phase = if epoch <= warmup { Phase::Warmup } else { Phase::Active };
    for net in nets {
        if net.phase() != phase {
            net.set_phase(phase);
        }
    }
    phase
}

fn require_samples(x: &Matrix, d: usize, what: &str) -> Result<()> {
    if x.cols() <= d {
        return Err(Error::invalid(format!(
            "{what} has {} samples, needs more than d = {d}",
            x.cols()
        )));
    }
    Ok(())
}

pub fn train_dsdcca(config: &TrainingConfig, data: &ViewPairDataset) -> Result<DsccaModel> {
    train_dsdcca_with(config, data, &mut |_, _, _| {})
}

pub fn train_dsdcca_with(
    config: &TrainingConfig,
    data: &ViewPairDataset,
    observer: &mut Observer<'_>,
) -> Result<DsccaModel> {
    config.validate()?;
    let (x1, x2) = data.split_views(Split::Train);
    require_samples(&x1, config.d, "training split")?;
    let (v1, v2) = if data.splits.val.is_empty() {
        (x1.clone(), x2.clone())
    } else {
        data.split_views(Split::Val)
    };
    require_samples(&v1, config.d, "validation split")?;
    let (r1, r2, d) = (config.r1, config.r2, config.d);

    let (mut net1, mut net2) = config.init_networks(x1.rows(), x2.rows())?;
    let mut opt = Rmsprop::new(config.lr, config.weight_decay);
    let mut shuffle = crate::rng::stream(config.seed, 100);
    let validate = |n1: &DslNetwork, n2: &DslNetwork, epoch: usize| -> Result<f64> {
        let f1 = n1.infer(&v1).map_err(numerical(epoch, 0))?;
        let f2 = n2.infer(&v2).map_err(numerical(epoch, 0))?;
        Ok(dcca_loss(&f1, &f2, r1, r2, d).map_err(numerical(epoch, 0))?.0)
    };

    let initial_val_loss = validate(&net1, &net2, 0)?;
    let mut best: Option<(f64, usize, DslNetwork, DslNetwork)> = None;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let phase = enter_phase(epoch, config.warmup_epochs, [&mut net1, &mut net2]);
        let batches = epoch_batches(x1.cols(), config.batch_size, d, &mut shuffle);
        let mut loss_sum = 0.0;
        let mut degenerate = 0;
        for (b, idx) in batches.iter().enumerate() {
            let abort = numerical(epoch, b + 1);
            let (b1, b2) = (x1.select_columns(idx), x2.select_columns(idx));
            let (f1, t1) = net1.forward(&b1, Mode::Train).map_err(&abort)?;
            let (f2, t2) = net2.forward(&b2, Mode::Train).map_err(&abort)?;
            let (loss, cache) = dcca_loss(&f1, &f2, r1, r2, d).map_err(&abort)?;
            if !loss.is_finite() {
                return Err(abort(Error::NonFinite("loss".into())));
            }
            let grad = dcca_loss_grad(&cache);
            if grad.degenerate {
                degenerate += 1;
            }
            let g1 = net1.backward(&t1, &grad.d_f1).map_err(&abort)?;
            let g2 = net2.backward(&t2, &grad.d_f2).map_err(&abort)?;
            net1.apply_gradients(&g1, "net1", &mut opt).map_err(&abort)?;
            net2.apply_gradients(&g2, "net2", &mut opt).map_err(&abort)?;
            loss_sum += loss;
        }
        if degenerate > 0 {
            log::warn!("epoch {epoch}: {degenerate} batches had repeated singular values");
        }
        let val_loss = validate(&net1, &net2, epoch)?;
        let record = EpochRecord {
            epoch,
            phase,
            train_loss: loss_sum / batches.len().max(1) as f64,
            val_loss: Some(val_loss),
            val_recall: None,
            degenerate_batches: degenerate,
        };
        log::info!(
            "epoch {epoch} ({phase:?}): train {:.5} val {val_loss:.5}",
            record.train_loss
        );
        if best.as_ref().map_or(true, |(v, ..)| val_loss < *v) {
            best = Some((val_loss, epoch, net1.clone(), net2.clone()));
        }
        observer(&record, &net1, &net2);
        history.push(record);
    }

    let (best_epoch, net1, net2) = match best {
        Some((_, e, n1, n2)) => (e, n1, n2),
        None => (0, net1, net2),
    };
    let f1 = net1.infer(&x1)?;
    let f2 = net2.infer(&x2)?;
    let cache = LossCache::new(&f1, &f2, r1, r2, d).map_err(numerical(best_epoch, 0))?;
    let (a1, a2) = cache.solution.projections();
    Ok(DsccaModel {
        a1,
        a2,
        train_objective: cache.loss(),
        train_correlations: cache.correlations().to_vec(),
        mean1: cache.centered.mean1,
        mean2: cache.centered.mean2,
        net1,
        net2,
        config: config.clone(),
        best_epoch,
        initial_val_loss,
        history,
    })
}
