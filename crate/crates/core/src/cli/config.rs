//! TOML experiment configuration.
//!
//! ```toml
//! name = "mnist_halves"
//! mode = "dsdcca"            # dcca | dsdcca | ranking | ds_ranking
//! ablation = "none"          # none | global_scale | scale_outputs | hypernet | no_warmup | wide2 | wide12
//!
//! [dataset]
//! kind = "mnist_halves"      # synthetic | mnist_halves | files
//! images = "testdata/mnist10k-images-idx3-ubyte.gz"
//! split_counts = [5000, 1000, 1000]
//! split_seed = 0
//!
//! [architecture]
//! hidden1 = [128, 128]
//! hidden2 = [128, 128]
//! scaler_hidden = [128]
//! conditioning = "z_only"    # z_only | x_only | z_and_x
//!
//! [training]
//! epochs = 60
//! warmup_epochs = 30
//! batch_size = 250
//!
//! [eval]
//! d = 10
//! reg_grid = [1e-6, 1e-4, 1e-2]    # post-hoc linear CCA on the learned features
//! k_values = [1, 5, 10]            # ranking modes
//! linear_baseline = false          # also fit linear CCA on the raw inputs
//! linear_reg_grid = [1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2]
//! ```
//!
//! Every key except `mode` and `[dataset]` has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    load_views, make_splits, read_idx_images, split_halves, synth_correlated, DataFormat, Nonlinearity, SplitSpec,
    ViewPairDataset,
};
use crate::dcca::train::{ArchitectureConfig, TrainingConfig};
use crate::dsl::{Conditioning, DslVariant};
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_POSTHOC_GRID, LINEAR_BASELINE_GRID};
use crate::ranking::RankingConfig;

/// Largest allowed mismatch between the parameters added by widening and
/// those of the scaling network.
pub const WIDE_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Dcca,
    Dsdcca,
    Ranking,
    DsRanking,
}

impl ModelMode {
    pub fn is_ranking(self) -> bool {
        matches!(self, ModelMode::Ranking | ModelMode::DsRanking)
    }

    pub fn is_dynamic(self) -> bool {
        matches!(self, ModelMode::Dsdcca | ModelMode::DsRanking)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelMode::Dcca => "dcca",
            ModelMode::Dsdcca => "dsdcca",
            ModelMode::Ranking => "ranking",
            ModelMode::DsRanking => "ds_ranking",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    GlobalScale,
    ScaleOutputs,
    Hypernet,
    NoWarmup,
    Wide2,
    Wide12,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Synthetic,
    MnistHalves,
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    // synthetic
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub latent_dim: usize,
    #[serde(default)]
    pub dims: Vec<usize>,
    #[serde(default)]
    pub correlations: Vec<f64>,
    #[serde(default = "default_nonlinearity")]
    pub nonlinearity: Nonlinearity,
    #[serde(default)]
    pub data_seed: u64,
    // mnist_halves
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    /// Use only the first `limit` images.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub limit: Option<usize>,
    // files
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view1: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view2: Option<PathBuf>,
    #[serde(default = "default_format")]
    pub format: DataFormat,
    // splits
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_counts: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_fractions: Option<[f64; 3]>,
    #[serde(default)]
    pub split_seed: u64,
}

fn default_n_samples() -> usize {
    1000
}

fn default_nonlinearity() -> Nonlinearity {
    Nonlinearity::None
}

fn default_format() -> DataFormat {
    DataFormat::Csv
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureSection {
    pub hidden1: Vec<usize>,
    pub hidden2: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_dim: Option<usize>,
    pub scaler_hidden: Vec<usize>,
    pub conditioning: Conditioning,
}

impl Default for ArchitectureSection {
    fn default() -> Self {
        let a = ArchitectureConfig::default();
        ArchitectureSection {
            hidden1: a.hidden1,
            hidden2: a.hidden2,
            feature_dim: None,
            scaler_hidden: a.scaler_hidden,
            conditioning: a.conditioning,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub r1: f64,
    pub r2: f64,
    /// Running-average coefficient of the ranking CCA layer.
    pub alpha: f64,
    /// Ranking loss margin.
    pub margin: f64,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainingConfig::default();
        let r = RankingConfig::default();
        TrainingSection {
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            r1: t.r1,
            r2: t.r2,
            alpha: r.alpha,
            margin: r.margin,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub d: usize,
    /// Regularizers of the post-hoc linear CCA.
    pub reg_grid: Vec<f64>,
    pub k_values: Vec<usize>,
    /// Also score linear CCA on the raw inputs (DCCA modes).
    pub linear_baseline: bool,
    pub linear_reg_grid: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            d: TrainingConfig::default().d,
            reg_grid: DEFAULT_POSTHOC_GRID.to_vec(),
            k_values: vec![1, 5, 10],
            linear_baseline: false,
            linear_reg_grid: LINEAR_BASELINE_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub mode: ModelMode,
    #[serde(default)]
    pub ablation: Ablation,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub architecture: ArchitectureSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_name() -> String {
    "experiment".to_string()
}

/// Training settings after applying the mode and ablation.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedTraining {
    Dcca(TrainingConfig),
    Ranking(RankingConfig),
}

impl ResolvedTraining {
    pub fn training(&self) -> &TrainingConfig {
        match self {
            ResolvedTraining::Dcca(t) => t,
            ResolvedTraining::Ranking(r) => &r.training,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.display())]))?;
        let mut cfg = Self::parse(&text)?;
        cfg.dataset.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Variant of the dynamically-scaled heads.
    pub fn variant(&self) -> DslVariant {
        match (self.mode.is_dynamic(), self.ablation) {
            (_, Ablation::Wide2 | Ablation::Wide12) => DslVariant::Conventional,
            (false, _) => DslVariant::Conventional,
            (true, Ablation::GlobalScale) => DslVariant::GlobalScale,
            (true, Ablation::ScaleOutputs) => DslVariant::ScaleOutputs,
            (true, Ablation::Hypernet) => DslVariant::Hypernet,
            (true, _) => DslVariant::Dynamic,
        }
    }

    /// Every violated constraint that can be checked without loading data.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.base_training().violations();
        let t = &self.training;
        if self.mode.is_ranking() {
            if !(t.alpha > 0.0 && t.alpha < 1.0) {
                v.push(format!("training.alpha {} must lie in (0, 1)", t.alpha));
            }
            if !(t.margin >= 0.0 && t.margin.is_finite()) {
                v.push(format!("training.margin {} must be non-negative", t.margin));
            }
        }
        if self.ablation != Ablation::None && !self.mode.is_dynamic() {
            v.push(format!(
                "ablation {:?} needs mode dsdcca or ds_ranking, got {}",
                self.ablation,
                self.mode.as_str()
            ));
        }
        if matches!(self.ablation, Ablation::Wide2 | Ablation::Wide12) {
            for (key, h) in [("hidden1", &self.architecture.hidden1), ("hidden2", &self.architecture.hidden2)] {
                if h.len() < 2 {
                    v.push(format!("architecture.{key} needs at least 2 layers to widen"));
                }
            }
        }
        if self.eval.reg_grid.is_empty() || self.eval.reg_grid.iter().any(|r| !(*r > 0.0)) {
            v.push("eval.reg_grid must hold positive values".to_string());
        }
        if self.eval.linear_reg_grid.is_empty() || self.eval.linear_reg_grid.iter().any(|r| !(*r > 0.0)) {
            v.push("eval.linear_reg_grid must hold positive values".to_string());
        }
        if self.eval.k_values.is_empty() || self.eval.k_values.contains(&0) {
            v.push("eval.k_values must hold positive values".to_string());
        }
        v.extend(self.dataset.violations());
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

    fn base_training(&self) -> TrainingConfig {
        let t = &self.training;
        let a = &self.architecture;
        TrainingConfig {
            d: self.eval.d,
            epochs: t.epochs,
            warmup_epochs: if self.ablation == Ablation::NoWarmup { 0 } else { t.warmup_epochs },
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            r1: t.r1,
            r2: t.r2,
            seed: t.seed,
            arch: ArchitectureConfig {
                hidden1: a.hidden1.clone(),
                hidden2: a.hidden2.clone(),
                feature_dim: a.feature_dim,
                scaler_hidden: a.scaler_hidden.clone(),
                variant: self.variant(),
                conditioning: a.conditioning,
            },
        }
    }

    /// Training settings for views of dimension `n1` and `n2`. The wide
    /// ablations grow the backbone here, which depends on the input sizes.
    pub fn resolve(&self, n1: usize, n2: usize) -> Result<ResolvedTraining> {
        self.validate()?;
        let mut t = self.base_training();
        if matches!(self.ablation, Ablation::Wide2 | Ablation::Wide12) {
            let layers: &[usize] = if self.ablation == Ablation::Wide2 { &[1] } else { &[0, 1] };
            let mut dyn_arch = t.arch.clone();
            dyn_arch.variant = DslVariant::Dynamic;
            for (view, n) in [(0, n1), (1, n2)] {
                let hidden = if view == 0 { &mut t.arch.hidden1 } else { &mut t.arch.hidden2 };
                let target = scaler_param_count(n, hidden, t.arch.feature_dim.unwrap_or(t.d), &dyn_arch);
                *hidden = widen(n, hidden, t.arch.feature_dim.unwrap_or(t.d), layers, target)?;
            }
        }
        Ok(if self.mode.is_ranking() {
            ResolvedTraining::Ranking(RankingConfig {
                training: t,
                alpha: self.training.alpha,
                margin: self.training.margin,
            })
        } else {
            ResolvedTraining::Dcca(t)
        })
    }

    pub fn load_dataset(&self) -> Result<ViewPairDataset> {
        self.dataset.load()
    }
}

fn dense_params(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Parameters of the scaling network a dynamic head would add to one view.
pub fn scaler_param_count(input_dim: usize, hidden: &[usize], out: usize, arch: &ArchitectureConfig) -> usize {
    let z = hidden.last().copied().unwrap_or(input_dim);
    let cond = match arch.conditioning {
        Conditioning::ZOnly => z,
        Conditioning::XOnly => input_dim,
        Conditioning::ZAndX => z + input_dim,
    };
    let mut sizes = vec![cond];
    sizes.extend(&arch.scaler_hidden);
    sizes.push(z * out + out);
    dense_params(&sizes)
}

/// Smallest common width for `layers` that adds at least `target` parameters
/// to the backbone, checked against [`WIDE_TOLERANCE`].
pub fn widen(input_dim: usize, hidden: &[usize], out: usize, layers: &[usize], target: usize) -> Result<Vec<usize>> {
    let count = |h: &[usize]| {
        let mut sizes = vec![input_dim];
        sizes.extend(h);
        sizes.push(out);
        dense_params(&sizes)
    };
    let base = count(hidden);
    let added = |w: usize| {
        let mut h = hidden.to_vec();
        for &l in layers {
            h[l] = h[l].max(w);
        }
        (count(&h) - base, h)
    };
    let start = layers.iter().map(|&l| hidden[l]).max().unwrap_or(1);
    let (mut lo, mut hi) = (start, start.max(1));
    while added(hi).0 < target {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if added(mid).0 < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = [lo, hi]
        .into_iter()
        .min_by_key(|&w| added(w).0.abs_diff(target))
        .expect("two candidates");
    let (got, h) = added(best);
    let err = got.abs_diff(target) as f64 / target.max(1) as f64;
    if err > WIDE_TOLERANCE {
        return Err(Error::Config(vec![format!(
            "cannot widen backbone to add {target} parameters within 5% (closest adds {got})"
        )]));
    }
    Ok(h)
}

impl DatasetConfig {
    fn resolve_paths(&mut self, base: &Path) {
        for p in [&mut self.images, &mut self.view1, &mut self.view2].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        match self.kind {
            DatasetKind::Synthetic => {
                if self.dims.len() != 2 {
                    v.push("dataset.dims must list two view dimensions".to_string());
                }
                if self.latent_dim == 0 || self.correlations.len() != self.latent_dim {
                    v.push("dataset.correlations must hold latent_dim values".to_string());
                }
            }
            DatasetKind::MnistHalves => {
                if self.images.is_none() {
                    v.push("dataset.images is required for mnist_halves".to_string());
                }
            }
            DatasetKind::Files => {
                if self.view1.is_none() || self.view2.is_none() {
                    v.push("dataset.view1 and dataset.view2 are required for files".to_string());
                }
            }
        }
        if self.split_counts.is_some() && self.split_fractions.is_some() {
            v.push("give dataset.split_counts or dataset.split_fractions, not both".to_string());
        }
        v
    }

    pub fn load(&self) -> Result<ViewPairDataset> {
        let missing = |p: &Option<PathBuf>| -> Result<PathBuf> {
            let p = p.clone().ok_or_else(|| Error::Config(self.violations()))?;
            if !p.exists() {
                return Err(Error::Config(vec![format!("{} does not exist", p.display())]));
            }
            Ok(p)
        };
        let ds = match self.kind {
            DatasetKind::Synthetic => {
                if self.dims.len() != 2 {
                    return Err(Error::Config(self.violations()));
                }
                synth_correlated(
                    self.n_samples,
                    self.latent_dim,
                    (self.dims[0], self.dims[1]),
                    &self.correlations,
                    self.nonlinearity,
                    self.data_seed,
                )?
            }
            DatasetKind::MnistHalves => {
                let (mut images, h, w) = read_idx_images(&missing(&self.images)?)?;
                if let Some(n) = self.limit {
                    images = images.column_range(0, n.min(images.cols()));
                }
                split_halves(&images, h, w)?
            }
            DatasetKind::Files => load_views(&missing(&self.view1)?, &missing(&self.view2)?, self.format)?,
        };
        let spec = match (self.split_counts, self.split_fractions) {
            (Some([a, b, c]), _) => SplitSpec::Counts(a, b, c),
            (None, Some([a, b, c])) => SplitSpec::Fractions(a, b, c),
            (None, None) => SplitSpec::Fractions(0.8, 0.1, 0.1),
        };
        make_splits(ds, spec, self.split_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SYNTH: &str = r#"
name = "toy"
mode = "dsdcca"

[dataset]
kind = "synthetic"
n_samples = 300
latent_dim = 2
dims = [4, 5]
correlations = [0.9, 0.5]
split_counts = [200, 50, 50]

[architecture]
hidden1 = [8]
hidden2 = [8]
scaler_hidden = [4]

[training]
epochs = 3
warmup_epochs = 1
batch_size = 50

[eval]
d = 2
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::parse(SYNTH).unwrap();
        assert_eq!(cfg.training.lr, 1e-3);
        assert_eq!(cfg.training.weight_decay, 1e-5);
        assert_eq!(cfg.training.r1, 1e-4);
        assert_eq!(cfg.training.alpha, 0.95);
        assert_eq!(cfg.eval.reg_grid, vec![1e-6, 1e-4, 1e-2]);
        assert_eq!(cfg.eval.linear_reg_grid.len(), 11);
        assert_eq!(cfg.eval.linear_reg_grid[0], 1e-8);
        assert_eq!(cfg.eval.linear_reg_grid[10], 1e2);
        assert_eq!(cfg.variant(), DslVariant::Dynamic);
        let ds = cfg.load_dataset().unwrap();
        assert_eq!(ds.splits.test.len(), 50);
    }

    #[test]
    fn every_violation_is_listed() {
        let text = SYNTH
            .replace("batch_size = 50", "batch_size = 2\nlr = -1.0")
            .replace("warmup_epochs = 1", "warmup_epochs = 9");
        match ExperimentConfig::parse(&text).unwrap().validate() {
            Err(Error::Config(v)) => {
                assert_eq!(v.len(), 3, "{v:?}");
                assert!(v.iter().any(|m| m.contains("batch_size")));
                assert!(v.iter().any(|m| m.contains("warmup_epochs")));
                assert!(v.iter().any(|m| m.contains("lr")));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(ExperimentConfig::parse("mode = \"nope\""), Err(Error::Config(_))));
        assert!(matches!(
            ExperimentConfig::parse(&SYNTH.replace("[eval]", "[eval]\nbogus = 1")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn no_warmup_sets_zero_epochs() {
        let cfg = ExperimentConfig::parse(&SYNTH.replace("mode = \"dsdcca\"", "mode = \"dsdcca\"\nablation = \"no_warmup\""))
            .unwrap();
        assert_eq!(cfg.resolve(4, 5).unwrap().training().warmup_epochs, 0);
    }

    #[test]
    fn ablations_need_dynamic_mode() {
        let cfg = ExperimentConfig::parse(&SYNTH.replace("mode = \"dsdcca\"", "mode = \"dcca\"\nablation = \"hypernet\""))
            .unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wide_matches_scaler_parameters() {
        let arch = ArchitectureConfig {
            hidden1: vec![128, 128],
            hidden2: vec![128, 128],
            feature_dim: None,
            scaler_hidden: vec![128],
            variant: DslVariant::Dynamic,
            conditioning: Conditioning::ZOnly,
        };
        let target = scaler_param_count(392, &[128, 128], 10, &arch);
        assert_eq!(target, 128 * 128 + 128 + 128 * 1290 + 1290);
        for layers in [&[1][..], &[0, 1]] {
            let h = widen(392, &[128, 128], 10, layers, target).unwrap();
            let p = |h: &[usize]| dense_params(&[&[392][..], h, &[10]].concat());
            let added = p(&h) - p(&[128, 128]);
            assert!((added as f64 - target as f64).abs() / (target as f64) < WIDE_TOLERANCE);
        }
    }

    #[test]
    fn config_round_trips() {
        let cfg = ExperimentConfig::parse(SYNTH).unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(cfg, again);
    }
}
