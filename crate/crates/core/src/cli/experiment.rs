//! Running configured experiments and writing their artifacts.
//!
//! A run directory holds `config.toml`, `metrics.csv` (one row per epoch,
//! flushed as training goes), `checkpoint.dscca` and `report.json`, plus
//! `total_correlation.csv` or `recall.csv`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, TrainedModel};
use super::config::{Ablation, ExperimentConfig, ModelMode, ResolvedTraining};
use crate::data::{read_binary, read_csv, Split, ViewPairDataset};
use crate::dcca::train::{train_dsdcca_with, EpochRecord};
use crate::dsl::DslNetwork;
use crate::error::{Error, Result};
use crate::eval::{
    linear_baseline_protocol, recall_at_k, total_correlation_on, total_correlation_protocol, write_json, write_recall_csv,
    write_total_correlation_csv, Direction, Projector, RecallReport, TotalCorrelationReport,
};
use crate::linalg::Matrix;
use crate::ranking::{retrieve_batch, train_ds_ranking_per_k, write_retrieval_csv, KSelection};

/// Environment variable naming the directory that receives run outputs.
pub const OUTPUT_DIR_ENV: &str = "DSCCA_OUTPUT_DIR";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub mode: ModelMode,
    pub ablation: Ablation,
    pub best_epoch: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Parameters of both views' backbones and heads.
    pub conventional_params: usize,
    /// Parameters added by scaling networks or global scales.
    pub extra_params: usize,
    /// Validation total correlation (DCCA modes) or mean recall@1 (ranking modes).
    pub validation_metric: f64,
    pub total_correlation: Option<TotalCorrelationReport>,
    /// Linear CCA on the raw inputs, same protocol (DCCA modes).
    pub linear_baseline: Option<TotalCorrelationReport>,
    pub recall: Option<Vec<RecallReport>>,
    /// Ranking runs: a separate epoch per cutoff, chosen by validation recall@k.
    pub per_k_selection: Option<Vec<KSelectionReport>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelectionReport {
    pub k: usize,
    pub best_epoch: usize,
    /// Mean validation recall@k over both directions.
    pub validation_recall: f64,
    pub test_recall_1to2: f64,
    pub test_recall_2to1: f64,
}

impl RunReport {
    /// Headline test number: total correlation, or mean recall@1 over directions.
    pub fn test_metric(&self) -> Option<f64> {
        if let Some(t) = &self.total_correlation {
            return Some(t.total);
        }
        self.recall.as_ref().map(|rs| {
            rs.iter().map(|r| r.recalls[0]).sum::<f64>() / rs.len() as f64
        })
    }
}

/// A trained model and what is needed to evaluate it.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub checkpoint: Checkpoint,
    pub dataset: ViewPairDataset,
    pub validation_metric: f64,
    pub selections: Vec<KSelection>,
}

fn projector(model: &TrainedModel) -> &dyn Projector {
    match model {
        TrainedModel::Dcca(m) => m.as_ref(),
        TrainedModel::Ranking(m) => m.as_ref(),
    }
}

fn networks(model: &TrainedModel) -> [&DslNetwork; 2] {
    match model {
        TrainedModel::Dcca(m) => [&m.net1, &m.net2],
        TrainedModel::Ranking(m) => [&m.net1, &m.net2],
    }
}

struct MetricsLog {
    w: BufWriter<File>,
}

impl MetricsLog {
    fn create(path: &Path) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "epoch,phase,train_loss,val_loss,val_recall,degenerate_batches")?;
        w.flush()?;
        Ok(MetricsLog { w })
    }

    fn append(&mut self, r: &EpochRecord) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:?}"));
        writeln!(
            self.w,
            "{},{},{:?},{},{},{}",
            r.epoch,
            match r.phase {
                crate::dsl::Phase::Warmup => "warmup",
                crate::dsl::Phase::Active => "active",
            },
            r.train_loss,
            opt(r.val_loss),
            opt(r.val_recall),
            r.degenerate_batches
        )?;
        self.w.flush()
    }
}

/// Trains the configured model, writing `config.toml`, `metrics.csv` and
/// `checkpoint.dscca` into `dir`. No test-split metric is computed.
pub fn train_run(config: &ExperimentConfig, dir: &Path) -> Result<TrainedRun> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let resolved = config.resolve(dataset.view1.rows(), dataset.view2.rows())?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), config.to_toml())?;
    let mut log = MetricsLog::create(&dir.join("metrics.csv"))?;
    let mut io_error = None;
    let mut observer = |r: &EpochRecord, _: &DslNetwork, _: &DslNetwork| {
        if let Err(e) = log.append(r) {
            io_error.get_or_insert(e);
        }
    };
    let (model, selections) = match &resolved {
        ResolvedTraining::Dcca(t) => (
            TrainedModel::Dcca(Box::new(train_dsdcca_with(t, &dataset, &mut observer)?)),
            Vec::new(),
        ),
        ResolvedTraining::Ranking(r) => {
            let (m, sel) = train_ds_ranking_per_k(r, &dataset, &config.eval.k_values, &mut observer)?;
            (TrainedModel::Ranking(Box::new(m)), sel)
        }
    };
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let validation_metric = match &model {
        TrainedModel::Dcca(m) => {
            if dataset.splits.val.len() >= 2 {
                let train = dataset.split_views(Split::Train);
                let val = dataset.split_views(Split::Val);
                total_correlation_on(
                    m.as_ref(),
                    (&train.0, &train.1),
                    None,
                    (&val.0, &val.1),
                    config.eval.d,
                    &config.eval.reg_grid,
                )?
                .total
            } else {
                -m.history
                    .iter()
                    .filter_map(|h| h.val_loss)
                    .fold(f64::INFINITY, f64::min)
            }
        }
        TrainedModel::Ranking(m) => m.best_val_recall,
    };
    let checkpoint = Checkpoint {
        mode: config.mode,
        config: config.clone(),
        model,
    };
    save_checkpoint(&checkpoint, &dir.join("checkpoint.dscca"))?;
    Ok(TrainedRun {
        checkpoint,
        dataset,
        validation_metric,
        selections,
    })
}

/// Recall at every cutoff on the test split, `1to2` then `2to1`.
fn test_recalls(model: &dyn Projector, dataset: &ViewPairDataset, k_values: &[usize]) -> Result<Vec<RecallReport>> {
    let (t1, t2) = dataset.split_views(Split::Test);
    [Direction::OneToTwo, Direction::TwoToOne]
        .into_iter()
        .map(|dir| {
            let (q, t) = match dir {
                Direction::OneToTwo => (&t1, &t2),
                Direction::TwoToOne => (&t2, &t1),
            };
            recall_at_k(model, q, t, k_values, dir)
        })
        .collect()
}

/// Test reports of a fresh run, including the per-cutoff selections.
pub fn test_report(run: &TrainedRun, config: &ExperimentConfig) -> Result<RunReport> {
    let mut report = evaluate_checkpoint(&run.checkpoint, config, &run.dataset, run.validation_metric)?;
    if run.checkpoint.mode.is_ranking() {
        let per_k = run
            .selections
            .iter()
            .map(|sel| {
                let r = test_recalls(&sel.model, &run.dataset, &[sel.k])?;
                Ok(KSelectionReport {
                    k: sel.k,
                    best_epoch: sel.epoch,
                    validation_recall: sel.val_recall,
                    test_recall_1to2: r[0].recalls[0],
                    test_recall_2to1: r[1].recalls[0],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        report.per_k_selection = Some(per_k);
    }
    Ok(report)
}

/// Test-split reports for a trained model.
pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    config: &ExperimentConfig,
    dataset: &ViewPairDataset,
    validation_metric: f64,
) -> Result<RunReport> {
    let model = projector(&checkpoint.model);
    let (total_correlation, linear_baseline, recall) = if checkpoint.mode.is_ranking() {
        (None, None, Some(test_recalls(model, dataset, &config.eval.k_values)?))
    } else {
        let report = total_correlation_protocol(model, dataset, config.eval.d, &config.eval.reg_grid)?;
        let baseline = if config.eval.linear_baseline {
            Some(linear_baseline_protocol(dataset, config.eval.d, &config.eval.linear_reg_grid)?)
        } else {
            None
        };
        (Some(report), baseline, None)
    };
    let nets = networks(&checkpoint.model);
    let cfg = match &checkpoint.model {
        TrainedModel::Dcca(m) => &m.config,
        TrainedModel::Ranking(m) => &m.config.training,
    };
    Ok(RunReport {
        name: config.name.clone(),
        mode: checkpoint.mode,
        ablation: checkpoint.config.ablation,
        best_epoch: checkpoint.best_epoch(),
        epochs: cfg.epochs,
        warmup_epochs: cfg.warmup_epochs,
        conventional_params: nets.iter().map(|n| n.conventional_param_count()).sum(),
        extra_params: nets.iter().map(|n| n.extra_param_count()).sum(),
        validation_metric,
        total_correlation,
        linear_baseline,
        recall,
        per_k_selection: None,
    })
}

pub fn write_report(dir: &Path, report: &RunReport, file: &str) -> Result<()> {
    write_json(&dir.join(file), report)?;
    if let Some(t) = &report.total_correlation {
        write_total_correlation_csv(&dir.join("total_correlation.csv"), t)?;
    }
    if let Some(r) = &report.recall {
        write_recall_csv(&dir.join("recall.csv"), r)?;
    }
    Ok(())
}

/// Trains, evaluates on the test split and writes every artifact into `dir`.
pub fn run_experiment(config: &ExperimentConfig, dir: &Path) -> Result<RunReport> {
    let run = train_run(config, dir)?;
    let report = test_report(&run, config)?;
    write_report(dir, &report, "report.json")?;
    Ok(report)
}

/// Re-evaluates a saved checkpoint on the dataset described by `config`.
pub fn eval_command(checkpoint_path: &Path, config: &ExperimentConfig, dir: &Path) -> Result<RunReport> {
    config.validate()?;
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let dataset = config.load_dataset()?;
    let validation_metric = f64::NAN;
    let mut report = evaluate_checkpoint(&checkpoint, config, &dataset, validation_metric)?;
    if let TrainedModel::Ranking(m) = &checkpoint.model {
        report.validation_metric = m.best_val_recall;
    } else {
        let train = dataset.split_views(Split::Train);
        let val = dataset.split_views(Split::Val);
        if val.0.cols() >= 2 {
            report.validation_metric = total_correlation_on(
                projector(&checkpoint.model),
                (&train.0, &train.1),
                None,
                (&val.0, &val.1),
                config.eval.d,
                &config.eval.reg_grid,
            )?
            .total;
        }
    }
    std::fs::create_dir_all(dir)?;
    write_report(dir, &report, "eval_report.json")?;
    Ok(report)
}

/// Reads a matrix in the binary format when the file starts with its magic,
/// otherwise as CSV.
pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut head = [0u8; 6];
    let is_binary = {
        use std::io::Read;
        let mut f = File::open(path)?;
        f.read(&mut head)? == 6 && &head == b"DSCCA1"
    };
    if is_binary {
        read_binary(path)
    } else {
        read_csv(path)
    }
}

/// Top-`k` retrieval with a ranking checkpoint. Writes `retrieval.csv` into `dir`.
pub fn retrieve_command(
    checkpoint_path: &Path,
    queries: &Path,
    targets: &Path,
    k: usize,
    direction: Direction,
    dir: &Path,
) -> Result<Vec<Vec<(usize, f64)>>> {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    let model = checkpoint.into_ranking()?;
    let q = read_matrix(queries)?;
    let t = read_matrix(targets)?;
    let hits = retrieve_batch(&model, &q, &t, direction, k)?;
    std::fs::create_dir_all(dir)?;
    write_retrieval_csv(&dir.join("retrieval.csv"), &hits)?;
    Ok(hits)
}

/// Hyperparameter values to try, keyed by dotted config path such as `training.r1`.
pub type Grid = BTreeMap<String, Vec<toml::Value>>;

/// Reads a `[grid]` table.
pub fn parse_grid(text: &str) -> Result<Grid> {
    #[derive(Deserialize)]
    #[serde(deny_unknown_fields)]
    struct GridFile {
        grid: Grid,
    }
    let g: GridFile = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
    if g.grid.is_empty() || g.grid.values().any(Vec::is_empty) {
        return Err(Error::Config(vec!["grid is empty".into()]));
    }
    Ok(g.grid)
}

fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| Error::Config(vec![format!("grid key {path}: {part} is not a section")]))?;
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::Config(vec![format!("empty grid key {path:?}")]))
}

/// Cartesian product of the grid applied to `base`, in key order with the
/// last key varying fastest.
pub fn grid_points(base: &ExperimentConfig, grid: &Grid) -> Result<Vec<(BTreeMap<String, toml::Value>, ExperimentConfig)>> {
    let mut combos: Vec<BTreeMap<String, toml::Value>> = vec![BTreeMap::new()];
    for (key, values) in grid {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.insert(key.clone(), v.clone());
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|c| {
            let mut value = toml::Value::try_from(base).map_err(|e| Error::Config(vec![e.to_string()]))?;
            for (k, v) in &c {
                set_path(&mut value, k, v.clone())?;
            }
            let cfg: ExperimentConfig = value
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
            Ok((c, cfg))
        })
        .collect()
}

/// Index of the highest validation metric; ties go to the earlier point.
pub fn select_best(validation: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in validation.iter().enumerate() {
        if v.is_nan() {
            continue;
        }
        if best.map_or(true, |b| v > validation[b]) {
            best = Some(i);
        }
    }
    best
}

/// Trains every configuration with `train`, which returns its validation
/// metric, then calls `test` on the selected run only.
pub fn sweep_with<R, T>(
    configs: &[ExperimentConfig],
    mut train: impl FnMut(usize, &ExperimentConfig) -> Result<(f64, R)>,
    test: impl FnOnce(usize, R) -> Result<T>,
) -> Result<(Vec<f64>, usize, T)> {
    if configs.is_empty() {
        return Err(Error::Config(vec!["grid is empty".into()]));
    }
    let mut validation = Vec::with_capacity(configs.len());
    let mut runs = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        let (v, r) = train(i, cfg)?;
        validation.push(v);
        runs.push(Some(r));
    }
    let selected = select_best(&validation)
        .ok_or_else(|| Error::invalid("no run produced a finite validation metric"))?;
    let run = runs[selected].take().expect("selected run exists");
    Ok((validation, selected, test(selected, run)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub index: usize,
    pub overrides: BTreeMap<String, toml::Value>,
    pub validation_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
    pub selected: usize,
    /// Test report of the selected configuration only.
    pub selected_report: RunReport,
}

/// Runs every grid point under `dir/point_NNN`, selects by validation metric
/// and evaluates the test split for the selected point only.
pub fn sweep(base: &ExperimentConfig, grid: &Grid, dir: &Path) -> Result<SweepSummary> {
    let points = grid_points(base, grid)?;
    let configs: Vec<ExperimentConfig> = points.iter().map(|(_, c)| c.clone()).collect();
    for c in &configs {
        c.validate()?;
    }
    let point_dir = |i: usize| dir.join(format!("point_{i:03}"));
    let (validation, selected, report) = sweep_with(
        &configs,
        |i, cfg| {
            let run = train_run(cfg, &point_dir(i))?;
            Ok((run.validation_metric, run))
        },
        |i, run| {
            let report = test_report(&run, &configs[i])?;
            write_report(&point_dir(i), &report, "report.json")?;
            Ok(report)
        },
    )?;
    let rows: Vec<SweepRow> = points
        .into_iter()
        .zip(&validation)
        .enumerate()
        .map(|(index, ((overrides, _), &v))| SweepRow {
            index,
            overrides,
            validation_metric: v,
        })
        .collect();
    let summary = SweepSummary {
        rows,
        selected,
        selected_report: report,
    };
    write_sweep_csv(&dir.join("sweep.csv"), &summary)?;
    write_json(&dir.join("sweep.json"), &summary)?;
    Ok(summary)
}

fn write_sweep_csv(path: &Path, s: &SweepSummary) -> Result<()> {
    let keys: Vec<&String> = s.rows.first().map_or(vec![], |r| r.overrides.keys().collect());
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = std::iter::once("index".to_string())
        .chain(keys.iter().map(|k| k.to_string()))
        .chain(["validation_metric", "selected", "test_metric"].map(String::from))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for r in &s.rows {
        let mut fields = vec![r.index.to_string()];
        fields.extend(keys.iter().map(|k| r.overrides[*k].to_string()));
        fields.push(format!("{:?}", r.validation_metric));
        let sel = r.index == s.selected;
        fields.push(sel.to_string());
        fields.push(if sel {
            s.selected_report.test_metric().map_or(String::new(), |v| format!("{v:?}"))
        } else {
            String::new()
        });
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}
