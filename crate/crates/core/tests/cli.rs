//! Runs, checkpoints, sweeps and the `dscca` binary.

use std::path::Path;
use std::process::Command;

use dscca::cli::checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use dscca::cli::experiment::{grid_points, parse_grid, read_matrix, sweep_with, train_run};
use dscca::cli::{load_checkpoint, retrieve_command, run_experiment, save_checkpoint, ExperimentConfig, TrainedModel};
use dscca::data::{write_binary, write_csv, Split};
use dscca::eval::{Direction, Projector};
use dscca::linear_cca::View;
use dscca::Error;

fn config(mode: &str, name: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!(
        r#"
name = "{name}"
mode = "{mode}"

[dataset]
kind = "synthetic"
n_samples = 400
latent_dim = 3
dims = [6, 5]
correlations = [0.95, 0.8, 0.6]
data_seed = 4
split_counts = [300, 50, 50]

[architecture]
hidden1 = [16, 16]
hidden2 = [16, 16]
scaler_hidden = [8]

[training]
epochs = 6
warmup_epochs = 2
batch_size = 100
seed = 9

[eval]
d = 3
k_values = [1, 5]
"#
    ))
    .unwrap()
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["dsdcca", "ds_ranking"] {
        let cfg = config(mode, mode);
        let run = train_run(&cfg, &dir.path().join(mode)).unwrap();
        let loaded = load_checkpoint(&dir.path().join(mode).join("checkpoint.dscca")).unwrap();
        assert_eq!(loaded, run.checkpoint);
        let (x1, x2) = run.dataset.split_views(Split::Test);
        let project = |m: &TrainedModel| {
            let p: &dyn Projector = match m {
                TrainedModel::Dcca(a) => a.as_ref(),
                TrainedModel::Ranking(a) => a.as_ref(),
            };
            (p.project(&x1, View::One).unwrap(), p.project(&x2, View::Two).unwrap())
        };
        assert_eq!(project(&loaded.model), project(&run.checkpoint.model));
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("dcca", "damaged");
    let run = train_run(&cfg, dir.path()).unwrap();
    let path = dir.path().join("checkpoint.dscca");
    let good = std::fs::read(&path).unwrap();
    assert_eq!(&good[..8], CHECKPOINT_MAGIC);

    let write = |bytes: &[u8]| {
        let p = dir.path().join("bad.dscca");
        std::fs::write(&p, bytes).unwrap();
        load_checkpoint(&p)
    };
    let mut bad_magic = good.clone();
    bad_magic[0] ^= 0xff;
    assert!(matches!(write(&bad_magic), Err(Error::Checkpoint(m)) if m.contains("magic")));
    let mut bad_version = good.clone();
    bad_version[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(write(&bad_version), Err(Error::Checkpoint(m)) if m.contains("version")));
    assert!(matches!(write(&good[..good.len() - 10]), Err(Error::Checkpoint(_))));
    assert!(matches!(write(&good[..10]), Err(Error::Checkpoint(_))));

    // a DCCA checkpoint cannot drive retrieval
    let q = dir.path().join("q.csv");
    write_csv(&q, &run.dataset.view1).unwrap();
    let err = retrieve_command(&path, &q, &q, 1, Direction::OneToTwo, dir.path()).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(m) if m.contains("ranking")));

    // saving what was loaded reproduces the file
    let copy = dir.path().join("copy.dscca");
    save_checkpoint(&load_checkpoint(&path).unwrap(), &copy).unwrap();
    assert_eq!(std::fs::read(copy).unwrap(), good);
}

#[test]
fn retrieval_reads_csv_and_binary_alike() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_run(&config("ranking", "retrieval"), &dir.path().join("run")).unwrap();
    let (x1, x2) = run.dataset.split_views(Split::Test);
    let (qc, tb) = (dir.path().join("q.csv"), dir.path().join("t.bin"));
    write_csv(&qc, &x1).unwrap();
    write_binary(&tb, &x2).unwrap();
    assert_eq!(read_matrix(&tb).unwrap(), x2);
    let ckpt = dir.path().join("run/checkpoint.dscca");
    let hits = retrieve_command(&ckpt, &qc, &tb, 5, Direction::OneToTwo, dir.path()).unwrap();
    assert_eq!(hits.len(), x1.cols());
    assert!(hits.iter().all(|h| h.len() == 5 && h.windows(2).all(|w| w[0].1 >= w[1].1)));
    let csv = std::fs::read_to_string(dir.path().join("retrieval.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 5 * x1.cols());
    assert!(retrieve_command(&ckpt, &qc, &tb, 0, Direction::OneToTwo, dir.path()).is_err());
}

#[test]
fn reruns_produce_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    for mode in ["dsdcca", "ds_ranking"] {
        let cfg = config(mode, mode);
        let a = dir.path().join(format!("{mode}_a"));
        let b = dir.path().join(format!("{mode}_b"));
        let ra = run_experiment(&cfg, &a).unwrap();
        let rb = run_experiment(&cfg, &b).unwrap();
        assert_eq!(ra, rb);
        for file in ["checkpoint.dscca", "metrics.csv", "report.json", "config.toml"] {
            assert_eq!(
                std::fs::read(a.join(file)).unwrap(),
                std::fs::read(b.join(file)).unwrap(),
                "{mode}: {file} differs"
            );
        }
    }
}

#[test]
fn metrics_log_has_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("dsdcca", "metrics");
    train_run(&cfg, dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[..2].iter().all(|r| r.contains(",warmup,")));
    assert!(rows[2..].iter().all(|r| r.contains(",active,")));
    let saved = ExperimentConfig::parse(&std::fs::read_to_string(dir.path().join("config.toml")).unwrap()).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn grid_expands_to_the_cartesian_product() {
    let grid = parse_grid("[grid]\n\"training.r1\" = [1e-4, 1e-2]\n\"training.margin\" = [0.4, 0.5, 0.6]\n").unwrap();
    let points = grid_points(&config("ranking", "g"), &grid).unwrap();
    assert_eq!(points.len(), 6);
    assert_eq!(points[1].1.training.margin, 0.4);
    assert_eq!(points[1].1.training.r1, 1e-2);
    assert_eq!(points[5].1.training.margin, 0.6);
    assert!(parse_grid("[grid]\n\"training.r1\" = []\n").is_err());
    let typo = parse_grid("[grid]\n\"training.rr1\" = [1.0]\n").unwrap();
    assert!(matches!(grid_points(&config("dcca", "g"), &typo), Err(Error::Config(_))));
}

#[test]
fn sweep_selects_on_validation_and_tests_once() {
    // point 2 is a decoy: poor validation score, best test score
    let configs: Vec<ExperimentConfig> = (0..4).map(|i| config("dcca", &format!("p{i}"))).collect();
    let validation = [0.3, 0.7, 0.1, 0.69];
    let test = [0.5, 0.6, 0.99, 0.4];
    let mut tested = Vec::new();
    let (val, selected, score) = sweep_with(
        &configs,
        |i, _| Ok((validation[i], i)),
        |i, run| {
            tested.push(i);
            Ok(test[run])
        },
    )
    .unwrap();
    assert_eq!(val, validation);
    assert_eq!(selected, 1);
    assert_eq!(score, 0.6);
    assert_eq!(tested, vec![1]);
}

fn run_binary(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dscca"))
        .args(args)
        .env("DSCCA_OUTPUT_DIR", out)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let good = dir.path().join("good.toml");
    std::fs::write(&good, config("ds_ranking", "bin").to_toml()).unwrap();
    let r = run_binary(&["train", "--config", good.to_str().unwrap()], &out);
    assert_eq!(r.status.code(), Some(0), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("bin/report.json").exists());

    let ckpt = out.join("bin/checkpoint.dscca");
    let r = run_binary(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--config", good.to_str().unwrap()], &out);
    assert_eq!(r.status.code(), Some(0));
    assert!(out.join("bin/eval_report.json").exists());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "mode = \"dcca\"\n[dataset]\nkind = \"synthetic\"\n").unwrap();
    assert_eq!(run_binary(&["train", "--config", bad.to_str().unwrap()], &out).status.code(), Some(1));
    assert_eq!(run_binary(&["train", "--config", "missing.toml"], &out).status.code(), Some(1));
    assert_eq!(run_binary(&["retrieve", "--direction", "sideways"], &out).status.code(), Some(1));

    // a non-finite input value aborts training
    let mut v1 = dscca::Matrix::from_fn(4, 200, |i, j| ((i * 31 + j * 17) % 23) as f64 / 23.0);
    let v2 = v1.scale(2.0);
    v1.data_mut()[3] = f64::NAN;
    write_csv(&dir.path().join("v1.csv"), &v1).unwrap();
    write_csv(&dir.path().join("v2.csv"), &v2).unwrap();
    let nan = dir.path().join("nan.toml");
    std::fs::write(
        &nan,
        "name = \"nan\"\nmode = \"dcca\"\n[dataset]\nkind = \"files\"\nview1 = \"v1.csv\"\nview2 = \"v2.csv\"\n\
         [architecture]\nhidden1 = [8]\nhidden2 = [8]\n[training]\nepochs = 2\nwarmup_epochs = 1\nbatch_size = 50\n[eval]\nd = 2\n",
    )
    .unwrap();
    let r = run_binary(&["train", "--config", nan.to_str().unwrap()], &out);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn ranking_reports_a_selection_per_cutoff() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&config("ds_ranking", "per_k"), dir.path()).unwrap();
    let per_k = report.per_k_selection.as_ref().unwrap();
    assert_eq!(per_k.iter().map(|s| s.k).collect::<Vec<_>>(), vec![1, 5]);
    // the R@1 pick is the checkpointed model
    assert_eq!(per_k[0].best_epoch, report.best_epoch);
    assert_eq!(per_k[0].validation_recall, report.validation_metric);
    let recall = report.recall.as_ref().unwrap();
    assert_eq!(per_k[0].test_recall_1to2, recall[0].recalls[0]);
    assert_eq!(per_k[0].test_recall_2to1, recall[1].recalls[0]);
    assert!(per_k[1].validation_recall >= per_k[0].validation_recall);
    assert!(run_experiment(&config("dsdcca", "no_k"), dir.path()).unwrap().per_k_selection.is_none());
}
