use std::path::Path;

use sharedws::checkpoint;
use sharedws::config::{Host, RunConfig, TaskKind};
use sharedws::models::{InputSpec, Model};
use sharedws::tasks::{generate, Split};
use sharedws::train::{evaluate, evaluate_samples, read_metrics, summarize, train, MetricRecord, RunPaths, TrainOptions};

fn quiet(dir: &Path) -> TrainOptions {
    TrainOptions {
        out_dir: Some(dir.to_path_buf()),
        quiet: true,
        ..Default::default()
    }
}

fn without_clock(records: Vec<MetricRecord>) -> Vec<MetricRecord> {
    records.into_iter().map(|r| MetricRecord { wall_ms: 0, ..r }).collect()
}

/// Train the smoke config twice into fresh directories; returns both
/// metrics files.
pub fn smoke_twice() -> (String, String) {
    let cfg = RunConfig::smoke();
    let train_set = generate(&cfg.task, Split::Train).unwrap();
    let test_set = generate(&cfg.task, Split::Test).unwrap();
    let mut files = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        train(&cfg, &train_set, &test_set, &quiet(dir.path())).unwrap();
        let metrics = read_metrics(&RunPaths::new(dir.path()).metrics).unwrap();
        files.push(serde_json::to_string(&without_clock(metrics)).unwrap());
    }
    (files.remove(0), files.remove(0))
}

#[test]
fn smoke_runs_are_identical() {
    let (a, b) = smoke_twice();
    assert_eq!(a, b);
    assert_eq!(a.matches("\"split\":\"test\"").count(), 3);
}

#[test]
fn resume_reproduces_the_straight_run() {
    let mut cfg = RunConfig::smoke();
    cfg.task.n_train = 128;
    cfg.task.n_test = 32;
    let train_set = generate(&cfg.task, Split::Train).unwrap();
    let test_set = generate(&cfg.task, Split::Test).unwrap();

    let straight = tempfile::tempdir().unwrap();
    let full = train(&cfg, &train_set, &test_set, &quiet(straight.path())).unwrap();

    let split = tempfile::tempdir().unwrap();
    let first = TrainOptions {
        max_epochs_this_run: Some(1),
        ..quiet(split.path())
    };
    assert_eq!(train(&cfg, &train_set, &test_set, &first).unwrap().epochs_run, 1);
    let rest = TrainOptions {
        resume: true,
        ..quiet(split.path())
    };
    let resumed = train(&cfg, &train_set, &test_set, &rest).unwrap();
    assert_eq!(resumed.epochs_run, cfg.train.epochs);
    assert_eq!(without_clock(resumed.history), without_clock(full.history));

    let a = checkpoint::load::<f32>(&RunPaths::new(straight.path()).last).unwrap();
    let b = checkpoint::load::<f32>(&RunPaths::new(split.path()).last).unwrap();
    for id in a.params.ids() {
        assert_eq!(a.params.get(id).data(), b.params.get(id).data(), "{}", a.params.name(id));
    }

    let mut other = cfg.clone();
    other.train.lr *= 2.0;
    assert!(train(&other, &train_set, &test_set, &rest).is_err());
}

#[test]
fn untrained_model_is_at_chance() {
    let mut cfg = RunConfig::smoke();
    cfg.task.n_test = 1000;
    let test_set = generate(&cfg.task, Split::Test).unwrap();
    let spec = InputSpec::for_task(&cfg.task).unwrap();
    for host in [Host::Tr, Host::TrHsw] {
        cfg.model.host = host;
        cfg.model.topk = (host == Host::TrHsw).then_some(20);
        let (model, store, _) = Model::build::<f32>(&cfg.model, &spec).unwrap();
        let m = evaluate(&model, &store, &test_set).unwrap();
        assert!((m.accuracy - 0.5).abs() <= 0.05, "{}: {}", host.name(), m.accuracy);
    }
}

#[test]
fn fifty_samples_are_memorized() {
    let mut cfg = RunConfig::smoke();
    cfg.task.n_train = 50;
    cfg.task.n_test = 50;
    cfg.model.dropout = 0.0;
    cfg.train.epochs = 120;
    cfg.train.batch_size = 10;
    cfg.train.lr = 2e-3;
    cfg.train.cosine = false;
    let train_set = generate(&cfg.task, Split::Train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, &train_set, &train_set, &quiet(dir.path())).unwrap();
    let ck = checkpoint::load::<f32>(&RunPaths::new(dir.path()).last).unwrap();
    let spec = InputSpec::for_task(&cfg.task).unwrap();
    let (model, mut store, _) = Model::build::<f32>(&cfg.model, &spec).unwrap();
    store.load_from(&ck.params).unwrap();
    assert_eq!(evaluate(&model, &store, &train_set).unwrap().accuracy, 1.0);
}

#[test]
fn question_families_add_up() {
    let mut cfg = RunConfig::clevr_desk(true);
    cfg.model.n_layers = 1;
    cfg.model.n_h = 16;
    cfg.model.ffn_dim = 16;
    cfg.task.n_test = 10;
    assert_eq!(cfg.task.kind, TaskKind::SortOfClevr);
    let test_set = generate(&cfg.task, Split::Test).unwrap();
    let spec = InputSpec::for_task(&cfg.task).unwrap();
    let (model, store, _) = Model::build::<f32>(&cfg.model, &spec).unwrap();
    let rows = evaluate_samples(&model, &store, &test_set).unwrap();
    let m = summarize(&rows);
    let count = |rel: bool| rows.iter().filter(|r| r.relational == Some(rel)).count() as f64;
    let (nr, nn) = (count(true), count(false));
    assert_eq!(nr + nn, rows.len() as f64);
    let mixed = (m.relational_accuracy.unwrap() * nr + m.nonrelational_accuracy.unwrap() * nn) / (nr + nn);
    assert!((mixed - m.accuracy).abs() < 1e-12);
}

#[test]
fn metrics_log_is_line_parseable() {
    let mut cfg = RunConfig::smoke();
    cfg.task.n_train = 32;
    cfg.task.n_test = 8;
    cfg.train.epochs = 2;
    let train_set = generate(&cfg.task, Split::Train).unwrap();
    let test_set = generate(&cfg.task, Split::Test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, &train_set, &test_set, &quiet(dir.path())).unwrap();
    let text = std::fs::read_to_string(RunPaths::new(dir.path()).metrics).unwrap();
    assert_eq!(text.lines().count(), 4);
    for line in text.lines() {
        let r: MetricRecord = serde_json::from_str(line).unwrap();
        assert!(r.loss.is_finite() && (0.0..=1.0).contains(&r.accuracy));
    }
}
