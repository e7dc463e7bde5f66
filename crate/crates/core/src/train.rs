//! Minibatch training and evaluation.
//!
//! Each sample of a batch gets its own tape; per-sample gradients are
//! computed in parallel (with the `parallel` feature) and summed in sample
//! order, so results do not depend on the thread count.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Dropout;
use crate::autodiff::Tape;
use crate::checkpoint::{self, CheckpointMeta};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::models::{Ctx, InputSpec, Model};
use crate::optim::{cosine_lr, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::parallel::map_indexed;
use crate::scalar::Scalar;
use crate::tasks::{splitmix64, Dataset, Example, Split};

/// Outcome of one forward pass over one example.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleResult {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    pub relational: Option<bool>,
}

fn score<T: Scalar>(logits: &[T], n_out: usize, targets: &[Option<usize>]) -> (usize, usize) {
    let mut correct = 0;
    let mut total = 0;
    for (row, t) in logits.chunks(n_out).zip(targets) {
        if let Some(t) = t {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            correct += usize::from(best == *t);
            total += 1;
        }
    }
    (correct, total)
}

/// Loss, accuracy counts and (optionally) parameter gradients for one example.
pub fn sample_pass<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    ex: &Example<'_>,
    ctx: &mut Ctx,
    with_grads: bool,
) -> Result<(SampleResult, Option<Vec<Vec<T>>>)> {
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, store, &ex.input(), ctx)?;
    let targets = ex.targets();
    let loss = tape.cross_entropy(logits, &targets)?;
    let (correct, total) = score(tape.data(logits), model.input.n_out(), &targets);
    let loss_value = tape.data(loss)[0].as_f64();
    let grads = if with_grads {
        let g = tape.backward(loss)?;
        let mut acc: Vec<Vec<T>> = store.ids().map(|id| vec![T::zero(); store.get(id).len()]).collect();
        g.accumulate_into(&mut acc);
        Some(acc)
    } else {
        None
    };
    Ok((
        SampleResult {
            loss: loss_value,
            correct,
            total,
            relational: ex.relational,
        },
        grads,
    ))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relational_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nonrelational_accuracy: Option<f64>,
}

/// Sum per-sample results in order.
pub fn summarize(results: &[SampleResult]) -> EvalMetrics {
    let n = results.len();
    let loss = results.iter().map(|r| r.loss).sum::<f64>() / n.max(1) as f64;
    let (c, t) = results.iter().fold((0, 0), |a, r| (a.0 + r.correct, a.1 + r.total));
    let family = |rel: bool| {
        let (c, t) = results
            .iter()
            .filter(|r| r.relational == Some(rel))
            .fold((0, 0), |a, r| (a.0 + r.correct, a.1 + r.total));
        (t > 0).then(|| c as f64 / t as f64)
    };
    EvalMetrics {
        loss,
        accuracy: c as f64 / t.max(1) as f64,
        n,
        relational_accuracy: family(true),
        nonrelational_accuracy: family(false),
    }
}

/// Per-example results over a whole dataset (no dropout).
pub fn evaluate_samples<T: Scalar>(model: &Model, store: &ParamStore<T>, data: &Dataset) -> Result<Vec<SampleResult>> {
    map_indexed(data.len(), |i| {
        sample_pass(model, store, &data.example(i), &mut Ctx::eval(), false).map(|r| r.0)
    })
    .into_iter()
    .collect()
}

pub fn evaluate<T: Scalar>(model: &Model, store: &ParamStore<T>, data: &Dataset) -> Result<EvalMetrics> {
    Ok(summarize(&evaluate_samples(model, store, data)?))
}

/// Mean loss and gradient over a batch; gradients are written to the
/// parameters' `grad` buffers.
pub fn batch_step<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    data: &Dataset,
    batch: &[usize],
    dropout: f64,
    dropout_seed: u64,
) -> Result<Vec<SampleResult>> {
    let shared: &ParamStore<T> = store;
    let outs = map_indexed(batch.len(), |j| {
        let mut ctx = Ctx {
            dropout: (dropout > 0.0).then(|| Dropout {
                p: dropout,
                rng: ChaCha8Rng::seed_from_u64(splitmix64(dropout_seed ^ batch[j] as u64)),
            }),
            trace: None,
        };
        sample_pass(model, shared, &data.example(batch[j]), &mut ctx, true)
    });
    let mut sum: Vec<Vec<T>> = store.ids().map(|id| vec![T::zero(); store.get(id).len()]).collect();
    let mut results = Vec::with_capacity(batch.len());
    for out in outs {
        let (r, g) = out?;
        for (acc, g) in sum.iter_mut().zip(g.expect("gradients requested")) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        results.push(r);
    }
    let scale = T::one() / T::of(batch.len() as f64);
    let ids: Vec<_> = store.ids().collect();
    for (id, mut g) in ids.into_iter().zip(sum) {
        g.iter_mut().for_each(|v| *v *= scale);
        store.get_mut(id).grad = Some(g);
    }
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub wall_ms: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub relational_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nonrelational_accuracy: Option<f64>,
}

/// Append-only JSON-lines writer; each record is flushed on write.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    pub fn open(path: &Path, truncate: bool) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(!truncate)
            .write(true)
            .truncate(truncate)
            .open(path)?;
        Ok(Self { file })
    }

    pub fn write(&mut self, record: &MetricRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for metrics, checkpoints and the manifest. `None` keeps
    /// everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Resume from `out_dir/last.ckpt`.
    pub resume: bool,
    /// Stop after this many epochs in this invocation (for resume tests).
    pub max_epochs_this_run: Option<usize>,
    pub quiet: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainOutcome {
    pub history: Vec<MetricRecord>,
    /// First epoch (1-based) whose test accuracy reached the target, if any.
    pub epochs_to_target: Option<usize>,
    pub best_test_accuracy: f64,
    pub final_test: EvalMetrics,
    pub epochs_run: usize,
    pub warnings: Vec<String>,
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ (epoch as u64).wrapping_mul(0x9E37)));
    order.shuffle(&mut rng);
    order
}

/// Train `cfg` on the given datasets at 32-bit precision.
pub fn train(cfg: &RunConfig, train_set: &Dataset, test_set: &Dataset, opts: &TrainOptions) -> Result<TrainOutcome> {
    let spec = InputSpec::for_task(&cfg.task)?;
    let (model, mut store, warnings) = Model::build::<f32>(&cfg.model, &spec)?;
    let tc = &cfg.train;
    if tc.batch_size == 0 || tc.epochs == 0 {
        return Err(Error::config("batch_size and epochs must be positive"));
    }
    if !opts.quiet {
        for w in &warnings {
            eprintln!("warning: {w}");
        }
    }
    let adam_cfg = AdamConfig {
        lr: tc.lr,
        weight_decay: tc.weight_decay,
        ..Default::default()
    };
    let mut adam = AdamState::new(adam_cfg, &store);
    let mut start_epoch = 0;
    let mut best = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let paths = opts.out_dir.as_ref().map(|d| RunPaths::new(d));
    if let Some(p) = &paths {
        std::fs::create_dir_all(&p.dir)?;
    }
    if opts.resume {
        let p = paths
            .as_ref()
            .ok_or_else(|| Error::config("resume needs an output directory"))?;
        let ck = checkpoint::load::<f32>(&p.last)?;
        let saved = RunConfig::from_toml(&ck.meta.config)?;
        if saved != *cfg {
            return Err(Error::config("checkpoint was written with a different configuration"));
        }
        store.load_from(&ck.params)?;
        adam = ck.adam.ok_or_else(|| Error::format("checkpoint has no optimizer state"))?;
        start_epoch = ck.meta.epoch;
        best = ck.meta.best_accuracy;
        history = read_metrics(&p.metrics)?
            .into_iter()
            .filter(|r| r.epoch <= start_epoch)
            .collect();
    }
    let mut log = match &paths {
        Some(p) => {
            if opts.resume {
                // Drop records past the checkpoint so the log matches it.
                let mut f = MetricsLog::open(&p.metrics, true)?;
                for r in &history {
                    f.write(r)?;
                }
                Some(f)
            } else {
                Some(MetricsLog::open(&p.metrics, true)?)
            }
        }
        None => None,
    };
    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(tc.batch_size) as u64;
    let total_steps = steps_per_epoch * tc.epochs as u64;
    let clock = Instant::now();
    let mut epochs_to_target = history
        .iter()
        .filter(|r| r.split == "test")
        .find(|r| tc.target_accuracy.is_some_and(|t| r.accuracy >= t))
        .map(|r| r.epoch);
    let mut final_test = EvalMetrics::default();
    let mut epochs_run = start_epoch;
    let stop_at = opts
        .max_epochs_this_run
        .map_or(tc.epochs, |m| (start_epoch + m).min(tc.epochs));
    for epoch in start_epoch..stop_at {
        let order = epoch_order(tc.seed, epoch, n);
        let mut results = Vec::with_capacity(n);
        for (b, batch) in order.chunks(tc.batch_size).enumerate() {
            let lr = if tc.cosine {
                cosine_lr(tc.lr, tc.min_lr, adam.step, total_steps)
            } else {
                tc.lr
            };
            let drop_seed = splitmix64(tc.seed ^ ((epoch as u64) << 32) ^ b as u64);
            let r = batch_step(&model, &mut store, train_set, batch, cfg.model.dropout, drop_seed)?;
            let mean: f64 = r.iter().map(|s| s.loss).sum::<f64>() / r.len() as f64;
            if !mean.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at epoch {} step {}; last good checkpoint kept",
                    epoch + 1,
                    adam.step
                )));
            }
            adam.step(&mut store, lr)?;
            results.extend(r);
        }
        store.zero_grads();
        let tr = summarize(&results);
        let te = evaluate(&model, &store, test_set)?;
        let wall_ms = clock.elapsed().as_millis() as u64;
        for (split, m) in [("train", &tr), ("test", &te)] {
            let rec = MetricRecord {
                step: adam.step,
                epoch: epoch + 1,
                split: split.into(),
                loss: m.loss,
                accuracy: m.accuracy,
                wall_ms,
                relational_accuracy: m.relational_accuracy,
                nonrelational_accuracy: m.nonrelational_accuracy,
            };
            if let Some(l) = log.as_mut() {
                l.write(&rec)?;
            }
            history.push(rec);
        }
        if !opts.quiet {
            eprintln!(
                "epoch {:>3}  train loss {:.4} acc {:.4}  test loss {:.4} acc {:.4}",
                epoch + 1,
                tr.loss,
                tr.accuracy,
                te.loss,
                te.accuracy
            );
        }
        let meta = CheckpointMeta {
            config: cfg.to_toml(),
            epoch: epoch + 1,
            step: adam.step,
            best_accuracy: best.max(te.accuracy),
        };
        if let Some(p) = &paths {
            if te.accuracy > best {
                checkpoint::save(&p.best, &meta, &store, None)?;
            }
            checkpoint::save(&p.last, &meta, &store, Some(&adam))?;
        }
        best = best.max(te.accuracy);
        epochs_run = epoch + 1;
        if epochs_to_target.is_none() && tc.target_accuracy.is_some_and(|t| te.accuracy >= t) {
            epochs_to_target = Some(epoch + 1);
        }
        final_test = te;
        if epochs_to_target.is_some() && tc.stop_at_target {
            break;
        }
    }
    Ok(TrainOutcome {
        history,
        epochs_to_target,
        best_test_accuracy: best,
        final_test,
        epochs_run,
        warnings,
    })
}

/// File layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
    pub manifest: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            metrics: dir.join("metrics.jsonl"),
            best: dir.join("best.ckpt"),
            last: dir.join("last.ckpt"),
            manifest: dir.join("manifest.json"),
        }
    }
}

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub build: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub final_test: EvalMetrics,
    pub best_test_accuracy: f64,
    pub epochs_run: usize,
    pub artifacts: Vec<String>,
    /// Departures from full-scale settings.
    pub notes: Vec<String>,
}

pub fn build_id() -> String {
    format!(
        "sharedws {} ({})",
        env!("CARGO_PKG_VERSION"),
        if crate::parallel::is_parallel() { "parallel" } else { "sequential" }
    )
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }
}

/// Load or generate the datasets a config refers to. Files under
/// `data_root/<task>-<seed>/` are reused when their header matches.
pub fn prepare_data(cfg: &RunConfig, data_root: Option<&Path>) -> Result<(Dataset, Dataset)> {
    let get = |split: Split| -> Result<Dataset> {
        if let Some(root) = data_root {
            let path = dataset_path(root, cfg, split);
            if path.exists() {
                let ds = Dataset::load(&path)?;
                if ds.header.task == cfg.task && ds.header.split == split {
                    return Ok(ds);
                }
            }
            let ds = crate::tasks::generate(&cfg.task, split)?;
            std::fs::create_dir_all(path.parent().unwrap())?;
            ds.save(&path)?;
            return Ok(ds);
        }
        crate::tasks::generate(&cfg.task, split)
    };
    Ok((get(Split::Train)?, get(Split::Test)?))
}

pub fn dataset_path(root: &Path, cfg: &RunConfig, split: Split) -> PathBuf {
    let t = &cfg.task;
    root.join(format!(
        "{}-s{}-n{}-{}",
        t.kind.name(),
        t.seed,
        t.n_train,
        t.n_test
    ))
    .join(format!("{}.swds", split.name()))
}
