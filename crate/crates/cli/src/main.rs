use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sharedws::autodiff::{Fault, Tape};
use sharedws::bench::{run_scaling, to_csv, wall_slope, BenchOptions, Mechanism};
use sharedws::checkpoint;
use sharedws::config::{Host, RunConfig, TaskConfig, TaskKind};
use sharedws::error::Error;
use sharedws::gradcheck::{check_host_with, GradCheckOptions};
use sharedws::models::{Ctx, InputSpec, Model};
use sharedws::params::ParamStore;
use sharedws::tasks::{self, Dataset, Split};
use sharedws::train::{self, RunManifest, RunPaths, TrainOptions};

const DATA_ROOT_ENV: &str = "SHAREDWS_DATA";

#[derive(Parser)]
#[command(name = "sharedws", version, about = "Shared global workspace models: data, training, checks and benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train and test datasets for a task.
    Generate(GenerateArgs),
    /// Train a model; writes metrics.jsonl, checkpoints and manifest.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Finite-difference gradient check of host models at toy size.
    Gradcheck(GradcheckArgs),
    /// Pairwise attention against the workspace as n_s grows.
    Bench(BenchArgs),
    /// Write attention maps and active sets for one example.
    DumpAttn(DumpArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    task: String,
    /// Training samples (images for Sort-of-CLEVR).
    #[arg(long)]
    n: usize,
    /// Test samples; defaults to n / 5.
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Output directory; defaults to the data root layout used by `train`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

#[derive(Args)]
struct ModelFlags {
    #[arg(long)]
    host: Option<String>,
    /// Reset the workspace at every layer or step.
    #[arg(long)]
    no_persistence: bool,
    /// Shorthand for --host tr_2xsa.
    #[arg(long = "2xsa")]
    two_x_sa: bool,
    /// Keep pairwise self-attention next to the workspace.
    #[arg(long)]
    sw_plus_sa: bool,
    /// Number of memory slots n_m.
    #[arg(long)]
    slots: Option<usize>,
    /// Write competition size k.
    #[arg(long)]
    topk: Option<usize>,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(h) = &self.host {
            cfg.model.host = Host::parse(h)?;
        }
        if self.two_x_sa {
            cfg.model.host = Host::Tr2xSa;
        }
        if self.no_persistence {
            cfg.model.persistence = false;
        }
        if self.sw_plus_sa {
            cfg.model.sw_plus_sa = true;
        }
        if let Some(n) = self.slots {
            cfg.model.n_m = n;
        }
        if let Some(k) = self.topk {
            cfg.model.topk = Some(k);
        }
        Ok(())
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run configuration; defaults are used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in configuration: smoke, triangles-desk or clevr-desk.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Override a config value, e.g. `--set train.epochs=3`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    resume: bool,
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset file; otherwise the split is regenerated from the checkpoint config.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Write per-sample results as CSV.
    #[arg(long)]
    per_sample: Option<PathBuf>,
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Hosts to check (comma separated); all seven by default.
    #[arg(long, value_delimiter = ',')]
    host: Vec<String>,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Break a backward rule on purpose: `tanh` or `softmax`.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256,512")]
    ns: Vec<usize>,
    #[arg(long, default_value_t = 8)]
    n_m: usize,
    #[arg(long, default_value_t = 16)]
    d: usize,
    #[arg(long, default_value_t = 9)]
    repeats: usize,
    /// Minimum duration of one timed repeat in milliseconds.
    #[arg(long, default_value_t = 20)]
    min_run_ms: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Config for a freshly initialised model when no checkpoint is given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(Error::config(format!("unknown split {s:?}")).into()),
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let kind = TaskKind::parse(&a.task)?;
    let mut task = TaskConfig {
        kind,
        n_train: a.n,
        n_test: a.n_test.unwrap_or((a.n / 5).max(1)),
        seed: a.seed,
        ..Default::default()
    };
    if let Some(s) = a.image_size {
        task.image_size = s;
    }
    if let Some(v) = a.vocab {
        task.vocab = v;
    }
    if let Some(l) = a.seq_len {
        task.seq_len = l;
    }
    let cfg = RunConfig {
        task,
        ..Default::default()
    };
    for split in [Split::Train, Split::Test] {
        let path = match (&a.out, &a.data_root) {
            (Some(dir), _) => dir.join(format!("{}.swds", split.name())),
            (None, Some(root)) => train::dataset_path(root, &cfg, split),
            (None, None) => bail!(Error::config(format!("give --out or set {DATA_ROOT_ENV}"))),
        };
        let ds = tasks::generate(&cfg.task, split)?;
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(Error::Io)?;
        }
        ds.save(&path)?;
        println!("{} {} records -> {}", split.name(), ds.n_records(), path.display());
    }
    Ok(())
}

fn preset(name: &str) -> Result<RunConfig> {
    Ok(match name {
        "smoke" => RunConfig::smoke(),
        "triangles-desk" => RunConfig::triangles_desk(Host::TrHsw),
        "clevr-desk" => RunConfig::clevr_desk(true),
        _ => bail!(Error::config(format!("unknown preset {name:?}"))),
    })
}

fn load_config(path: Option<&Path>, overrides: &[String], flags: &ModelFlags) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply(&mut cfg, overrides, flags)?;
    Ok(cfg)
}

fn apply(cfg: &mut RunConfig, overrides: &[String], flags: &ModelFlags) -> Result<()> {
    flags.apply(cfg)?;
    for o in overrides {
        cfg.set(o)?;
    }
    Ok(())
}

/// Reject an invalid config before any data is generated.
fn check_config(cfg: &RunConfig) -> Result<Vec<String>> {
    let spec = InputSpec::for_task(&cfg.task)?;
    let (_, _, warnings) = Model::build::<f32>(&cfg.model, &spec)?;
    Ok(warnings)
}

fn scale_notes(cfg: &RunConfig) -> Vec<String> {
    let mut notes = Vec::new();
    let t = &cfg.train;
    if t.epochs < 200 {
        notes.push(format!("epochs reduced to {} (reference setups train up to 200)", t.epochs));
    }
    if cfg.task.kind == TaskKind::Triangles && cfg.task.image_size != 64 {
        notes.push(format!("triangle images at {0}x{0} instead of 64x64", cfg.task.image_size));
    }
    if cfg.model.n_layers < 4 || cfg.model.n_h < 256 {
        notes.push(format!(
            "model reduced to {} layers of width {}",
            cfg.model.n_layers, cfg.model.n_h
        ));
    }
    notes
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.preset {
        Some(name) => {
            let mut cfg = preset(name)?;
            apply(&mut cfg, &a.overrides, &a.model)?;
            cfg
        }
        None => load_config(a.config.as_deref(), &a.overrides, &a.model)?,
    };
    if let Some(t) = &a.task {
        cfg.task.kind = TaskKind::parse(t)?;
    }
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
        cfg.model.seed = s;
    }
    let warnings = check_config(&cfg)?;
    let started = train::unix_now();
    let (train_set, test_set) = train::prepare_data(&cfg, a.data_root.as_deref())?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        resume: a.resume,
        max_epochs_this_run: None,
        quiet: a.quiet,
    };
    let outcome = train::train(&cfg, &train_set, &test_set, &opts)?;
    let paths = RunPaths::new(&a.out);
    let mut notes = scale_notes(&cfg);
    notes.extend(warnings);
    let manifest = RunManifest {
        seed: cfg.train.seed,
        config: cfg,
        build: train::build_id(),
        started_unix: started,
        finished_unix: train::unix_now(),
        final_test: outcome.final_test.clone(),
        best_test_accuracy: outcome.best_test_accuracy,
        epochs_run: outcome.epochs_run,
        artifacts: [&paths.metrics, &paths.best, &paths.last]
            .iter()
            .map(|p| p.display().to_string())
            .collect(),
        notes,
    };
    manifest.save(&paths.manifest)?;
    println!("{}", serde_json::to_string(&outcome.final_test)?);
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(RunConfig, Model, ParamStore<f32>)> {
    let ck = checkpoint::load::<f32>(path)?;
    let cfg = RunConfig::from_toml(&ck.meta.config)?;
    let spec = InputSpec::for_task(&cfg.task)?;
    let (model, mut store, _) = Model::build::<f32>(&cfg.model, &spec)?;
    store.load_from(&ck.params)?;
    Ok((cfg, model, store))
}

fn dataset_for(cfg: &RunConfig, data: Option<&Path>, split: Split, root: Option<&Path>) -> Result<Dataset> {
    if let Some(p) = data {
        let ds = Dataset::load(p)?;
        if ds.header.task.kind != cfg.task.kind {
            bail!(Error::config(format!(
                "dataset holds {} but the model was trained on {}",
                ds.header.task.kind.name(),
                cfg.task.kind.name()
            )));
        }
        return Ok(ds);
    }
    let (tr, te) = train::prepare_data(cfg, root)?;
    Ok(match split {
        Split::Train => tr,
        Split::Test => te,
    })
}

fn eval(a: EvalArgs) -> Result<()> {
    let (cfg, model, store) = load_checkpoint(&a.checkpoint)?;
    let ds = dataset_for(&cfg, a.data.as_deref(), parse_split(&a.split)?, a.data_root.as_deref())?;
    let results = train::evaluate_samples(&model, &store, &ds)?;
    if let Some(p) = &a.per_sample {
        let mut csv = String::from("index,loss,correct,total,relational\n");
        for (i, r) in results.iter().enumerate() {
            let rel = r.relational.map_or(String::new(), |b| (b as u8).to_string());
            csv.push_str(&format!("{i},{:e},{},{},{rel}\n", r.loss, r.correct, r.total));
        }
        std::fs::write(p, csv).map_err(Error::Io)?;
    }
    println!("{}", serde_json::to_string(&train::summarize(&results))?);
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let hosts = if a.host.is_empty() {
        Host::ALL.to_vec()
    } else {
        a.host.iter().map(|h| Host::parse(h)).collect::<sharedws::error::Result<_>>()?
    };
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some("tanh") => Some(Fault::TanhBackward),
        Some("softmax") => Some(Fault::SoftmaxBackward),
        Some(f) => bail!(Error::config(format!("unknown fault {f:?}"))),
    };
    let opts = GradCheckOptions {
        eps: a.eps,
        tol: a.tol,
        ..Default::default()
    };
    let mut failed = Vec::new();
    for host in hosts {
        let r = check_host_with(host, opts, fault)?;
        println!(
            "{:<8} {}  max rel err {:.3e}  ({} tensors)",
            host.name(),
            if r.passed { "pass" } else { "FAIL" },
            r.max_rel_err,
            r.params.len()
        );
        if !r.passed {
            failed.push(host.name());
        }
    }
    if !failed.is_empty() {
        bail!(Error::numeric(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let opts = BenchOptions {
        repeats: a.repeats.max(5),
        min_run: Duration::from_millis(a.min_run_ms),
        ..Default::default()
    };
    let results = run_scaling(&a.ns, a.n_m, a.d, &opts)?;
    let csv = to_csv(&results);
    match &a.out {
        Some(p) => std::fs::write(p, &csv).map_err(Error::Io)?,
        None => print!("{csv}"),
    }
    if a.ns.len() >= 2 {
        for m in [Mechanism::Pairwise, Mechanism::Workspace] {
            eprintln!("{} log-log slope {:.3}", m.name(), wall_slope(&results, m));
        }
    }
    Ok(())
}

fn dump_attn(a: DumpArgs) -> Result<()> {
    let (cfg, model, store) = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => {
            let cfg = load_config(a.config.as_deref(), &a.overrides, &a.model)?;
            let spec = InputSpec::for_task(&cfg.task)?;
            let (model, store, _) = Model::build::<f32>(&cfg.model, &spec)?;
            (cfg, model, store)
        }
    };
    let ds = dataset_for(&cfg, a.data.as_deref(), parse_split(&a.split)?, a.data_root.as_deref())?;
    if a.index >= ds.len() {
        bail!(Error::config(format!("index {} out of range for {} examples", a.index, ds.len())));
    }
    let ex = ds.example(a.index);
    let mut tape = Tape::<f32>::new();
    let mut ctx = Ctx::traced();
    model.forward(&mut tape, &store, &ex.input(), &mut ctx)?;
    let trace = ctx.trace.take().context("trace missing")?;
    std::fs::create_dir_all(&a.out).map_err(Error::Io)?;
    std::fs::write(a.out.join("attention.csv"), trace.attention_csv()).map_err(Error::Io)?;
    std::fs::write(a.out.join("activations.csv"), trace.activation_csv()).map_err(Error::Io)?;
    println!(
        "{} attention maps, {} active sets -> {}",
        trace.maps.len(),
        trace.active.len(),
        a.out.display()
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) | Some(Error::Shape { .. }) => 1,
        Some(Error::Numeric(_)) => 2,
        Some(Error::Io(_)) | Some(Error::Format(_)) => 3,
        None if err.downcast_ref::<std::io::Error>().is_some() => 3,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Bench(a) => bench(a),
        Command::DumpAttn(a) => dump_attn(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
