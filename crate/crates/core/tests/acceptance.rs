//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 7 and 8 are training comparisons. By default they run at the
//! reduced scale pinned below; set `SHAREDWS_ACCEPTANCE=desk` for the full
//! desk-scale runs (many CPU hours). Their outcome is reported but does
//! not fail the suite.

#[allow(dead_code, unused_imports)]
#[path = "datasets.rs"]
mod datasets;
#[allow(dead_code, unused_imports)]
#[path = "properties.rs"]
mod properties;
#[allow(dead_code, unused_imports)]
#[path = "training.rs"]
mod training;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sharedws::attention::Selection;
use sharedws::autodiff::Tape;
use sharedws::bench::{run_scaling, wall_slope, BenchOptions, Mechanism};
use sharedws::config::{Host, ModelConfig, RunConfig};
use sharedws::gradcheck::{check_host, GradCheckOptions};
use sharedws::models::{Model, ModelInput};
use sharedws::params::{Initializer, ParamStore};
use sharedws::tasks::{generate, Split};
use sharedws::tensor::Tensor;
use sharedws::train::{train, MetricRecord, TrainOptions};
use sharedws::workspace::{write_step, WriteOpts};

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const GRAD_BUDGET: Duration = Duration::from_secs(300);
const PRIMITIVE_TOL: f64 = 1e-12;
const ALGORITHM_TOL: f64 = 1e-10;
const SOFT_HARD_INPUTS: usize = 100;
const PERMUTATION_TRIALS: usize = 1000;
const PERMUTATION_TOL: f64 = 1e-5;
const CAUSAL_TRIALS: usize = 1000;
const SCALING_NS: [usize; 5] = [32, 64, 128, 256, 512];
const SCALING_SLOTS: usize = 8;
const SCALING_WIDTH: usize = 16;
const WORKSPACE_SLOPE: (f64, f64) = (0.8, 1.3);
const PAIRWISE_SLOPE: (f64, f64) = (1.7, 2.3);
const SCALING_BUDGET: Duration = Duration::from_secs(600);
const TRIANGLE_TARGET: f64 = 0.85;
const TRIANGLE_SLACK: f64 = 0.01;
const CLEVR_RELATIONAL_TARGET: f64 = 0.55;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst = 0f64;
    let mut failed = Vec::new();
    for (name, r) in gradients::workspace_ops() {
        worst = worst.max(r.max_rel_err);
        if !r.passed {
            failed.push(name);
        }
    }
    let opts = GradCheckOptions {
        eps: GRAD_EPS,
        tol: GRAD_TOL,
        ..Default::default()
    };
    for host in Host::ALL {
        let r = check_host(host, opts).unwrap();
        worst = worst.max(r.max_rel_err);
        if !r.passed {
            failed.push(host.name().to_string());
        }
    }
    let took = start.elapsed();
    outcome(
        failed.is_empty() && took < GRAD_BUDGET,
        format!("max rel err {worst:.2e} (tol {GRAD_TOL:e}), {:.1} s, failed {failed:?}", took.as_secs_f64()),
    )
}

fn c2_oracles() -> Outcome {
    let prim = oracles::primitives().max(oracles::heads());
    let ws = oracles::write_gate_broadcast();
    let rims = oracles::rims_step();
    let tims = oracles::tims_layer();
    let alg = ws.max(rims).max(tims);
    outcome(
        prim <= PRIMITIVE_TOL && alg <= ALGORITHM_TOL,
        format!("primitives {prim:.1e}, write/gate/broadcast {ws:.1e}, rims step {rims:.1e}, tims layer {tims:.1e}"),
    )
}

fn c3_soft_hard() -> Outcome {
    let spec = models::image_spec();
    let soft_cfg = models::small(Host::TrSsw);
    let hard_cfg = ModelConfig {
        host: Host::TrHsw,
        topk: Some(spec.positions(true)),
        ..soft_cfg.clone()
    };
    let (soft, s_store, _) = Model::build::<f32>(&soft_cfg, &spec).unwrap();
    let (hard, h_store, _) = Model::build::<f32>(&hard_cfg, &spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut differing = 0;
    for _ in 0..SOFT_HARD_INPUTS {
        let px = models::pixels(&mut rng, 256);
        let input = ModelInput::Image { pixels: &px, question: None };
        let bits = |t: Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(soft.logits(&s_store, &input).unwrap()) != bits(hard.logits(&h_store, &input).unwrap()) {
            differing += 1;
        }
    }
    outcome(differing == 0, format!("{differing}/{SOFT_HARD_INPUTS} inputs differ bitwise"))
}

fn c4_permutation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0f64;
    for trial in 0..PERMUTATION_TRIALS {
        let (n_s, n_m, d, n_l) = (rng.gen_range(1..=24), rng.gen_range(1..=8), 6, 4);
        let selection = if trial % 2 == 0 {
            Selection::Soft
        } else {
            Selection::TopK(rng.gen_range(1..=n_s))
        };
        let mut init = Initializer::new(rng.gen());
        let mut store = ParamStore::<f32>::new();
        let p = properties::proj(&mut store, &mut init, "w", n_l, d, n_l);
        let m: Tensor<f32> = init.uniform(&[n_m, n_l], 1.0);
        let r: Tensor<f32> = init.uniform(&[n_s, d], 1.0);
        let perm = properties::permutation(n_s, rng.gen());
        let rp = Tensor::from_vec(&[n_s, d], properties::permute_rows(r.data(), d, &perm)).unwrap();
        let mut tape = Tape::new();
        let vm = tape.constant(m);
        let (a, b) = (tape.constant(r), tape.constant(rp));
        let opts = || WriteOpts {
            selection,
            ..Default::default()
        };
        let x = write_step(&mut tape, &store, &p, vm, a, opts()).unwrap().candidate;
        let y = write_step(&mut tape, &store, &p, vm, b, opts()).unwrap().candidate;
        worst = worst.max(tape.value(x).max_abs_diff(tape.value(y)));
    }
    outcome(
        worst <= PERMUTATION_TOL,
        format!("max |diff| {worst:.2e} over {PERMUTATION_TRIALS} trials (tol {PERMUTATION_TOL:e}, f32)"),
    )
}

fn c5_causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut leaks = Vec::new();
    for host in Host::ALL {
        let (m, store, _) = Model::build::<f32>(&models::small(host), &models::token_spec()).unwrap();
        let mut changed = 0;
        for _ in 0..CAUSAL_TRIALS {
            let len = rng.gen_range(2..=8);
            let toks: Vec<usize> = (0..len).map(|_| rng.gen_range(0..5)).collect();
            let cut = rng.gen_range(0..len - 1);
            let mut other = toks.clone();
            let at = rng.gen_range(cut + 1..len);
            other[at] = (other[at] + rng.gen_range(1..5)) % 5;
            let a = m.logits(&store, &ModelInput::Tokens(&toks)).unwrap();
            let b = m.logits(&store, &ModelInput::Tokens(&other)).unwrap();
            let past = (cut + 1) * a.shape()[1];
            let bits = |s: &[f32]| s.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            if bits(&a.data()[..past]) != bits(&b.data()[..past]) {
                changed += 1;
            }
        }
        if changed > 0 {
            leaks.push(format!("{} {changed}", host.name()));
        }
    }
    outcome(
        leaks.is_empty(),
        format!("{CAUSAL_TRIALS} perturbations per host, all 7 hosts; past logits changed: {leaks:?}"),
    )
}

fn c6_scaling() -> Outcome {
    let start = Instant::now();
    let results = run_scaling(&SCALING_NS, SCALING_SLOTS, SCALING_WIDTH, &BenchOptions::default()).unwrap();
    let ws = wall_slope(&results, Mechanism::Workspace);
    let pw = wall_slope(&results, Mechanism::Pairwise);
    let took = start.elapsed();
    let inside = |s: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&s);
    outcome(
        inside(ws, WORKSPACE_SLOPE) && inside(pw, PAIRWISE_SLOPE) && took < SCALING_BUDGET,
        format!(
            "workspace slope {ws:.3} in {WORKSPACE_SLOPE:?}, pairwise slope {pw:.3} in {PAIRWISE_SLOPE:?}, {:.0} s",
            took.as_secs_f64()
        ),
    )
}

#[derive(Clone, Copy, PartialEq)]
enum Scale {
    Reduced,
    Desk,
}

struct Run {
    epochs_to_target: Option<usize>,
    final_accuracy: f64,
}

fn run(cfg: &RunConfig, reached: impl Fn(&MetricRecord) -> bool) -> Run {
    let train_set = generate(&cfg.task, Split::Train).unwrap();
    let test_set = generate(&cfg.task, Split::Test).unwrap();
    let opts = TrainOptions {
        quiet: true,
        ..Default::default()
    };
    let out = train(cfg, &train_set, &test_set, &opts).unwrap();
    let test: Vec<&MetricRecord> = out.history.iter().filter(|r| r.split == "test").collect();
    Run {
        epochs_to_target: test.iter().find(|r| reached(r)).map(|r| r.epoch),
        final_accuracy: test.last().map_or(0.0, |r| r.accuracy),
    }
}

/// Median with "never reached" counted as later than any epoch.
fn median_epochs(runs: &[Run]) -> Option<usize> {
    let mut e: Vec<usize> = runs.iter().map(|r| r.epochs_to_target.unwrap_or(usize::MAX)).collect();
    e.sort_unstable();
    Some(e[e.len() / 2]).filter(|&v| v != usize::MAX)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn show(e: Option<usize>) -> String {
    e.map_or("never".into(), |v| v.to_string())
}

fn seeds(scale: Scale) -> Vec<u64> {
    match scale {
        Scale::Desk => vec![1, 2, 3],
        Scale::Reduced => vec![1],
    }
}

fn triangle_config(host: Host, seed: u64, scale: Scale) -> RunConfig {
    let mut cfg = RunConfig::triangles_desk(host);
    if scale == Scale::Reduced {
        cfg.model.n_layers = 2;
        cfg.model.n_h = 32;
        cfg.model.ffn_dim = 64;
        cfg.task.n_train = 1000;
        cfg.task.n_test = 200;
        cfg.train.epochs = 6;
    }
    cfg.model.seed = seed;
    cfg.train.seed = seed;
    cfg
}

fn c7_triangles(scale: Scale) -> Outcome {
    let mut summary = Vec::new();
    let mut medians = Vec::new();
    for host in [Host::Tr, Host::TrHsw] {
        let runs: Vec<Run> = seeds(scale)
            .into_iter()
            .map(|s| run(&triangle_config(host, s, scale), |r| r.accuracy >= TRIANGLE_TARGET))
            .collect();
        let e = median_epochs(&runs);
        let acc = median(runs.iter().map(|r| r.final_accuracy).collect());
        summary.push(format!("{} epochs {} final acc {acc:.3}", host.name(), show(e)));
        medians.push((e, acc));
    }
    let ((tr_e, tr_acc), (ws_e, ws_acc)) = (medians[0], medians[1]);
    let faster = match (ws_e, tr_e) {
        (Some(w), Some(t)) => w <= t,
        (Some(_), None) => true,
        (None, _) => false,
    };
    outcome(
        faster && ws_acc >= tr_acc - TRIANGLE_SLACK,
        format!("target {TRIANGLE_TARGET}: {}", summary.join("; ")),
    )
}

fn clevr_config(persistence: bool, seed: u64, scale: Scale) -> RunConfig {
    let mut cfg = RunConfig::clevr_desk(persistence);
    if scale == Scale::Reduced {
        cfg.model.n_layers = 2;
        cfg.model.n_h = 32;
        cfg.model.ffn_dim = 64;
        cfg.task.n_train = 200;
        cfg.task.n_test = 20;
        cfg.train.epochs = 5;
    }
    cfg.model.seed = seed;
    cfg.train.seed = seed;
    cfg
}

fn c8_persistence(scale: Scale) -> Outcome {
    let reached = |r: &MetricRecord| r.relational_accuracy.is_some_and(|a| a >= CLEVR_RELATIONAL_TARGET);
    let mut medians = Vec::new();
    let mut summary = Vec::new();
    for persistence in [true, false] {
        let runs: Vec<Run> = seeds(scale)
            .into_iter()
            .map(|s| run(&clevr_config(persistence, s, scale), reached))
            .collect();
        let e = median_epochs(&runs);
        summary.push(format!(
            "{} epochs {}",
            if persistence { "persistent" } else { "no persistence" },
            show(e)
        ));
        medians.push(e);
    }
    let slower = match (medians[1], medians[0]) {
        (Some(off), Some(on)) => off > on,
        (None, Some(_)) => true,
        _ => false,
    };
    outcome(
        slower,
        format!("relational target {CLEVR_RELATIONAL_TARGET}: {}", summary.join("; ")),
    )
}

fn c9_datasets() -> Outcome {
    let n = datasets::SAMPLES;
    let tri = datasets::triangle_mismatches(32, n).len() + datasets::triangle_mismatches(64, n).len();
    let clevr = datasets::clevr_mismatches(n).len();
    let copy = datasets::copy_mismatches(n).len();
    outcome(
        tri + clevr + copy == 0,
        format!("{n} samples per task; mismatches: triangles {tri}, sort-of-clevr {clevr}, copy {copy}"),
    )
}

fn c10_determinism() -> Outcome {
    let (a, b) = training::smoke_twice();
    outcome(a == b, format!("smoke metrics {} bytes, identical: {}", a.len(), a == b))
}

fn main() -> ExitCode {
    // Behave like an ordinary test binary when asked to list tests.
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let scale = match std::env::var("SHAREDWS_ACCEPTANCE").as_deref() {
        Ok("desk") => Scale::Desk,
        _ => Scale::Reduced,
    };
    let scale_note = match scale {
        Scale::Desk => "desk scale",
        Scale::Reduced => "reduced scale",
    };
    type Check = Box<dyn Fn() -> Outcome>;
    let criteria: Vec<(u32, &str, bool, Check)> = vec![
        (1, "gradient suite", true, Box::new(c1_gradients)),
        (2, "oracle equivalence", true, Box::new(c2_oracles)),
        (3, "soft/hard equivalence", true, Box::new(c3_soft_hard)),
        (4, "permutation invariance", true, Box::new(c4_permutation)),
        (5, "causality", true, Box::new(c5_causality)),
        (6, "complexity scaling", true, Box::new(c6_scaling)),
        (7, "triangle convergence", false, Box::new(move || c7_triangles(scale))),
        (8, "persistence ablation", false, Box::new(move || c8_persistence(scale))),
        (9, "dataset oracles", true, Box::new(c9_datasets)),
        (10, "determinism", true, Box::new(c10_determinism)),
    ];
    let mut fatal = 0;
    for (id, name, required, check) in criteria {
        let start = Instant::now();
        let o = check();
        let mut line = format!(
            "{} {:>2} {:<24} {} [{:.1} s]",
            if o.pass { "PASS" } else { "FAIL" },
            id,
            name,
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !required {
            line.push_str(&format!(" ({scale_note}, reported only)"));
        }
        println!("{line}");
        if required && !o.pass {
            fatal += 1;
        }
    }
    if fatal > 0 {
        println!("{fatal} required criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
