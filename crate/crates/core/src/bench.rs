//! Communication cost scaling: one pairwise self-attention layer against
//! one workspace stage (write, then broadcast from the written memory) as
//! the number of specialists grows. The gated update touches only the
//! memory and is left out of the timed stage.
//!
//! Analytic counts are multiply-adds:
//!
//! - pairwise: `4·n_s·d²` projections (query, key, value, output) plus
//!   `2·n_s²·d` for scores and value mixing;
//! - workspace: see [`crate::workspace::write_cost`] and `broadcast_cost`;
//!   every term is linear in `n_s` or independent of it.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::attention::{multihead, AttnOpts, ProjectionSet, ProjectionSpec};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::workspace::{
    broadcast_cost, broadcast_read, init_memory_tensor, write_cost, write_step, CostDims, WriteOpts,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Pairwise,
    Workspace,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Pairwise => "pairwise",
            Mechanism::Workspace => "workspace",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchResult {
    pub mechanism: Mechanism,
    pub n_s: usize,
    pub n_m: usize,
    pub d: usize,
    pub flops_analytic: u64,
    /// Median over repeats of the time per forward pass.
    pub wall_ns: f64,
    /// Estimated bytes read and written per pass at 32-bit.
    pub bytes_touched: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlopCount {
    pub communication: u64,
    pub projection: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.communication + self.projection
    }
}

/// Single-head workspace dims with key and value width `d` and `n_l = d`.
pub fn workspace_dims(n_s: usize, n_m: usize, d: usize) -> CostDims {
    CostDims {
        n_s,
        n_m,
        d,
        n_l: d,
        n_heads: 1,
        key_dim: d,
        value_dim: d,
    }
}

/// Closed-form multiply-add count of one stage.
pub fn count_flops(mechanism: Mechanism, n_s: usize, n_m: usize, d: usize) -> Result<FlopCount> {
    if n_s == 0 || d == 0 {
        return Err(Error::config("n_s and d must be positive"));
    }
    match mechanism {
        Mechanism::Pairwise => {
            let (s, d) = (n_s as u64, d as u64);
            Ok(FlopCount {
                communication: 2 * s * s * d,
                projection: 4 * s * d * d,
            })
        }
        Mechanism::Workspace => {
            if n_m == 0 {
                return Err(Error::config("workspace needs n_m >= 1"));
            }
            let dims = workspace_dims(n_s, n_m, d);
            let parts = [write_cost(dims), broadcast_cost(dims)];
            Ok(FlopCount {
                communication: parts.iter().map(|p| p.communication).sum(),
                projection: parts.iter().map(|p| p.projection).sum(),
            })
        }
    }
}

fn bytes_touched(mechanism: Mechanism, n_s: usize, n_m: usize, d: usize) -> u64 {
    let (s, m, d) = (n_s as u64, n_m as u64, d as u64);
    let floats = match mechanism {
        // input, q/k/v/output activations, scores and weights, 4 weight matrices
        Mechanism::Pairwise => s * d * 5 + 2 * s * s + 4 * d * d,
        // input, projected keys/values, slot queries, scores both ways,
        // memory, read-out; weights of both sites
        Mechanism::Workspace => s * d * 5 + 4 * s * m + 5 * m * d + 6 * d * d,
    };
    4 * floats
}

struct Site {
    store: ParamStore<f32>,
    proj: ProjectionSet,
    read: Option<ProjectionSet>,
    memory: Option<ParamId>,
}

fn single_head(query_in: usize, kv_in: usize, out: usize, output_proj: bool) -> ProjectionSpec {
    ProjectionSpec {
        query_in,
        kv_in,
        out_dim: out,
        n_heads: 1,
        key_dim: out,
        value_dim: out,
        output_proj,
    }
}

fn build(mechanism: Mechanism, n_m: usize, d: usize) -> Result<Site> {
    let mut store = ParamStore::new();
    let mut init = Initializer::new(17);
    Ok(match mechanism {
        Mechanism::Pairwise => Site {
            proj: ProjectionSet::new(&mut store, &mut init, "sa", single_head(d, d, d, true))?,
            read: None,
            memory: None,
            store,
        },
        Mechanism::Workspace => {
            let proj = ProjectionSet::new(&mut store, &mut init, "write", single_head(d, d, d, false))?;
            let read = ProjectionSet::new(&mut store, &mut init, "read", single_head(d, d, d, false))?;
            let memory = store.add("memory", init_memory_tensor(&mut init, n_m, d)?)?;
            Site {
                proj,
                read: Some(read),
                memory: Some(memory),
                store,
            }
        }
    })
}

fn run_once(site: &Site, input: &Tensor<f32>) -> Result<f32> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let out = match (&site.read, site.memory) {
        (Some(read), Some(mem)) => {
            let m = tape.param(&site.store, mem);
            let w = write_step(&mut tape, &site.store, &site.proj, m, x, WriteOpts::default())?;
            let r = broadcast_read(&mut tape, &site.store, read, x, w.candidate, None)?;
            tape.add(x, r.read)?
        }
        _ => {
            let o = multihead(&mut tape, &site.store, &site.proj, x, x, AttnOpts::default())?;
            tape.add(x, o.out)?
        }
    };
    Ok(tape.data(out)[0])
}

/// One communication stage with a fixed random input, for external timers.
pub struct Stage {
    site: Site,
    input: Tensor<f32>,
}

impl Stage {
    pub fn new(mechanism: Mechanism, n_s: usize, n_m: usize, d: usize) -> Result<Self> {
        if n_s == 0 || d == 0 || (mechanism == Mechanism::Workspace && n_m == 0) {
            return Err(Error::config("stage dimensions must be positive"));
        }
        let site = build(mechanism, n_m, d)?;
        let input = Initializer::new(5).uniform(&[n_s, d], 1.0);
        Ok(Self { site, input })
    }

    /// One forward pass; returns the first output element.
    pub fn run(&self) -> Result<f32> {
        run_once(&self.site, &self.input)
    }
}

/// Smallest observable nonzero step of the monotonic clock.
pub fn timer_tick() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

#[derive(Clone, Copy, Debug)]
pub struct BenchOptions {
    pub repeats: usize,
    /// Lower bound on the duration of one timed repeat.
    pub min_run: Duration,
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            repeats: 9,
            min_run: Duration::from_millis(20),
            warmup: 2,
        }
    }
}

/// Inner loop length so that one repeat spans at least 100 timer ticks
/// and `min_run`.
fn calibrate(site: &Site, input: &Tensor<f32>, opts: &BenchOptions, tick: Duration) -> Result<usize> {
    let floor = opts.min_run.max(tick * 100);
    for _ in 0..opts.warmup {
        std::hint::black_box(run_once(site, input)?);
    }
    let mut inner = 1usize;
    loop {
        let t = Instant::now();
        for _ in 0..inner {
            std::hint::black_box(run_once(site, input)?);
        }
        if t.elapsed() >= floor {
            return Ok(inner);
        }
        inner *= 2;
    }
}

fn time_per_pass(site: &Site, input: &Tensor<f32>, inner: usize) -> Result<f64> {
    let t = Instant::now();
    for _ in 0..inner {
        std::hint::black_box(run_once(site, input)?);
    }
    Ok(t.elapsed().as_nanos() as f64 / inner as f64)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    xs[xs.len() / 2]
}

/// Time both mechanisms for every `n_s`, forward only, on the calling
/// thread. Repeats are interleaved across configurations so slow periods
/// of a shared machine do not land on a single size; each result is the
/// median over its repeats.
pub fn run_scaling(ns_list: &[usize], n_m: usize, d: usize, opts: &BenchOptions) -> Result<Vec<BenchResult>> {
    if n_m == 0 {
        return Err(Error::config("workspace needs n_m >= 1"));
    }
    let tick = timer_tick();
    let mut init = Initializer::new(5);
    let mut cases = Vec::new();
    for mechanism in [Mechanism::Pairwise, Mechanism::Workspace] {
        for &n_s in ns_list {
            let site = build(mechanism, n_m, d)?;
            let input = init.uniform(&[n_s, d], 1.0);
            let inner = calibrate(&site, &input, opts, tick)?;
            cases.push((mechanism, n_s, site, input, inner, Vec::new()));
        }
    }
    for _ in 0..opts.repeats.max(5) {
        for (_, _, site, input, inner, samples) in cases.iter_mut() {
            samples.push(time_per_pass(site, input, *inner)?);
        }
    }
    cases
        .into_iter()
        .map(|(mechanism, n_s, _, _, _, samples)| {
            Ok(BenchResult {
                mechanism,
                n_s,
                n_m,
                d,
                flops_analytic: count_flops(mechanism, n_s, n_m, d)?.total(),
                wall_ns: median(samples),
                bytes_touched: bytes_touched(mechanism, n_s, n_m, d),
            })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Slope of wall time over `n_s` for one mechanism.
pub fn wall_slope(results: &[BenchResult], mechanism: Mechanism) -> f64 {
    let rows: Vec<&BenchResult> = results.iter().filter(|r| r.mechanism == mechanism).collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.n_s as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.wall_ns).collect();
    loglog_slope(&xs, &ys)
}

pub fn to_csv(results: &[BenchResult]) -> String {
    let mut s = String::from("mechanism,n_s,n_m,d,flops_analytic,wall_ns,bytes_touched\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{},{:.1},{}\n",
            r.mechanism.name(),
            r.n_s,
            r.n_m,
            r.d,
            r.flops_analytic,
            r.wall_ns,
            r.bytes_touched
        ));
    }
    s
}
