//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many evenly spaced coordinates per parameter.
    pub max_coords: Option<usize>,
    /// Denominator floor of the relative error.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: None,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval<F>(f: &F, store: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", v.shape(), &[1]));
    }
    Ok(v.data()[0])
}

/// Compare autodiff gradients of the scalar `f` against central finite
/// differences for every parameter in `store`.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    grad_check_with(store, f, opts, |_| {})
}

/// Like [`grad_check`], with a hook to configure the tape used for the
/// analytic pass (fault injection in negative-control tests).
pub fn grad_check_with<F, H>(
    store: &ParamStore<f64>,
    f: F,
    opts: GradCheckOptions,
    prepare: H,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    H: Fn(&mut Tape<f64>),
{
    let base = eval(&f, store)?;
    let again = eval(&f, store)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::numeric(format!(
            "non-deterministic forward pass: {base:e} vs {again:e}"
        )));
    }
    let mut tape = Tape::new();
    prepare(&mut tape);
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;

    let mut work = store.clone();
    let mut params = Vec::new();
    for id in store.ids() {
        let n = store.get(id).len();
        let zeros = vec![0.0; n];
        let analytic = grads.param(id).unwrap_or(&zeros);
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            checked: coords.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for &i in &coords {
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.eps;
            let plus = eval(&f, &work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.eps;
            let minus = eval(&f, &work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[i];
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.max_rel_err = check.max_rel_err.max(rel_err(a, numeric, opts.floor));
        }
        params.push(check);
    }
    let max_rel_err = params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_err <= opts.tol,
        max_rel_err,
        tol: opts.tol,
        params,
    })
}

/// End-to-end check of a host at [`crate::models::toy_config`] dims: the
/// scalar is the cross-entropy of the toy image against class 1.
pub fn check_host(host: crate::config::Host, opts: GradCheckOptions) -> Result<GradCheckReport> {
    check_host_with(host, opts, None)
}

/// [`check_host`] with an optional broken backward rule in the analytic pass.
pub fn check_host_with(
    host: crate::config::Host,
    opts: GradCheckOptions,
    fault: Option<crate::autodiff::Fault>,
) -> Result<GradCheckReport> {
    use crate::models::{toy_config, toy_pixels, Ctx, Model, ModelInput};
    let (cfg, spec) = toy_config(host);
    let (model, store, _) = Model::build::<f64>(&cfg, &spec)?;
    let pixels = toy_pixels();
    grad_check_with(
        &store,
        |tape, st| {
            let input = ModelInput::Image {
                pixels: &pixels,
                question: None,
            };
            let logits = model.forward(tape, st, &input, &mut Ctx::eval())?;
            tape.cross_entropy(logits, &[Some(1)])
        },
        opts,
        |tape| {
            if let Some(f) = fault {
                tape.inject_fault(f);
            }
        },
    )
}
