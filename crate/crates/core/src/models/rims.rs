//! Recurrent independent mechanisms communicating through the workspace.
//!
//! At each step the specialists attend over the current input and a learned
//! null row; the `n_sel` specialists putting the most weight on the input
//! update through their own GRU, the rest keep their state. The selected
//! specialists' reads are written into memory (keys and values from
//! `[M; A]`) and the memory is broadcast back to all of them.

use crate::attention::{rank_topk, Dropout, ProjectionSet, Selection};
use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::workspace::{
    broadcast_read, gated_update, init_memory_tensor, reset, write_step, GateInput, GatingParams, WriteOpts,
};

use super::layers::{Embedder, Linear, Norm};
use super::transformer::workspace_projections;
use super::{stack_rows, ActiveSet, Ctx, InputSpec, ModelInput};

/// Input attention, per-specialist GRUs and workspace parameters.
/// Per-specialist weights are stacked along a leading `n_s` axis.
#[derive(Clone, Debug, PartialEq)]
pub struct RimsCell {
    pub n_s: usize,
    pub n_h: usize,
    pub d_in: usize,
    pub key_dim: usize,
    /// `[1, d_in]`
    pub null_row: ParamId,
    /// `[n_s, n_h, key_dim]`, one query projection per specialist.
    pub w_q: ParamId,
    /// `[d_in, key_dim]`, shared.
    pub w_e: ParamId,
    /// `[d_in, n_h]`, shared.
    pub w_v: ParamId,
    /// GRU weights `[n_s, n_h, 3 n_h]` and biases `[n_s, 1, 3 n_h]`, gates
    /// ordered reset, update, candidate.
    pub gru_wx: ParamId,
    pub gru_bx: ParamId,
    pub gru_wh: ParamId,
    pub gru_bh: ParamId,
    pub write: ProjectionSet,
    pub gating: GatingParams,
    pub read: ProjectionSet,
    pub init_memory: ParamId,
}

impl RimsCell {
    pub fn new<T: Scalar>(
        cfg: &ModelConfig,
        d_in: usize,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
    ) -> Result<Self> {
        let (n_s, n_h) = (cfg.n_s, cfg.n_h);
        let dk = cfg.ws_key_dim;
        let null_row = store.add("rims.null", init.uniform(&[1, d_in], 0.02))?;
        let w_q = store.add("rims.inp.w_q", init.linear(&[n_s, n_h, dk]))?;
        let w_e = store.add("rims.inp.w_e", init.linear(&[d_in, dk]))?;
        let w_v = store.add("rims.inp.w_v", init.linear(&[d_in, n_h]))?;
        let gru_wx = store.add("rims.gru.wx", init.linear(&[n_s, n_h, 3 * n_h]))?;
        let gru_bx = store.add("rims.gru.bx", init.uniform(&[n_s, 1, 3 * n_h], 1.0 / (n_h as f64).sqrt()))?;
        let gru_wh = store.add("rims.gru.wh", init.linear(&[n_s, n_h, 3 * n_h]))?;
        let gru_bh = store.add("rims.gru.bh", init.uniform(&[n_s, 1, 3 * n_h], 1.0 / (n_h as f64).sqrt()))?;
        let (write, gating, read) = workspace_projections(cfg, store, init, "rims.ws", n_h, n_h)?;
        let init_memory = store.add("memory.init", init_memory_tensor(init, cfg.n_m, cfg.slot_width())?)?;
        Ok(Self {
            n_s,
            n_h,
            d_in,
            key_dim: dk,
            null_row,
            w_q,
            w_e,
            w_v,
            gru_wx,
            gru_bx,
            gru_wh,
            gru_bh,
            write,
            gating,
            read,
            init_memory,
        })
    }
}

pub struct RimsStepOpts<'a> {
    pub n_sel: usize,
    /// Disable to observe the input/selection stage alone.
    pub broadcast: bool,
    pub include_memory_rows: bool,
    pub n_write_iters: usize,
    pub dropout: Option<&'a mut Dropout>,
}

#[derive(Clone, Debug)]
pub struct RimsStepOutput {
    /// New specialist states `[n_s, n_h]`.
    pub h: Var,
    /// States after the selective GRU update, before the broadcast.
    pub h_bar: Var,
    /// Selected specialists, ascending.
    pub selected: Vec<usize>,
    /// Input attention `[n_s, 2]` over (input, null).
    pub input_weights: Var,
    /// `s_k z W^v` for every specialist, `[n_s, n_h]`.
    pub reads: Var,
    pub memory: Var,
}

fn gru<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, cell: &RimsCell, x: Var, h: Var) -> Result<Var> {
    let (n_s, n_h) = (cell.n_s, cell.n_h);
    let x3 = tape.reshape(x, &[n_s, 1, n_h])?;
    let h3 = tape.reshape(h, &[n_s, 1, n_h])?;
    let wx = tape.param(store, cell.gru_wx);
    let bx = tape.param(store, cell.gru_bx);
    let wh = tape.param(store, cell.gru_wh);
    let bh = tape.param(store, cell.gru_bh);
    let gi = tape.matmul(x3, wx)?;
    let gi = tape.add(gi, bx)?;
    let gh = tape.matmul(h3, wh)?;
    let gh = tape.add(gh, bh)?;
    let part = |tape: &mut Tape<T>, v: Var, i: usize| tape.narrow(v, 2, i * n_h, n_h);
    let (ir, iz, in_) = (part(tape, gi, 0)?, part(tape, gi, 1)?, part(tape, gi, 2)?);
    let (hr, hz, hn) = (part(tape, gh, 0)?, part(tape, gh, 1)?, part(tape, gh, 2)?);
    let r = tape.add(ir, hr)?;
    let r = tape.sigmoid(r);
    let z = tape.add(iz, hz)?;
    let z = tape.sigmoid(z);
    let rn = tape.mul(r, hn)?;
    let n = tape.add(in_, rn)?;
    let n = tape.tanh(n);
    let keep = tape.one_minus(z);
    let a = tape.mul(keep, n)?;
    let b = tape.mul(z, h3)?;
    let out = tape.add(a, b)?;
    tape.reshape(out, &[n_s, n_h])
}

/// One recurrent step with workspace communication. `ws` holds the memory
/// `[n_m, n_l]` and is updated in place.
pub fn rims_sw_step<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    cell: &RimsCell,
    memory: Var,
    x_t: Var,
    h_prev: Var,
    mut opts: RimsStepOpts<'_>,
) -> Result<RimsStepOutput> {
    let (n_s, n_h) = (cell.n_s, cell.n_h);
    if opts.n_sel == 0 || opts.n_sel > n_s {
        return Err(Error::config(format!("n_sel {} outside 1..={n_s}", opts.n_sel)));
    }
    if tape.shape(h_prev) != [n_s, n_h] {
        return Err(Error::shape("rims_sw_step", tape.shape(h_prev), &[n_s, n_h]));
    }
    let null = tape.param(store, cell.null_row);
    let z = tape.concat(&[x_t, null], 0)?;
    // q_k = h_{t-1,k} W_k^q, one projection per specialist.
    let h3 = tape.reshape(h_prev, &[n_s, 1, n_h])?;
    let wq = tape.param(store, cell.w_q);
    let q = tape.matmul(h3, wq)?;
    let q = tape.reshape(q, &[n_s, cell.key_dim])?;
    let we = tape.param(store, cell.w_e);
    let kappa = tape.matmul(z, we)?;
    let kt = tape.transpose(kappa)?;
    let raw = tape.matmul(q, kt)?;
    let scores = tape.scale(raw, T::one() / T::of(cell.key_dim as f64).sqrt());
    let s = tape.softmax(scores);
    let on_input: Vec<T> = tape.data(s).chunks(2).map(|r| r[0]).collect();
    let selected = rank_topk(&on_input, opts.n_sel, None);
    let wv = tape.param(store, cell.w_v);
    let v = tape.matmul(z, wv)?;
    let mixed = match opts.dropout.as_deref_mut() {
        Some(d) if d.p > 0.0 => {
            let m = tape.constant(d.mask(tape.shape(s)));
            tape.mul(s, m)?
        }
        _ => s,
    };
    let reads = tape.matmul(mixed, v)?;

    let updated = gru(tape, store, cell, reads, h_prev)?;
    let mut keep = vec![T::zero(); n_s];
    for &k in &selected {
        keep[k] = T::one();
    }
    let m = tape.constant(Tensor::from_vec(&[n_s, 1], keep)?);
    let not_m = tape.one_minus(m);
    let a = tape.mul(m, updated)?;
    let b = tape.mul(not_m, h_prev)?;
    let h_bar = tape.add(a, b)?;

    let a_rows = tape.gather_rows(reads, &selected)?;
    let written = write_step(
        tape,
        store,
        &cell.write,
        memory,
        a_rows,
        WriteOpts {
            selection: Selection::Soft,
            include_memory_rows: opts.include_memory_rows,
            n_iters: opts.n_write_iters,
            mask: None,
            dropout: None,
        },
    )?;
    let new_memory = gated_update(tape, store, &cell.gating, written.candidate, memory, GateInput::Rows(reads))?;
    let h = if opts.broadcast {
        let r = broadcast_read(tape, store, &cell.read, h_bar, new_memory, None)?;
        tape.add(h_bar, r.read)?
    } else {
        h_bar
    };
    Ok(RimsStepOutput {
        h,
        h_bar,
        selected,
        input_weights: s,
        reads,
        memory: new_memory,
    })
}

#[derive(Clone, Debug)]
pub struct RimsModel {
    pub embed: Embedder,
    pub cell: RimsCell,
    pub final_ln: Norm,
    pub head: Linear,
}

impl RimsModel {
    pub fn new<T: Scalar>(
        cfg: &ModelConfig,
        input: &InputSpec,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
    ) -> Result<Self> {
        let embed = Embedder::new(store, init, input, cfg.n_h, false)?;
        let cell = RimsCell::new(cfg, cfg.n_h, store, init)?;
        let width = cfg.n_s * cfg.n_h;
        Ok(Self {
            embed,
            cell,
            final_ln: Norm::new(store, "final_ln", width)?,
            head: Linear::new(store, init, "head", width, input.n_out(), true)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        cfg: &ModelConfig,
        spec: &InputSpec,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &ModelInput<'_>,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        let e = self.embed.apply(tape, store, spec, input)?;
        let steps = tape.shape(e)[0];
        let width = cfg.n_s * cfg.n_h;
        let mut h = tape.constant(Tensor::zeros(&[cfg.n_s, cfg.n_h]));
        let mut memory = reset(tape, store, self.cell.init_memory, None)?.memory;
        let mut outputs = Vec::new();
        for t in 0..steps {
            if !cfg.persistence && t > 0 {
                memory = reset(tape, store, self.cell.init_memory, None)?.memory;
            }
            let x_t = tape.narrow(e, 0, t, 1)?;
            let out = rims_sw_step(
                tape,
                store,
                &self.cell,
                memory,
                x_t,
                h,
                RimsStepOpts {
                    n_sel: cfg.n_sel,
                    broadcast: true,
                    include_memory_rows: cfg.memory_rows_as_keys(),
                    n_write_iters: cfg.n_write_iters,
                    dropout: ctx.dropout(),
                },
            )?;
            if let Some(tr) = ctx.trace.as_mut() {
                tr.active.push(ActiveSet {
                    stage: t,
                    position: 0,
                    members: out.selected.clone(),
                });
            }
            h = out.h;
            memory = out.memory;
            if spec.is_sequence() {
                outputs.push(tape.reshape(h, &[1, width])?);
            }
        }
        let flat = if spec.is_sequence() {
            stack_rows(tape, &outputs)?
        } else {
            tape.reshape(h, &[1, width])?
        };
        let flat = self.final_ln.apply(tape, store, flat)?;
        self.head.apply(tape, store, flat)
    }
}
