//! Transformer with independent mechanisms communicating through the
//! workspace.
//!
//! The hidden state `[T, D]` is split into `n_b` mechanisms of width
//! `D / n_b`. At each position the mechanisms compete through a softmax over
//! scalar scores; the top `n_sel` self-attend and write. Positions are
//! folded into the batch for the workspace, so each position keeps its own
//! memory `[n_m, n_l]` whose rows are written by that position's
//! mechanisms.

use crate::attention::{multihead, rank_topk, AttnOpts, Dropout, ProjectionSet, ProjectionSpec, Selection};
use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::workspace::{
    broadcast_read, gated_update, init_memory_tensor, reset, write_step, GateInput, GatingParams, WriteOpts,
};

use super::layers::{causal_mask, Embedder, Ffn, Linear, Norm};
use super::transformer::{pairwise_layer, workspace_projections, Block, Layer};
use super::{ActiveSet, Ctx, InputSpec, ModelInput};

#[derive(Clone, Debug, PartialEq)]
pub struct TimsLayer {
    pub n_b: usize,
    pub width: usize,
    /// Competition projections `[n_b, width, 1]`.
    pub w_c: ParamId,
    /// Per-mechanism self-attention.
    pub sa: Vec<ProjectionSet>,
    /// `A = a W^v`, `[width, n_l]`.
    pub w_v: ParamId,
    pub write: ProjectionSet,
    pub gating: GatingParams,
    /// Broadcast projections shared by all mechanisms.
    pub read: ProjectionSet,
}

impl TimsLayer {
    pub fn new<T: Scalar>(
        cfg: &ModelConfig,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
    ) -> Result<Self> {
        let n_b = cfg.n_s;
        if n_b == 0 || cfg.n_h % n_b != 0 {
            return Err(Error::config(format!("{n_b} mechanisms do not divide width {}", cfg.n_h)));
        }
        let width = cfg.n_h / n_b;
        let heads = if width % cfg.n_heads == 0 { cfg.n_heads } else { 1 };
        let n_l = cfg.slot_width();
        let w_c = store.add(format!("{prefix}.w_c"), init.linear(&[n_b, width, 1]))?;
        let sa = (0..n_b)
            .map(|k| {
                ProjectionSet::new(
                    store,
                    init,
                    &format!("{prefix}.mech{k}.sa"),
                    ProjectionSpec {
                        query_in: width,
                        kv_in: width,
                        out_dim: width,
                        n_heads: heads,
                        key_dim: width / heads,
                        value_dim: width / heads,
                        output_proj: true,
                    },
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let w_v = store.add(format!("{prefix}.w_v"), init.linear(&[width, n_l]))?;
        let (write, gating, read) = workspace_projections(cfg, store, init, &format!("{prefix}.ws"), width, n_l)?;
        Ok(Self {
            n_b,
            width,
            w_c,
            sa,
            w_v,
            write,
            gating,
            read,
        })
    }
}

pub struct TimsOpts<'a> {
    pub n_sel: usize,
    pub mask: Option<&'a [bool]>,
    pub n_write_iters: usize,
    pub dropout: Option<&'a mut Dropout>,
}

#[derive(Clone, Debug)]
pub struct TimsOutput {
    pub h: Var,
    pub memory: Var,
    /// Active mechanisms per position, ascending.
    pub active: Vec<Vec<usize>>,
    /// Competition scores `c`, `[T, n_b]`.
    pub scores: Var,
}

/// One modular layer. `memory` is `[T, n_m, n_l]`.
pub fn tims_sw_layer<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    layer: &TimsLayer,
    memory: Var,
    h: Var,
    mut opts: TimsOpts<'_>,
) -> Result<TimsOutput> {
    let (n_b, w) = (layer.n_b, layer.width);
    let shape = tape.shape(h).to_vec();
    if shape.len() != 2 || shape[1] != n_b * w {
        return Err(Error::shape("tims_sw_layer", &shape, &[0, n_b * w]));
    }
    if opts.n_sel == 0 || opts.n_sel > n_b {
        return Err(Error::config(format!("n_sel {} outside 1..={n_b}", opts.n_sel)));
    }
    let t = shape[0];
    let wc = tape.param(store, layer.w_c);
    let mut hk = Vec::with_capacity(n_b);
    let mut ck = Vec::with_capacity(n_b);
    for k in 0..n_b {
        let part = tape.narrow(h, 1, k * w, w)?;
        let wk = tape.narrow(wc, 0, k, 1)?;
        let wk = tape.reshape(wk, &[w, 1])?;
        ck.push(tape.matmul(part, wk)?);
        hk.push(part);
    }
    let logits = tape.concat(&ck, 1)?;
    let c = tape.softmax(logits);
    let mut keep = vec![T::zero(); t * n_b];
    let mut active = Vec::with_capacity(t);
    for (p, row) in tape.data(c).chunks(n_b).enumerate() {
        let idx = rank_topk(row, opts.n_sel, None);
        for &k in &idx {
            keep[p * n_b + k] = T::one();
        }
        active.push(idx);
    }
    let keep = tape.constant(Tensor::from_vec(&[t, n_b], keep)?);
    let c_star = tape.mul(c, keep)?;

    let wv = tape.param(store, layer.w_v);
    let mut h_bar = Vec::with_capacity(n_b);
    let mut a_rows = Vec::with_capacity(n_b);
    for k in 0..n_b {
        let cs = tape.narrow(c_star, 1, k, 1)?;
        let sa = multihead(
            tape,
            store,
            &layer.sa[k],
            hk[k],
            hk[k],
            AttnOpts {
                mask: opts.mask,
                selection: Selection::Soft,
                dropout: opts.dropout.as_deref_mut(),
            },
        )?;
        let scaled = tape.mul(cs, sa.out)?;
        let hb = tape.add(scaled, hk[k])?;
        let a = tape.mul(cs, hb)?;
        let ak = tape.matmul(a, wv)?;
        let n_l = tape.shape(ak)[1];
        a_rows.push(tape.reshape(ak, &[t, 1, n_l])?);
        h_bar.push(hb);
    }
    let a_all = tape.concat(&a_rows, 1)?;
    let written = write_step(
        tape,
        store,
        &layer.write,
        memory,
        a_all,
        WriteOpts {
            selection: Selection::Soft,
            include_memory_rows: true,
            n_iters: opts.n_write_iters,
            mask: None,
            dropout: None,
        },
    )?;
    let new_memory = gated_update(tape, store, &layer.gating, written.candidate, memory, GateInput::Rows(a_all))?;
    let mut out = Vec::with_capacity(n_b);
    for hb in h_bar {
        let r = broadcast_read(tape, store, &layer.read, hb, new_memory, None)?;
        out.push(tape.add(hb, r.read)?);
    }
    Ok(TimsOutput {
        h: tape.concat(&out, 1)?,
        memory: new_memory,
        active,
        scores: c,
    })
}

#[derive(Clone, Debug)]
pub struct TimsModel {
    pub embed: Embedder,
    pub pre: Vec<Layer>,
    pub modular: TimsLayer,
    pub modular_ffn: Ffn,
    pub n_modular: usize,
    pub post: Vec<Layer>,
    pub init_memory: ParamId,
    pub final_ln: Norm,
    pub head: Linear,
}

impl TimsModel {
    pub fn new<T: Scalar>(
        cfg: &ModelConfig,
        input: &InputSpec,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
    ) -> Result<Self> {
        let embed = Embedder::new(store, init, input, cfg.n_h, !input.is_sequence())?;
        let [n_pre, n_mod, n_post] = cfg.layout();
        let pre = (0..n_pre)
            .map(|i| pairwise_layer(cfg, store, init, &format!("pre{i}"), 1))
            .collect::<Result<Vec<_>>>()?;
        let modular = TimsLayer::new(cfg, store, init, "tims")?;
        let modular_ffn = Ffn::new(store, init, "tims.ffn", cfg.n_h, cfg.ffn_dim)?;
        let post = (0..n_post)
            .map(|i| pairwise_layer(cfg, store, init, &format!("post{i}"), 1))
            .collect::<Result<Vec<_>>>()?;
        let init_memory = store.add("memory.init", init_memory_tensor(init, cfg.n_m, cfg.slot_width())?)?;
        Ok(Self {
            embed,
            pre,
            modular,
            modular_ffn,
            n_modular: n_mod,
            post,
            init_memory,
            final_ln: Norm::new(store, "final_ln", cfg.n_h)?,
            head: Linear::new(store, init, "head", cfg.n_h, input.n_out(), true)?,
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
        let causal = spec.is_sequence();
        let mut h = self.embed.apply(tape, store, spec, input)?;
        let t = tape.shape(h)[0];
        let mask = causal.then(|| causal_mask(t));
        let pairwise = |tape: &mut Tape<T>, ctx: &mut Ctx, layer: &Layer, mut h: Var| -> Result<Var> {
            if let Block::Pairwise(blocks) = &layer.block {
                for sa in blocks {
                    h = sa.apply(tape, store, h, mask.as_deref(), ctx.dropout())?.0;
                }
            }
            layer.ffn.apply(tape, store, h)
        };
        for layer in &self.pre {
            h = pairwise(tape, ctx, layer, h)?;
        }
        let mut memory = reset(tape, store, self.init_memory, Some(t))?.memory;
        for l in 0..self.n_modular {
            if !cfg.persistence && l > 0 {
                memory = reset(tape, store, self.init_memory, Some(t))?.memory;
            }
            let out = tims_sw_layer(
                tape,
                store,
                &self.modular,
                memory,
                h,
                TimsOpts {
                    n_sel: cfg.n_sel,
                    mask: mask.as_deref(),
                    n_write_iters: cfg.n_write_iters,
                    dropout: ctx.dropout(),
                },
            )?;
            if let Some(tr) = ctx.trace.as_mut() {
                for (p, members) in out.active.iter().enumerate() {
                    tr.active.push(ActiveSet {
                        stage: self.pre.len() + l,
                        position: p,
                        members: members.clone(),
                    });
                }
            }
            memory = out.memory;
            h = self.modular_ffn.apply(tape, store, out.h)?;
        }
        for layer in &self.post {
            h = pairwise(tape, ctx, layer, h)?;
        }
        let hf = if causal { h } else { tape.narrow(h, 0, 0, 1)? };
        let hf = self.final_ln.apply(tape, store, hf)?;
        self.head.apply(tape, store, hf)
    }
}
