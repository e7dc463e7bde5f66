//! Transformer hosts: plain (shared or separate layer parameters), twice
//! self-attention, and the shared-workspace variants in which positions
//! communicate only through the slot memory.
//!
//! With token inputs the host is causal and each position keeps its own
//! copy of the workspace, written only by positions up to itself.

use crate::attention::{ProjectionSet, ProjectionSpec, Selection};
use crate::autodiff::{Tape, Var};
use crate::config::{Host, ModelConfig};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::workspace::{
    broadcast_read, gated_update, init_memory_tensor, reset, write_step, GateInput, GatingParams, WriteOpts,
};

use super::layers::{causal_mask, Embedder, Ffn, Linear, Norm, SelfAttention};
use super::{Ctx, InputSpec, ModelInput};

#[derive(Clone, Debug, PartialEq)]
pub struct WorkspaceBlock {
    /// Optional pairwise self-attention kept alongside the workspace.
    pub sa: Option<SelfAttention>,
    pub ln: Norm,
    pub write: ProjectionSet,
    pub gating: GatingParams,
    pub read: ProjectionSet,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Block {
    /// One or more self-attention sublayers.
    Pairwise(Vec<SelfAttention>),
    Workspace(WorkspaceBlock),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub block: Block,
    pub ffn: Ffn,
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    pub embed: Embedder,
    /// One entry when parameters are shared, otherwise one per layer.
    pub layers: Vec<Layer>,
    pub init_memory: Option<ParamId>,
    pub final_ln: Norm,
    pub head: Linear,
}

/// Write and read projections for a workspace between `d`-wide
/// specialists and `n_l`-wide slots.
pub(crate) fn workspace_projections<T: Scalar>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    init: &mut Initializer,
    prefix: &str,
    d: usize,
    write_kv: usize,
) -> Result<(ProjectionSet, GatingParams, ProjectionSet)> {
    let n_l = cfg.slot_width();
    let concat = cfg.ws_heads * cfg.ws_value_dim;
    let write = ProjectionSet::new(
        store,
        init,
        &format!("{prefix}.write"),
        ProjectionSpec {
            query_in: n_l,
            kv_in: write_kv,
            out_dim: n_l,
            n_heads: cfg.ws_heads,
            key_dim: cfg.ws_key_dim,
            value_dim: cfg.ws_value_dim,
            output_proj: concat != n_l,
        },
    )?;
    let gating = GatingParams::new(store, init, &format!("{prefix}.gate"), write_kv, n_l, cfg.gate_style)?;
    let read = ProjectionSet::new(
        store,
        init,
        &format!("{prefix}.read"),
        ProjectionSpec {
            query_in: d,
            kv_in: n_l,
            out_dim: d,
            n_heads: cfg.ws_heads,
            key_dim: cfg.ws_key_dim,
            value_dim: cfg.ws_value_dim,
            output_proj: concat != d,
        },
    )?;
    Ok((write, gating, read))
}

pub(crate) fn pairwise_layer<T: Scalar>(
    cfg: &ModelConfig,
    store: &mut ParamStore<T>,
    init: &mut Initializer,
    prefix: &str,
    n_sa: usize,
) -> Result<Layer> {
    let sa = (0..n_sa)
        .map(|i| SelfAttention::new(store, init, &format!("{prefix}.sa{i}"), cfg.n_h, cfg.n_heads))
        .collect::<Result<Vec<_>>>()?;
    Ok(Layer {
        block: Block::Pairwise(sa),
        ffn: Ffn::new(store, init, &format!("{prefix}.ffn"), cfg.n_h, cfg.ffn_dim)?,
    })
}

impl TransformerModel {
    pub fn new<T: Scalar>(
        cfg: &ModelConfig,
        input: &InputSpec,
        store: &mut ParamStore<T>,
        init: &mut Initializer,
    ) -> Result<Self> {
        if input.is_sequence() && cfg.memory_rows_as_keys() && cfg.host.uses_workspace() {
            return Err(Error::config(
                "the causal workspace cannot use memory rows as keys",
            ));
        }
        let embed = Embedder::new(store, init, input, cfg.n_h, !input.is_sequence())?;
        let n_distinct = if cfg.shared_layers() { 1 } else { cfg.n_layers };
        let mut layers = Vec::with_capacity(n_distinct);
        for l in 0..n_distinct {
            let prefix = format!("layer{l}");
            let layer = match cfg.host {
                Host::Tr | Host::TrHc => pairwise_layer(cfg, store, init, &prefix, 1)?,
                Host::Tr2xSa => pairwise_layer(cfg, store, init, &prefix, 2)?,
                Host::TrSsw | Host::TrHsw => {
                    let sa = if cfg.sw_plus_sa {
                        Some(SelfAttention::new(store, init, &format!("{prefix}.sa0"), cfg.n_h, cfg.n_heads)?)
                    } else {
                        None
                    };
                    let ln = Norm::new(store, &format!("{prefix}.ws_ln"), cfg.n_h)?;
                    let (write, gating, read) =
                        workspace_projections(cfg, store, init, &format!("{prefix}.ws"), cfg.n_h, cfg.n_h)?;
                    Layer {
                        block: Block::Workspace(WorkspaceBlock {
                            sa,
                            ln,
                            write,
                            gating,
                            read,
                        }),
                        ffn: Ffn::new(store, init, &format!("{prefix}.ffn"), cfg.n_h, cfg.ffn_dim)?,
                    }
                }
                h => return Err(Error::config(format!("{} is not a transformer host", h.name()))),
            };
            layers.push(layer);
        }
        let init_memory = if cfg.host.uses_workspace() {
            Some(store.add("memory.init", init_memory_tensor(init, cfg.n_m, cfg.slot_width())?)?)
        } else {
            None
        };
        Ok(Self {
            embed,
            layers,
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
        let sa_mask = causal.then(|| causal_mask(t));
        // Per-position write mask [t, n_m, t]: slot copies at position p see keys j <= p.
        let write_mask: Option<Vec<bool>> = causal.then(|| {
            (0..t * cfg.n_m * t)
                .map(|i| {
                    let p = i / (cfg.n_m * t);
                    i % t > p
                })
                .collect()
        });
        let selection = match cfg.topk {
            Some(k) if cfg.host == Host::TrHsw => Selection::TopK(k),
            _ => Selection::Soft,
        };
        let mut memory: Option<Var> = None;
        for l in 0..cfg.n_layers {
            let layer = &self.layers[if self.layers.len() == 1 { 0 } else { l }];
            match &layer.block {
                Block::Pairwise(blocks) => {
                    for sa in blocks {
                        let (out, heads) = sa.apply(tape, store, h, sa_mask.as_deref(), ctx.dropout())?;
                        if let Some(tr) = ctx.trace.as_mut() {
                            tr.record(tape, l, "self_attention", &heads);
                        }
                        h = out;
                    }
                }
                Block::Workspace(ws) => {
                    if let Some(sa) = &ws.sa {
                        h = sa.apply(tape, store, h, sa_mask.as_deref(), ctx.dropout())?.0;
                    }
                    let init_id = self.init_memory.expect("workspace host has memory");
                    let prev = match memory {
                        Some(m) if cfg.persistence => m,
                        _ => reset(tape, store, init_id, causal.then_some(t))?.memory,
                    };
                    let x = ws.ln.apply(tape, store, h)?;
                    let written = write_step(
                        tape,
                        store,
                        &ws.write,
                        prev,
                        x,
                        WriteOpts {
                            selection,
                            include_memory_rows: cfg.memory_rows_as_keys(),
                            n_iters: cfg.n_write_iters,
                            mask: write_mask.as_deref(),
                            dropout: ctx.dropout(),
                        },
                    )?;
                    let gate_in = if causal { GateInput::Causal(x) } else { GateInput::Rows(x) };
                    let m = gated_update(tape, store, &ws.gating, written.candidate, prev, gate_in)?;
                    let read = broadcast_read(tape, store, &ws.read, x, m, ctx.dropout())?;
                    if let Some(tr) = ctx.trace.as_mut() {
                        tr.record(tape, l, "write", &written.attention);
                        tr.record(tape, l, "broadcast", &read.attention);
                    }
                    h = tape.add(h, read.read)?;
                    memory = Some(m);
                }
            }
            h = layer.ffn.apply(tape, store, h)?;
        }
        let hf = if causal { h } else { tape.narrow(h, 0, 0, 1)? };
        let hf = self.final_ln.apply(tape, store, hf)?;
        self.head.apply(tape, store, hf)
    }
}
