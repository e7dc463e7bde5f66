//! The shared workspace: specialists compete to write into a small slot
//! memory, the memory is blended with its previous contents through input
//! and forget gates, and every specialist then reads from it.
//!
//! Shapes (per sample):
//! - memory `M`: `[n_m, n_l]`, or `[P, n_m, n_l]` when each of `P`
//!   positions keeps its own copy;
//! - specialists `R`: `[n_s, d]`, or `[P, n_s, d]` for per-position sets.

use serde::{Deserialize, Serialize};

use crate::attention::{multihead, AttentionOutput, AttnOpts, Dropout, ProjectionSet, Selection};
use crate::autodiff::{causal_mean_matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateStyle {
    /// One gate per memory unit.
    #[default]
    Unit,
    /// One gate per memory slot.
    Memory,
}

/// Input/forget gate parameters. `w1` is shared by all specialists.
#[derive(Clone, Debug, PartialEq)]
pub struct GatingParams {
    pub w1: ParamId,
    pub w_i: ParamId,
    pub b_i: ParamId,
    pub w_f: ParamId,
    pub b_f: ParamId,
    pub style: GateStyle,
}

impl GatingParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        input_dim: usize,
        n_l: usize,
        style: GateStyle,
    ) -> Result<Self> {
        let g = match style {
            GateStyle::Unit => n_l,
            GateStyle::Memory => 1,
        };
        Ok(Self {
            w1: store.add(format!("{prefix}.w1"), init.linear(&[input_dim, n_l]))?,
            w_i: store.add(format!("{prefix}.w_i"), init.linear(&[n_l, g]))?,
            b_i: store.add(format!("{prefix}.b_i"), Tensor::zeros(&[g]))?,
            w_f: store.add(format!("{prefix}.w_f"), init.linear(&[n_l, g]))?,
            b_f: store.add(format!("{prefix}.b_f"), Tensor::zeros(&[g]))?,
            style,
        })
    }
}

/// Live memory of one episode on a tape.
#[derive(Clone, Debug)]
pub struct WorkspaceState {
    pub memory: Var,
    /// Learned initial memory `[n_m, n_l]`.
    pub init_memory: Var,
    /// Number of per-position copies, if the memory is per position.
    pub positions: Option<usize>,
}

/// Start an episode: memory := learned initial memory, copied once per
/// position when `positions` is given.
pub fn reset<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    init_memory: ParamId,
    positions: Option<usize>,
) -> Result<WorkspaceState> {
    let init = tape.param(store, init_memory);
    let memory = match positions {
        None => init,
        Some(p) => {
            let zeros = tape.constant(Tensor::zeros(&[p, 1, 1]));
            tape.add(init, zeros)?
        }
    };
    Ok(WorkspaceState {
        memory,
        init_memory: init,
        positions,
    })
}

/// Uniform(±0.01) initial memory.
pub fn init_memory_tensor<T: Scalar>(init: &mut Initializer, n_m: usize, n_l: usize) -> Result<Tensor<T>> {
    if n_m == 0 || n_l == 0 {
        return Err(Error::config("workspace needs n_m >= 1 and n_l >= 1"));
    }
    Ok(init.uniform(&[n_m, n_l], 0.01))
}

#[derive(Clone, Debug)]
pub struct WriteOutput {
    /// Candidate memory `M̃`, same shape as the memory.
    pub candidate: Var,
    /// Attention of the last write iteration, one entry per head.
    pub attention: Vec<AttentionOutput>,
}

pub struct WriteOpts<'a> {
    pub selection: Selection,
    /// Keys/values from `[M; R]` instead of `R` alone.
    pub include_memory_rows: bool,
    pub n_iters: usize,
    /// Mask over specialist rows, `[.., n_m, n_s]` (`true` = hidden).
    pub mask: Option<&'a [bool]>,
    pub dropout: Option<&'a mut Dropout>,
}

impl Default for WriteOpts<'_> {
    fn default() -> Self {
        Self {
            selection: Selection::Soft,
            include_memory_rows: false,
            n_iters: 1,
            mask: None,
            dropout: None,
        }
    }
}

fn rows_axis(shape: &[usize]) -> usize {
    shape.len() - 2
}

/// Competitive write: memory slots query the specialists and the result
/// is the candidate memory.
pub fn write_step<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    proj: &ProjectionSet,
    memory: Var,
    specialists: Var,
    mut opts: WriteOpts<'_>,
) -> Result<WriteOutput> {
    let rs = tape.shape(specialists).to_vec();
    if rs.len() < 2 || rs[rs.len() - 2] == 0 {
        return Err(Error::config("write step needs at least one specialist"));
    }
    if let Some(pos) = tape.data(specialists).iter().position(|x| !x.is_finite()) {
        let width = rs[rs.len() - 1];
        return Err(Error::numeric(format!(
            "non-finite specialist state at row {} column {} entering the workspace write",
            pos / width,
            pos % width
        )));
    }
    if opts.n_iters == 0 {
        return Err(Error::config("n_write_iters must be >= 1"));
    }
    if opts.include_memory_rows && opts.mask.is_some() {
        return Err(Error::config(
            "masked writes cannot also use memory rows as keys",
        ));
    }
    let mut current = memory;
    let mut attention = Vec::new();
    for _ in 0..opts.n_iters {
        let keys = if opts.include_memory_rows {
            let axis = rows_axis(tape.shape(current));
            tape.concat(&[current, specialists], axis)?
        } else {
            specialists
        };
        let out = multihead(
            tape,
            store,
            proj,
            current,
            keys,
            AttnOpts {
                mask: opts.mask,
                selection: opts.selection,
                dropout: opts.dropout.as_deref_mut(),
            },
        )?;
        if tape.shape(out.out) != tape.shape(memory) {
            return Err(Error::shape("write_step", tape.shape(out.out), tape.shape(memory)));
        }
        current = out.out;
        attention = out.heads;
    }
    Ok(WriteOutput {
        candidate: current,
        attention,
    })
}

/// What the gates summarize.
#[derive(Clone, Copy, Debug)]
pub enum GateInput {
    /// Mean over all rows of `[.., n, d]`.
    Rows(Var),
    /// Prefix means of `[P, d]`: position `t` averages rows `0..=t`.
    Causal(Var),
}

/// `X̄ = mean relu(X W¹)`, shaped to broadcast against the memory.
pub fn gate_summary<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    gating: &GatingParams,
    input: GateInput,
) -> Result<Var> {
    let w1 = tape.param(store, gating.w1);
    match input {
        GateInput::Rows(x) => {
            let h = tape.matmul(x, w1)?;
            let r = tape.relu(h);
            let axis = rows_axis(tape.shape(r));
            tape.mean_axis(r, axis)
        }
        GateInput::Causal(x) => {
            let h = tape.matmul(x, w1)?;
            let r = tape.relu(h);
            let p = tape.shape(r)[0];
            let width = tape.shape(r)[1];
            let avg = tape.constant(causal_mean_matrix(p));
            let means = tape.matmul(avg, r)?;
            tape.reshape(means, &[p, 1, width])
        }
    }
}

/// Gated memory update:
/// `K = X̄ + tanh(M_prev)`, `I = σ(K Wᴵ + bᴵ)`, `F = σ(K Wᶠ + bᶠ)`,
/// `M = I ⊙ tanh(M̃) + F ⊙ M_prev`.
pub fn gated_update<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    gating: &GatingParams,
    candidate: Var,
    prev: Var,
    input: GateInput,
) -> Result<Var> {
    if tape.shape(candidate) != tape.shape(prev) {
        return Err(Error::shape("gated_update", tape.shape(candidate), tape.shape(prev)));
    }
    let x_bar = gate_summary(tape, store, gating, input)?;
    let tanh_prev = tape.tanh(prev);
    let k = tape.add(x_bar, tanh_prev)?;
    let gate = |tape: &mut Tape<T>, w: ParamId, b: ParamId| -> Result<Var> {
        let wv = tape.param(store, w);
        let bv = tape.param(store, b);
        let z = tape.matmul(k, wv)?;
        let z = tape.add(z, bv)?;
        Ok(tape.sigmoid(z))
    };
    let i_gate = gate(tape, gating.w_i, gating.b_i)?;
    let f_gate = gate(tape, gating.w_f, gating.b_f)?;
    let tanh_cand = tape.tanh(candidate);
    let written = tape.mul(i_gate, tanh_cand)?;
    let kept = tape.mul(f_gate, prev)?;
    tape.add(written, kept)
}

#[derive(Clone, Debug)]
pub struct BroadcastOutput {
    /// The summed slot values read by each specialist (before the residual).
    pub read: Var,
    pub attention: Vec<AttentionOutput>,
}

/// Every specialist queries the memory slots. With a per-position memory
/// `[P, n_m, n_l]` and queries `[P, d]`, position `p` reads its own copy.
pub fn broadcast_read<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    proj: &ProjectionSet,
    queries: Var,
    memory: Var,
    dropout: Option<&mut Dropout>,
) -> Result<BroadcastOutput> {
    let qs = tape.shape(queries).to_vec();
    let ms = tape.shape(memory).to_vec();
    let per_position = ms.len() == qs.len() + 1;
    let q = if per_position {
        tape.reshape(queries, &[qs[0], 1, qs[1]])?
    } else {
        queries
    };
    let out = multihead(
        tape,
        store,
        proj,
        q,
        memory,
        AttnOpts {
            dropout,
            ..Default::default()
        },
    )?;
    let read = if per_position {
        tape.reshape(out.out, &[qs[0], proj.out_dim])?
    } else {
        out.out
    };
    Ok(BroadcastOutput {
        read,
        attention: out.heads,
    })
}

/// Residual broadcast: `h ← h + Σ_j s_{k,j} v̂_j` for every specialist.
pub fn broadcast_step<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    proj: &ProjectionSet,
    specialists: Var,
    memory: Var,
) -> Result<Var> {
    let read = broadcast_read(tape, store, proj, specialists, memory, None)?;
    tape.add(specialists, read.read)
}

/// Multiply-add counts for one workspace stage.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StageCost {
    /// Slot-specialist interaction terms (scores and value mixing).
    pub communication: u64,
    /// Linear projections and gates.
    pub projection: u64,
}

impl StageCost {
    pub fn total(&self) -> u64 {
        self.communication + self.projection
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CostDims {
    pub n_s: usize,
    pub n_m: usize,
    /// Specialist state width.
    pub d: usize,
    /// Slot width.
    pub n_l: usize,
    pub n_heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
}

/// Write cost: `n_heads · n_m · n_s · (key_dim + value_dim)` communication
/// plus query/key/value projections.
pub fn write_cost(c: CostDims) -> StageCost {
    let (s, m, h) = (c.n_s as u64, c.n_m as u64, c.n_heads as u64);
    let (dk, dv, d, nl) = (c.key_dim as u64, c.value_dim as u64, c.d as u64, c.n_l as u64);
    StageCost {
        communication: h * m * s * (dk + dv),
        projection: m * nl * h * dk + s * d * h * (dk + dv),
    }
}

/// Gate cost: `X W¹` per specialist plus two slot-wise gate projections.
pub fn gate_cost(c: CostDims, style: GateStyle) -> StageCost {
    let g = match style {
        GateStyle::Unit => c.n_l as u64,
        GateStyle::Memory => 1,
    };
    StageCost {
        communication: 0,
        projection: (c.n_s * c.d * c.n_l) as u64 + 2 * (c.n_m * c.n_l) as u64 * g,
    }
}

/// Broadcast cost: symmetric to the write.
pub fn broadcast_cost(c: CostDims) -> StageCost {
    let (s, m, h) = (c.n_s as u64, c.n_m as u64, c.n_heads as u64);
    let (dk, dv, d, nl) = (c.key_dim as u64, c.value_dim as u64, c.d as u64, c.n_l as u64);
    StageCost {
        communication: h * s * m * (dk + dv),
        projection: s * d * h * dk + m * nl * h * (dk + dv),
    }
}
