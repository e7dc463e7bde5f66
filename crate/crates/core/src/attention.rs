//! Scaled dot-product attention, the multi-head wrapper, and top-k
//! competition.
//!
//! Top-k keeps the full softmax and zeroes the entries outside the
//! selected set without renormalizing, so selecting every key reproduces
//! the soft path exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How keys compete for each query.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Soft,
    TopK(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult<T> {
    /// Chosen indices in ascending order.
    pub indices: Vec<usize>,
    /// Scores that were ranked.
    pub scores: Vec<T>,
}

/// Indices of the `k` largest scores; ties go to the lowest index.
pub fn topk_select<T: Scalar>(scores: &[T], k: usize) -> Result<SelectionResult<T>> {
    if k == 0 || k > scores.len() {
        return Err(Error::config(format!(
            "top-k needs 1 <= k <= {}, got k = {k}",
            scores.len()
        )));
    }
    Ok(SelectionResult {
        indices: rank_topk(scores, k, None),
        scores: scores.to_vec(),
    })
}

/// Top-`k` among unmasked entries (fewer if fewer are available), ascending.
pub(crate) fn rank_topk<T: Scalar>(scores: &[T], k: usize, mask: Option<&[bool]>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len())
        .filter(|&i| mask.map_or(true, |m| !m[i]))
        .collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Dropout on attention weights; only active while training.
pub struct Dropout {
    pub p: f64,
    pub rng: ChaCha8Rng,
}

impl Dropout {
    pub fn mask<T: Scalar>(&mut self, shape: &[usize]) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let keep = T::of(1.0 / (1.0 - self.p));
        let data = (0..n)
            .map(|_| {
                if self.rng.gen::<f64>() < self.p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        Tensor::from_vec(shape, data).expect("mask shape")
    }
}

#[derive(Default)]
pub struct AttnOpts<'a> {
    /// `true` marks a masked (query, key) pair; length = n_queries × n_keys
    /// (times any batch extent of the scores).
    pub mask: Option<&'a [bool]>,
    pub selection: Selection,
    pub dropout: Option<&'a mut Dropout>,
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `[.., n_queries, value_dim]`
    pub values: Var,
    /// `[.., n_queries, n_keys]`, after top-k masking.
    pub weights: Var,
    /// Selected key indices per query row in top-k mode.
    pub selected: Option<Vec<Vec<usize>>>,
}

/// `softmax(q kᵀ / sqrt(d)) v` over the last two axes, with broadcasting
/// over any leading axes.
pub fn scaled_dot_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    opts: AttnOpts<'_>,
) -> Result<AttentionOutput> {
    let d = *tape.shape(q).last().unwrap_or(&0);
    if d == 0 {
        return Err(Error::config("attention key dimension must be positive"));
    }
    if tape.shape(k).last() != Some(&d) {
        return Err(Error::shape("attention_qk", tape.shape(q), tape.shape(k)));
    }
    let kt = tape.transpose(k)?;
    let raw = tape.matmul(q, kt)?;
    let scores = tape.scale(raw, T::one() / T::of(d as f64).sqrt());
    let weights = tape.softmax_masked(scores, opts.mask)?;
    let n_keys = *tape.shape(scores).last().unwrap();
    let (weights, selected) = match opts.selection {
        Selection::TopK(kk) if kk == 0 => {
            return Err(Error::config("top-k needs k >= 1"));
        }
        Selection::TopK(kk) if kk < n_keys => {
            let s = tape.data(scores);
            let mut keep = vec![T::zero(); s.len()];
            let mut selected = Vec::with_capacity(s.len() / n_keys);
            for (r, row) in s.chunks(n_keys).enumerate() {
                let row_mask = opts.mask.map(|m| &m[r * n_keys..(r + 1) * n_keys]);
                let idx = rank_topk(row, kk, row_mask);
                for &i in &idx {
                    keep[r * n_keys + i] = T::one();
                }
                selected.push(idx);
            }
            let keep = tape.constant(Tensor::from_vec(tape.shape(scores), keep)?);
            (tape.mul(weights, keep)?, Some(selected))
        }
        Selection::TopK(_) => {
            let rows = tape.value(scores).len() / n_keys.max(1);
            (weights, Some(vec![(0..n_keys).collect(); rows]))
        }
        Selection::Soft => (weights, None),
    };
    let mixed = match opts.dropout {
        Some(drop) if drop.p > 0.0 => {
            let m = tape.constant(drop.mask(tape.shape(weights)));
            tape.mul(weights, m)?
        }
        _ => weights,
    };
    let values = tape.matmul(mixed, v)?;
    Ok(AttentionOutput {
        values,
        weights,
        selected,
    })
}

/// Query/key/value (and optional output) projections of one attention
/// site. Weight layout is `[input_dim, n_heads * head_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub w_q: ParamId,
    pub w_e: ParamId,
    pub w_v: ParamId,
    pub w_o: Option<ParamId>,
    pub n_heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub out_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjectionSpec {
    pub query_in: usize,
    pub kv_in: usize,
    pub out_dim: usize,
    pub n_heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    /// Add an output projection from `n_heads * value_dim` to `out_dim`.
    pub output_proj: bool,
}

impl ProjectionSet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        spec: ProjectionSpec,
    ) -> Result<Self> {
        if spec.n_heads == 0 || spec.key_dim == 0 || spec.value_dim == 0 {
            return Err(Error::config(format!(
                "{prefix}: heads, key and value dims must be positive"
            )));
        }
        let concat = spec.n_heads * spec.value_dim;
        if !spec.output_proj && concat != spec.out_dim {
            return Err(Error::config(format!(
                "{prefix}: {} heads x {} value dims != output dim {}",
                spec.n_heads, spec.value_dim, spec.out_dim
            )));
        }
        let hk = spec.n_heads * spec.key_dim;
        let w_q = store.add(format!("{prefix}.w_q"), init.linear(&[spec.query_in, hk]))?;
        let w_e = store.add(format!("{prefix}.w_e"), init.linear(&[spec.kv_in, hk]))?;
        let w_v = store.add(format!("{prefix}.w_v"), init.linear(&[spec.kv_in, concat]))?;
        let w_o = if spec.output_proj {
            Some(store.add(format!("{prefix}.w_o"), init.linear(&[concat, spec.out_dim]))?)
        } else {
            None
        };
        Ok(Self {
            w_q,
            w_e,
            w_v,
            w_o,
            n_heads: spec.n_heads,
            key_dim: spec.key_dim,
            value_dim: spec.value_dim,
            out_dim: spec.out_dim,
        })
    }

    pub fn num_params<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        [Some(self.w_q), Some(self.w_e), Some(self.w_v), self.w_o]
            .into_iter()
            .flatten()
            .map(|id| store.get(id).len())
            .sum()
    }
}

pub struct MultiheadOutput {
    pub out: Var,
    pub heads: Vec<AttentionOutput>,
}

/// Project, attend per head, concatenate, and (optionally) project out.
pub fn multihead<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    proj: &ProjectionSet,
    query_in: Var,
    kv_in: Var,
    mut opts: AttnOpts<'_>,
) -> Result<MultiheadOutput> {
    let wq = tape.param(store, proj.w_q);
    let we = tape.param(store, proj.w_e);
    let wv = tape.param(store, proj.w_v);
    let q = tape.matmul(query_in, wq)?;
    let k = tape.matmul(kv_in, we)?;
    let v = tape.matmul(kv_in, wv)?;
    let (qa, ka, va) = (
        tape.shape(q).len() - 1,
        tape.shape(k).len() - 1,
        tape.shape(v).len() - 1,
    );
    let mut heads = Vec::with_capacity(proj.n_heads);
    for h in 0..proj.n_heads {
        let (dk, dv) = (proj.key_dim, proj.value_dim);
        let (qh, kh, vh) = if proj.n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.narrow(q, qa, h * dk, dk)?,
                tape.narrow(k, ka, h * dk, dk)?,
                tape.narrow(v, va, h * dv, dv)?,
            )
        };
        let head_opts = AttnOpts {
            mask: opts.mask,
            selection: opts.selection,
            dropout: opts.dropout.as_deref_mut(),
        };
        heads.push(scaled_dot_attention(tape, qh, kh, vh, head_opts)?);
    }
    let concat = if heads.len() == 1 {
        heads[0].values
    } else {
        let parts: Vec<Var> = heads.iter().map(|h| h.values).collect();
        let axis = tape.shape(parts[0]).len() - 1;
        tape.concat(&parts, axis)?
    };
    let out = match proj.w_o {
        Some(id) => {
            let wo = tape.param(store, id);
            tape.matmul(concat, wo)?
        }
        None => concat,
    };
    Ok(MultiheadOutput { out, heads })
}
