use crate::attention::{multihead, AttentionOutput, AttnOpts, Dropout, ProjectionSet, ProjectionSpec};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{InputSpec, ModelInput};

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = store.add(format!("{prefix}.w"), init.linear(&[fan_in, fan_out]))?;
        let b = if bias {
            Some(store.add(format!("{prefix}.b"), init.bias(fan_in, fan_out))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{prefix}.gain"), Tensor::full(&[d], T::one()))?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Pre-norm residual feed-forward block: `h + W₂ relu(W₁ LN(h))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn {
    pub ln: Norm,
    pub l1: Linear,
    pub l2: Linear,
}

impl Ffn {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        d: usize,
        hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            ln: Norm::new(store, &format!("{prefix}.ln"), d)?,
            l1: Linear::new(store, init, &format!("{prefix}.l1"), d, hidden, true)?,
            l2: Linear::new(store, init, &format!("{prefix}.l2"), hidden, d, true)?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let x = self.ln.apply(tape, store, h)?;
        let a = self.l1.apply(tape, store, x)?;
        let a = tape.relu(a);
        let y = self.l2.apply(tape, store, a)?;
        tape.add(h, y)
    }
}

/// Pre-norm residual multi-head self-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub ln: Norm,
    pub attn: ProjectionSet,
}

impl SelfAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        prefix: &str,
        d: usize,
        n_heads: usize,
    ) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::config(format!("{n_heads} heads do not divide width {d}")));
        }
        Ok(Self {
            ln: Norm::new(store, &format!("{prefix}.ln"), d)?,
            attn: ProjectionSet::new(
                store,
                init,
                &format!("{prefix}.attn"),
                ProjectionSpec {
                    query_in: d,
                    kv_in: d,
                    out_dim: d,
                    n_heads,
                    key_dim: d / n_heads,
                    value_dim: d / n_heads,
                    output_proj: true,
                },
            )?,
        })
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        mask: Option<&[bool]>,
        dropout: Option<&mut Dropout>,
    ) -> Result<(Var, Vec<AttentionOutput>)> {
        let x = self.ln.apply(tape, store, h)?;
        let out = multihead(
            tape,
            store,
            &self.attn,
            x,
            x,
            AttnOpts {
                mask,
                dropout,
                ..Default::default()
            },
        )?;
        Ok((tape.add(h, out.out)?, out.heads))
    }
}

/// `mask[t * n + j] = j > t`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n > i / n).collect()
}

/// Maps raw inputs to a `[positions, d]` sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum Embedder {
    Patches {
        proj: Linear,
        question: Option<Linear>,
        cls: Option<ParamId>,
        pos: ParamId,
    },
    Tokens {
        table: ParamId,
        pos: ParamId,
    },
}

impl Embedder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Initializer,
        spec: &InputSpec,
        d: usize,
        cls: bool,
    ) -> Result<Self> {
        let n_pos = spec.positions(cls);
        match *spec {
            InputSpec::Image {
                channels,
                patch,
                question_bits,
                ..
            } => {
                let proj = Linear::new(store, init, "embed.patch", patch * patch * channels, d, true)?;
                let question = if question_bits > 0 {
                    Some(Linear::new(store, init, "embed.question", question_bits, d, true)?)
                } else {
                    None
                };
                let cls = if cls {
                    Some(store.add("embed.cls", init.uniform(&[1, d], 0.02))?)
                } else {
                    None
                };
                let pos = store.add("embed.pos", init.uniform(&[n_pos, d], 0.02))?;
                Ok(Embedder::Patches {
                    proj,
                    question,
                    cls,
                    pos,
                })
            }
            InputSpec::Tokens { vocab, .. } => Ok(Embedder::Tokens {
                table: store.add("embed.tokens", init.uniform(&[vocab, d], 1.0))?,
                pos: store.add("embed.pos", init.uniform(&[n_pos, d], 0.02))?,
            }),
        }
    }

    pub fn apply<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        spec: &InputSpec,
        input: &ModelInput<'_>,
    ) -> Result<Var> {
        let seq = match (self, input) {
            (
                Embedder::Patches {
                    proj,
                    question,
                    cls,
                    ..
                },
                ModelInput::Image {
                    pixels,
                    question: q,
                },
            ) => {
                let patches = tape.constant(patchify(spec, pixels)?);
                let mut parts = Vec::new();
                if let Some(c) = cls {
                    parts.push(tape.param(store, *c));
                }
                match (question, q) {
                    (Some(lin), Some(bits)) => {
                        let v: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
                        let x = tape.constant(Tensor::from_f64(&[1, v.len()], &v)?);
                        parts.push(lin.apply(tape, store, x)?);
                    }
                    (None, None) => {}
                    _ => return Err(Error::config("question input does not match the model")),
                }
                parts.push(proj.apply(tape, store, patches)?);
                if parts.len() == 1 {
                    parts[0]
                } else {
                    tape.concat(&parts, 0)?
                }
            }
            (Embedder::Tokens { table, .. }, ModelInput::Tokens(ids)) => {
                let InputSpec::Tokens { vocab, max_len, .. } = *spec else {
                    unreachable!()
                };
                if ids.is_empty() || ids.len() > max_len {
                    return Err(Error::config(format!(
                        "sequence length {} outside 1..={max_len}",
                        ids.len()
                    )));
                }
                if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
                    return Err(Error::config(format!("token {bad} outside vocabulary of {vocab}")));
                }
                let t = tape.param(store, *table);
                tape.gather_rows(t, ids)?
            }
            _ => return Err(Error::config("input kind does not match the model")),
        };
        let pos = match self {
            Embedder::Patches { pos, .. } | Embedder::Tokens { pos, .. } => *pos,
        };
        let n = tape.shape(seq)[0];
        let p = tape.param(store, pos);
        let p = tape.narrow(p, 0, 0, n)?;
        tape.add(seq, p)
    }
}

/// Non-overlapping `patch × patch` tiles in row-major order, each
/// flattened as (row, column, channel) and scaled to [0, 1].
pub fn patchify<T: Scalar>(spec: &InputSpec, pixels: &[u8]) -> Result<Tensor<T>> {
    let InputSpec::Image {
        height,
        width,
        channels,
        patch,
        ..
    } = *spec
    else {
        return Err(Error::config("patchify needs an image input"));
    };
    if pixels.len() != height * width * channels {
        return Err(Error::shape("patchify", &[pixels.len()], &[height, width, channels]));
    }
    let (ph, pw) = (height / patch, width / patch);
    let per = patch * patch * channels;
    let mut out = Vec::with_capacity(ph * pw * per);
    for py in 0..ph {
        for px in 0..pw {
            for y in 0..patch {
                let row = (py * patch + y) * width + px * patch;
                for v in &pixels[row * channels..(row + patch) * channels] {
                    out.push(T::of(*v as f64 / 255.0));
                }
            }
        }
    }
    Tensor::from_vec(&[ph * pw, per], out)
}
