//! Host architectures that embed the shared workspace.
//!
//! Every model processes one sample per tape. Image inputs are cut into
//! patches (plus an optional question token and a CLS token); token inputs
//! are embedded with a lookup table and run causally.

pub mod layers;
pub mod rims;
pub mod tims;
pub mod transformer;

use crate::attention::{AttentionOutput, Dropout};
use crate::autodiff::{Tape, Var};
use crate::config::{Host, ModelConfig, TaskConfig, TaskKind};
use crate::error::{Error, Result};
use crate::params::{Initializer, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use rims::{rims_sw_step, RimsCell, RimsModel, RimsStepOpts, RimsStepOutput};
pub use tims::{tims_sw_layer, TimsLayer, TimsModel, TimsOpts, TimsOutput};
pub use transformer::TransformerModel;

/// Shape of the data a model consumes and produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputSpec {
    Image {
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
        /// Width of the binary question code (0 = no question token).
        question_bits: usize,
        n_classes: usize,
    },
    Tokens {
        /// Input alphabet including any delimiter symbol.
        vocab: usize,
        max_len: usize,
        /// Output classes per position.
        n_out: usize,
    },
}

impl InputSpec {
    pub fn for_task(task: &TaskConfig) -> Result<Self> {
        let spec = match task.kind {
            TaskKind::Triangles => InputSpec::Image {
                height: task.image_size,
                width: task.image_size,
                channels: 1,
                patch: task.patch_size(),
                question_bits: 0,
                n_classes: 2,
            },
            TaskKind::SortOfClevr => InputSpec::Image {
                height: crate::tasks::clevr::IMAGE_SIZE,
                width: crate::tasks::clevr::IMAGE_SIZE,
                channels: 3,
                patch: task.patch_size(),
                question_bits: crate::tasks::clevr::QUESTION_BITS,
                n_classes: crate::tasks::clevr::N_ANSWERS,
            },
            TaskKind::Copy => InputSpec::Tokens {
                vocab: task.vocab + 1,
                max_len: task.seq_len,
                n_out: task.vocab,
            },
        };
        if let InputSpec::Image {
            height,
            width,
            patch,
            ..
        } = spec
        {
            if patch == 0 || height % patch != 0 || width % patch != 0 {
                return Err(Error::config(format!(
                    "patch {patch} does not tile a {height}x{width} image"
                )));
            }
        }
        Ok(spec)
    }

    /// Sequence length seen by the host (with or without a CLS token).
    pub fn positions(&self, cls: bool) -> usize {
        match *self {
            InputSpec::Image {
                height,
                width,
                patch,
                question_bits,
                ..
            } => (height / patch) * (width / patch) + usize::from(question_bits > 0) + usize::from(cls),
            InputSpec::Tokens { max_len, .. } => max_len,
        }
    }

    pub fn n_out(&self) -> usize {
        match *self {
            InputSpec::Image { n_classes, .. } => n_classes,
            InputSpec::Tokens { n_out, .. } => n_out,
        }
    }

    pub fn is_sequence(&self) -> bool {
        matches!(self, InputSpec::Tokens { .. })
    }
}

/// One sample's raw input.
#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a> {
    /// Row-major `H × W × C` bytes.
    Image {
        pixels: &'a [u8],
        question: Option<&'a [u8]>,
    },
    Tokens(&'a [usize]),
}

/// A recorded attention map, averaged over heads: rows are queries.
#[derive(Clone, Debug)]
pub struct AttentionMap {
    pub stage: usize,
    pub step: &'static str,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

/// Mechanisms or specialists active at one stage and position.
#[derive(Clone, Debug, PartialEq)]
pub struct ActiveSet {
    pub stage: usize,
    pub position: usize,
    pub members: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Trace {
    pub maps: Vec<AttentionMap>,
    pub active: Vec<ActiveSet>,
}

impl Trace {
    /// Head-averaged weights of the last query block (the last position
    /// when the attention is per position).
    pub(crate) fn record<T: Scalar>(
        &mut self,
        tape: &Tape<T>,
        stage: usize,
        step: &'static str,
        heads: &[AttentionOutput],
    ) {
        let Some(first) = heads.first() else { return };
        let shape = tape.shape(first.weights);
        let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let block = rows * cols;
        let mut weights = vec![0.0; block];
        for h in heads {
            let data = tape.data(h.weights);
            let tail = &data[data.len() - block..];
            for (w, v) in weights.iter_mut().zip(tail) {
                *w += v.as_f64() / heads.len() as f64;
            }
        }
        self.maps.push(AttentionMap {
            stage,
            step,
            rows,
            cols,
            weights,
        });
    }

    /// CSV rows `stage,step,slot,specialist,weight`.
    pub fn attention_csv(&self) -> String {
        let mut out = String::from("stage,step,slot,specialist,weight\n");
        for m in &self.maps {
            for r in 0..m.rows {
                for c in 0..m.cols {
                    let w = m.weights[r * m.cols + c];
                    let (slot, spec) = if m.step == "broadcast" { (c, r) } else { (r, c) };
                    out.push_str(&format!("{},{},{},{},{:e}\n", m.stage, m.step, slot, spec, w));
                }
            }
        }
        out
    }

    /// CSV rows `stage,position,mechanism`, one per active member.
    pub fn activation_csv(&self) -> String {
        let mut out = String::from("stage,position,mechanism\n");
        for a in &self.active {
            for m in &a.members {
                out.push_str(&format!("{},{},{}\n", a.stage, a.position, m));
            }
        }
        out
    }
}

/// Per-forward state: dropout (training only) and optional tracing.
#[derive(Default)]
pub struct Ctx {
    pub dropout: Option<Dropout>,
    pub trace: Option<Trace>,
}

impl Ctx {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn traced() -> Self {
        Self {
            dropout: None,
            trace: Some(Trace::default()),
        }
    }

    pub(crate) fn dropout(&mut self) -> Option<&mut Dropout> {
        self.dropout.as_mut()
    }
}

#[derive(Clone, Debug)]
pub enum Arch {
    Transformer(TransformerModel),
    Rims(RimsModel),
    Tims(TimsModel),
}

/// A host architecture bound to an input spec. Parameters live in a
/// separate [`ParamStore`] so the same model can run at either precision.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub input: InputSpec,
    pub arch: Arch,
}

impl Model {
    /// Build the architecture and its initial parameters (seeded by
    /// `cfg.seed`). Also returns config warnings.
    pub fn build<T: Scalar>(cfg: &ModelConfig, input: &InputSpec) -> Result<(Self, ParamStore<T>, Vec<String>)> {
        let n_spec = Self::specialists_for(cfg, input);
        let warnings = cfg.validate(n_spec)?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(cfg.seed);
        let arch = match cfg.host {
            h if h.is_transformer() => {
                Arch::Transformer(TransformerModel::new(cfg, input, &mut store, &mut init)?)
            }
            Host::RimsSw => Arch::Rims(RimsModel::new(cfg, input, &mut store, &mut init)?),
            _ => Arch::Tims(TimsModel::new(cfg, input, &mut store, &mut init)?),
        };
        Ok((
            Self {
                cfg: cfg.clone(),
                input: *input,
                arch,
            },
            store,
            warnings,
        ))
    }

    /// Number of specialists competing for the workspace.
    pub fn specialists_for(cfg: &ModelConfig, input: &InputSpec) -> usize {
        match cfg.host {
            Host::RimsSw => cfg.n_s,
            Host::TimsSw => cfg.n_s,
            _ => input.positions(true),
        }
    }

    /// Logits: `[1, n_classes]` for images, `[T, n_out]` for token sequences.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        input: &ModelInput<'_>,
        ctx: &mut Ctx,
    ) -> Result<Var> {
        if let (InputSpec::Image { height, width, channels, .. }, ModelInput::Image { pixels, .. }) =
            (&self.input, input)
        {
            if pixels.len() != height * width * channels {
                return Err(Error::config(format!(
                    "image has {} bytes, model expects {height}x{width}x{channels}",
                    pixels.len()
                )));
            }
        }
        match &self.arch {
            Arch::Transformer(m) => m.forward(&self.cfg, &self.input, tape, store, input, ctx),
            Arch::Rims(m) => m.forward(&self.cfg, &self.input, tape, store, input, ctx),
            Arch::Tims(m) => m.forward(&self.cfg, &self.input, tape, store, input, ctx),
        }
    }

    /// Forward pass with concrete logits, no gradient bookkeeping kept.
    pub fn logits<T: Scalar>(&self, store: &ParamStore<T>, input: &ModelInput<'_>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, input, &mut Ctx::eval())?;
        Ok(tape.value(out).clone())
    }
}

/// Small configuration used for end-to-end gradient checks: two layers,
/// `n_h = 8`, four specialists and two memory slots.
pub fn toy_config(host: Host) -> (ModelConfig, InputSpec) {
    let cfg = ModelConfig {
        host,
        n_layers: 2,
        n_h: 8,
        ffn_dim: 16,
        n_heads: 2,
        n_s: 4,
        n_sel: 2,
        n_m: 2,
        n_l: 0,
        ws_heads: 2,
        ws_key_dim: 2,
        ws_value_dim: 4,
        topk: (host == Host::TrHsw).then_some(2),
        dropout: 0.0,
        seed: 11,
        ..Default::default()
    };
    // Three patches plus CLS: four specialists for the transformer hosts.
    let input = InputSpec::Image {
        height: 2,
        width: 6,
        channels: 1,
        patch: 2,
        question_bits: 0,
        n_classes: 3,
    };
    (cfg, input)
}

/// Fixed pixels for [`toy_config`].
pub fn toy_pixels() -> Vec<u8> {
    (0..12u32).map(|i| ((i * 97 + 31) % 256) as u8).collect()
}

pub(crate) fn stack_rows<T: Scalar>(tape: &mut Tape<T>, rows: &[Var]) -> Result<Var> {
    if rows.len() == 1 {
        Ok(rows[0])
    } else {
        tape.concat(rows, 0)
    }
}
