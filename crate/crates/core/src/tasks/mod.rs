//! Procedural datasets: equilateral triangles, Sort-of-CLEVR and a copy
//! task for the causal host.
//!
//! Samples are generated independently from per-sample seeds derived with
//! splitmix64 from the master seed, so generation order (and parallelism)
//! never changes the bytes.

pub mod clevr;
pub mod copy;
pub mod store;
pub mod triangles;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{TaskConfig, TaskKind};
use crate::error::Result;
use crate::models::ModelInput;

pub use store::{Dataset, DatasetHeader};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Test => 0x7465_7374_0000_0002,
        }
    }
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of sample `index` in `split`, independent of every other sample.
pub fn sample_seed(master: u64, split: Split, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ split.stream()).wrapping_add(index))
}

pub fn sample_rng(master: u64, split: Split, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sample_seed(master, split, index))
}

#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Class(usize),
    /// Per-position targets; `None` positions carry no loss.
    Sequence(Vec<Option<usize>>),
}

/// One training/evaluation example borrowed from a dataset.
#[derive(Clone, Debug)]
pub struct Example<'a> {
    pub pixels: Option<&'a [u8]>,
    pub question: Option<[u8; clevr::QUESTION_BITS]>,
    pub tokens: Option<Vec<usize>>,
    pub target: Target,
    /// Sort-of-CLEVR question family.
    pub relational: Option<bool>,
}

impl Example<'_> {
    pub fn input(&self) -> ModelInput<'_> {
        match (&self.pixels, &self.tokens) {
            (Some(p), _) => ModelInput::Image {
                pixels: p,
                question: self.question.as_ref().map(|q| &q[..]),
            },
            (None, Some(t)) => ModelInput::Tokens(t),
            _ => unreachable!("example without input"),
        }
    }

    pub fn targets(&self) -> Vec<Option<usize>> {
        match &self.target {
            Target::Class(c) => vec![Some(*c)],
            Target::Sequence(s) => s.clone(),
        }
    }
}

/// Generate one split of the configured task.
pub fn generate(task: &TaskConfig, split: Split) -> Result<Dataset> {
    let n = match split {
        Split::Train => task.n_train,
        Split::Test => task.n_test,
    };
    match task.kind {
        TaskKind::Triangles => triangles::generate(task, split, n),
        TaskKind::SortOfClevr => clevr::generate(task, split, n),
        TaskKind::Copy => copy::generate(task, split, n),
    }
}
