//! Sort-of-CLEVR: six objects, one per color, each a square or a circle on
//! a white 75×75 RGB canvas, with ten non-relational and ten relational
//! questions per image.
//!
//! Question code (11 bits): one-hot color (6), question family
//! (non-relational, relational), one-hot subtype (3).
//!
//! | family         | subtype | question                          | answers |
//! |----------------|---------|-----------------------------------|---------|
//! | non-relational | 0       | shape of the object               | 0-1     |
//! | non-relational | 1       | left or right half                | 2-3     |
//! | non-relational | 2       | top or bottom half                | 4-5     |
//! | relational     | 0       | shape of the nearest object       | 0-1     |
//! | relational     | 1       | shape of the farthest object      | 0-1     |
//! | relational     | 2       | other objects with the same shape | 6-11    |
//!
//! Record layout: objects `6 × (shape, x, y)`, questions
//! `20 × (color, relational, subtype, answer)`, then pixels.

use rand::Rng;

use crate::config::TaskConfig;
use crate::error::{Error, Result};
use crate::parallel::map_indexed;

use super::{sample_rng, Dataset, Example, Split, Target};

pub const IMAGE_SIZE: usize = 75;
pub const OBJECT_SIZE: usize = 5;
pub const N_OBJECTS: usize = 6;
pub const QUESTION_BITS: usize = 11;
pub const QUESTIONS_PER_IMAGE: usize = 20;
pub const N_ANSWERS: usize = 12;

pub const COLORS: [[u8; 3]; N_OBJECTS] = [
    [255, 0, 0],
    [0, 255, 0],
    [0, 0, 255],
    [255, 156, 0],
    [128, 128, 128],
    [255, 255, 0],
];

pub const SQUARE: u8 = 0;
pub const CIRCLE: u8 = 1;
pub const ANSWER_LEFT: u8 = 2;
pub const ANSWER_RIGHT: u8 = 3;
pub const ANSWER_TOP: u8 = 4;
pub const ANSWER_BOTTOM: u8 = 5;
pub const ANSWER_COUNT0: u8 = 6;

const MAX_TRIES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Object {
    pub shape: u8,
    pub x: u8,
    pub y: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Question {
    pub color: u8,
    pub relational: bool,
    pub subtype: u8,
    pub answer: u8,
}

impl Question {
    pub fn bits(&self) -> [u8; QUESTION_BITS] {
        let mut q = [0u8; QUESTION_BITS];
        q[self.color as usize] = 1;
        q[N_OBJECTS + self.relational as usize] = 1;
        q[N_OBJECTS + 2 + self.subtype as usize] = 1;
        q
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scene {
    /// Object `i` has color `i`.
    pub objects: [Object; N_OBJECTS],
}

fn dist2(a: &Object, b: &Object) -> i64 {
    let (dx, dy) = (a.x as i64 - b.x as i64, a.y as i64 - b.y as i64);
    dx * dx + dy * dy
}

/// Answer from the scene graph alone.
pub fn answer(scene: &Scene, color: u8, relational: bool, subtype: u8) -> u8 {
    let objs = &scene.objects;
    let me = &objs[color as usize];
    let half = (IMAGE_SIZE / 2) as u8;
    match (relational, subtype) {
        (false, 0) => me.shape,
        (false, 1) => {
            if me.x < half {
                ANSWER_LEFT
            } else {
                ANSWER_RIGHT
            }
        }
        (false, _) => {
            if me.y < half {
                ANSWER_TOP
            } else {
                ANSWER_BOTTOM
            }
        }
        (true, 0) | (true, 1) => {
            let nearest = subtype == 0;
            let mut best: Option<(usize, i64)> = None;
            for (i, o) in objs.iter().enumerate() {
                if i == color as usize {
                    continue;
                }
                let d = dist2(me, o);
                let better = match best {
                    None => true,
                    Some((_, bd)) => (nearest && d < bd) || (!nearest && d > bd),
                };
                if better {
                    best = Some((i, d));
                }
            }
            objs[best.expect("six objects").0].shape
        }
        (true, _) => {
            let same = objs
                .iter()
                .enumerate()
                .filter(|(i, o)| *i != color as usize && o.shape == me.shape)
                .count();
            ANSWER_COUNT0 + same as u8
        }
    }
}

pub fn render(scene: &Scene) -> Vec<u8> {
    let n = IMAGE_SIZE;
    let mut px = vec![255u8; n * n * 3];
    let r = OBJECT_SIZE as i64;
    for (c, o) in scene.objects.iter().enumerate() {
        for dy in -r..=r {
            for dx in -r..=r {
                if o.shape == CIRCLE && dx * dx + dy * dy > r * r {
                    continue;
                }
                let (x, y) = (o.x as i64 + dx, o.y as i64 + dy);
                if x < 0 || y < 0 || x >= n as i64 || y >= n as i64 {
                    continue;
                }
                let at = (y as usize * n + x as usize) * 3;
                px[at..at + 3].copy_from_slice(&COLORS[c]);
            }
        }
    }
    px
}

pub fn sample(seed: u64, split: Split, index: usize) -> Result<(Scene, Vec<Question>)> {
    let mut rng = sample_rng(seed, split, index as u64);
    let lo = OBJECT_SIZE as u8;
    let hi = (IMAGE_SIZE - OBJECT_SIZE) as u8;
    let mut objects = Vec::with_capacity(N_OBJECTS);
    let min_d2 = (2 * OBJECT_SIZE as i64).pow(2);
    let mut tries = 0;
    while objects.len() < N_OBJECTS {
        tries += 1;
        if tries > MAX_TRIES {
            return Err(Error::numeric("could not place six non-overlapping objects"));
        }
        let o = Object {
            shape: rng.gen_range(0..2),
            x: rng.gen_range(lo..hi),
            y: rng.gen_range(lo..hi),
        };
        if objects.iter().all(|p| dist2(p, &o) >= min_d2) {
            objects.push(o);
        }
    }
    let scene = Scene {
        objects: objects.try_into().expect("six objects"),
    };
    let mut questions = Vec::with_capacity(QUESTIONS_PER_IMAGE);
    for k in 0..QUESTIONS_PER_IMAGE {
        let relational = k >= QUESTIONS_PER_IMAGE / 2;
        let color = rng.gen_range(0..N_OBJECTS as u8);
        let subtype = rng.gen_range(0..3u8);
        questions.push(Question {
            color,
            relational,
            subtype,
            answer: answer(&scene, color, relational, subtype),
        });
    }
    Ok((scene, questions))
}

pub fn record_size() -> usize {
    N_OBJECTS * 3 + QUESTIONS_PER_IMAGE * 4 + IMAGE_SIZE * IMAGE_SIZE * 3
}

fn encode(scene: &Scene, questions: &[Question]) -> Vec<u8> {
    let mut out = Vec::with_capacity(record_size());
    for o in &scene.objects {
        out.extend_from_slice(&[o.shape, o.x, o.y]);
    }
    for q in questions {
        out.extend_from_slice(&[q.color, q.relational as u8, q.subtype, q.answer]);
    }
    out.extend_from_slice(&render(scene));
    out
}

pub fn decode(record: &[u8]) -> (Scene, Vec<Question>, &[u8]) {
    let objects: Vec<Object> = record[..N_OBJECTS * 3]
        .chunks(3)
        .map(|c| Object {
            shape: c[0],
            x: c[1],
            y: c[2],
        })
        .collect();
    let qs = &record[N_OBJECTS * 3..N_OBJECTS * 3 + QUESTIONS_PER_IMAGE * 4];
    let questions = qs
        .chunks(4)
        .map(|c| Question {
            color: c[0],
            relational: c[1] == 1,
            subtype: c[2],
            answer: c[3],
        })
        .collect();
    (
        Scene {
            objects: objects.try_into().expect("six objects"),
        },
        questions,
        &record[N_OBJECTS * 3 + QUESTIONS_PER_IMAGE * 4..],
    )
}

pub fn generate(task: &TaskConfig, split: Split, n: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("dataset needs at least one image"));
    }
    let records = map_indexed(n, |i| sample(task.seed, split, i).map(|(s, q)| encode(&s, &q)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_records(task, split, record_size(), records))
}

pub(crate) fn example(record: &[u8], slot: usize) -> Example<'_> {
    let base = N_OBJECTS * 3 + slot * 4;
    let q = Question {
        color: record[base],
        relational: record[base + 1] == 1,
        subtype: record[base + 2],
        answer: record[base + 3],
    };
    Example {
        pixels: Some(&record[N_OBJECTS * 3 + QUESTIONS_PER_IMAGE * 4..]),
        question: Some(q.bits()),
        tokens: None,
        target: Target::Class(q.answer as usize),
        relational: Some(q.relational),
    }
}
