//! Three Gaussian point clusters on a blank grayscale image; the label says
//! whether the cluster midpoints form an equilateral triangle.
//!
//! Lengths are given for 64×64 and scaled with the image size:
//! equality tolerance 1.5 px, cluster scatter σ = 1.5 px, 5 points per
//! cluster, midpoints at least 12 px apart. Negatives have a midpoint
//! distance spread of at least twice the tolerance.
//!
//! Record layout: label `u8`, midpoints `6 × f32`, points `15 × (x, y) u8`,
//! then `size²` pixels.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::config::TaskConfig;
use crate::error::{Error, Result};
use crate::parallel::map_indexed;

use super::{sample_rng, Dataset, Example, Split, Target};

pub const POINTS_PER_CLUSTER: usize = 5;
const MAX_TRIES: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    pub tol: f64,
    pub sigma: f64,
    pub min_sep: f64,
    /// Midpoints stay this far from the border.
    pub margin: f64,
}

impl Geometry {
    pub fn for_size(size: usize) -> Self {
        let s = size as f64 / 64.0;
        Self {
            tol: 1.5 * s,
            sigma: 1.5 * s,
            min_sep: 12.0 * s,
            margin: 3.0 * 1.5 * s,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMeta {
    pub label: bool,
    pub midpoints: [[f32; 2]; 3],
    pub points: Vec<[u8; 2]>,
}

pub fn record_size(size: usize) -> usize {
    1 + 6 * 4 + 3 * POINTS_PER_CLUSTER * 2 + size * size
}

/// Max minus min of the three pairwise midpoint distances.
pub fn spread(m: &[[f32; 2]; 3]) -> f64 {
    let d = |a: [f32; 2], b: [f32; 2]| {
        let (dx, dy) = (a[0] as f64 - b[0] as f64, a[1] as f64 - b[1] as f64);
        (dx * dx + dy * dy).sqrt()
    };
    let ds = [d(m[0], m[1]), d(m[1], m[2]), d(m[0], m[2])];
    ds.iter().cloned().fold(f64::MIN, f64::max) - ds.iter().cloned().fold(f64::MAX, f64::min)
}

fn min_distance(m: &[[f32; 2]; 3]) -> f64 {
    let d = |a: [f32; 2], b: [f32; 2]| ((a[0] - b[0]).powi(2) as f64 + (a[1] - b[1]).powi(2) as f64).sqrt();
    d(m[0], m[1]).min(d(m[1], m[2])).min(d(m[0], m[2]))
}

fn midpoints<R: Rng>(rng: &mut R, size: usize, g: &Geometry, positive: bool) -> Result<[[f32; 2]; 3]> {
    let (lo, hi) = (g.margin, size as f64 - 1.0 - g.margin);
    let inside = |m: &[[f32; 2]; 3]| {
        m.iter()
            .all(|p| (p[0] as f64) >= lo && (p[0] as f64) <= hi && (p[1] as f64) >= lo && (p[1] as f64) <= hi)
    };
    for _ in 0..MAX_TRIES {
        let m = if positive {
            let side = rng.gen_range(g.min_sep..=(hi - lo));
            let cx = rng.gen_range(lo..=hi);
            let cy = rng.gen_range(lo..=hi);
            let rot = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = side / 3f64.sqrt();
            let mut m = [[0f32; 2]; 3];
            for (k, p) in m.iter_mut().enumerate() {
                let a = rot + k as f64 * std::f64::consts::TAU / 3.0;
                *p = [(cx + r * a.cos()) as f32, (cy + r * a.sin()) as f32];
            }
            m
        } else {
            let mut m = [[0f32; 2]; 3];
            for p in m.iter_mut() {
                *p = [rng.gen_range(lo..=hi) as f32, rng.gen_range(lo..=hi) as f32];
            }
            m
        };
        if !inside(&m) || min_distance(&m) < g.min_sep {
            continue;
        }
        let s = spread(&m);
        if (positive && s <= g.tol) || (!positive && s >= 2.0 * g.tol) {
            return Ok(m);
        }
    }
    Err(Error::numeric(format!(
        "could not place a {} triangle in a {size}x{size} image after {MAX_TRIES} tries",
        if positive { "positive" } else { "negative" }
    )))
}

/// Sample `index` of a split: even indices are positive, odd negative.
pub fn sample(size: usize, seed: u64, split: Split, index: usize) -> Result<(TriangleMeta, Vec<u8>)> {
    if size == 0 {
        return Err(Error::config("image size must be positive"));
    }
    let g = Geometry::for_size(size);
    let mut rng = sample_rng(seed, split, index as u64);
    let positive = index % 2 == 0;
    let mids = midpoints(&mut rng, size, &g, positive)?;
    let noise = Normal::new(0.0, g.sigma).expect("positive sigma");
    let mut pixels = vec![0u8; size * size];
    let mut points = Vec::with_capacity(3 * POINTS_PER_CLUSTER);
    for m in &mids {
        for _ in 0..POINTS_PER_CLUSTER {
            let x = (m[0] as f64 + noise.sample(&mut rng)).round().clamp(0.0, size as f64 - 1.0) as usize;
            let y = (m[1] as f64 + noise.sample(&mut rng)).round().clamp(0.0, size as f64 - 1.0) as usize;
            pixels[y * size + x] = 255;
            points.push([x as u8, y as u8]);
        }
    }
    Ok((
        TriangleMeta {
            label: positive,
            midpoints: mids,
            points,
        },
        pixels,
    ))
}

fn encode(meta: &TriangleMeta, pixels: &[u8]) -> Vec<u8> {
    let mut out = vec![meta.label as u8];
    for m in &meta.midpoints {
        out.extend_from_slice(&m[0].to_le_bytes());
        out.extend_from_slice(&m[1].to_le_bytes());
    }
    for p in &meta.points {
        out.extend_from_slice(p);
    }
    out.extend_from_slice(pixels);
    out
}

pub fn decode(size: usize, record: &[u8]) -> (TriangleMeta, &[u8]) {
    let f = |i: usize| f32::from_le_bytes(record[1 + 4 * i..5 + 4 * i].try_into().unwrap());
    let mut midpoints = [[0f32; 2]; 3];
    for (k, m) in midpoints.iter_mut().enumerate() {
        *m = [f(2 * k), f(2 * k + 1)];
    }
    let pts = &record[25..25 + 6 * POINTS_PER_CLUSTER];
    let points = pts.chunks(2).map(|c| [c[0], c[1]]).collect();
    (
        TriangleMeta {
            label: record[0] == 1,
            midpoints,
            points,
        },
        &record[25 + 6 * POINTS_PER_CLUSTER..][..size * size],
    )
}

pub fn generate(task: &TaskConfig, split: Split, n: usize) -> Result<Dataset> {
    if !matches!(task.image_size, 32 | 64) {
        return Err(Error::config(format!(
            "triangle images must be 32 or 64 pixels, got {}",
            task.image_size
        )));
    }
    if n == 0 {
        return Err(Error::config("dataset needs at least one sample"));
    }
    let size = task.image_size;
    let records = map_indexed(n, |i| sample(size, task.seed, split, i).map(|(m, p)| encode(&m, &p)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::from_records(task, split, record_size(size), records))
}

pub(crate) fn example<'a>(task: &TaskConfig, record: &'a [u8]) -> Example<'a> {
    let (meta, pixels) = decode(task.image_size, record);
    Example {
        pixels: Some(pixels),
        question: None,
        tokens: None,
        target: Target::Class(meta.label as usize),
        relational: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_alternate_and_geometry_holds() {
        for i in 0..40 {
            let (m, px) = sample(32, 7, Split::Train, i).unwrap();
            let g = Geometry::for_size(32);
            let s = spread(&m.midpoints);
            assert_eq!(m.label, i % 2 == 0);
            assert!(if m.label { s <= g.tol } else { s >= 2.0 * g.tol });
            assert_eq!(px.iter().filter(|&&v| v == 255).count() <= 15, true);
            assert!(px.iter().all(|&v| v == 0 || v == 255));
        }
    }

    #[test]
    fn record_round_trip() {
        let (m, px) = sample(64, 3, Split::Test, 5).unwrap();
        let rec = encode(&m, &px);
        assert_eq!(rec.len(), record_size(64));
        let (back, bpx) = decode(64, &rec);
        assert_eq!(back, m);
        assert_eq!(bpx, &px[..]);
    }

    #[test]
    fn unsupported_size_rejected() {
        let task = TaskConfig {
            image_size: 48,
            ..Default::default()
        };
        assert!(generate(&task, Split::Train, 4).is_err());
    }
}
