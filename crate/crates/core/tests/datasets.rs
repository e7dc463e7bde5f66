//! Generators checked against answers recomputed from what a model sees:
//! triangle labels from the decoded geometry and lit pixels, Sort-of-CLEVR
//! answers from the rendered canvas, copy targets from the token stream.

use sharedws::config::{TaskConfig, TaskKind};
use sharedws::tasks::clevr::{self, COLORS, IMAGE_SIZE, N_OBJECTS, OBJECT_SIZE, QUESTIONS_PER_IMAGE};
use sharedws::tasks::{generate, triangles, Split, Target};

pub const SAMPLES: usize = 1000;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Disagreements between the triangle generator and the geometry oracle.
pub fn triangle_mismatches(size: usize, n: usize) -> Vec<String> {
    let task = TaskConfig {
        kind: TaskKind::Triangles,
        n_train: n,
        image_size: size,
        seed: 77,
        ..Default::default()
    };
    let data = generate(&task, Split::Train).unwrap();
    let scale = size as f64 / 64.0;
    let (tol, sigma, sep) = (1.5 * scale, 1.5 * scale, 12.0 * scale);
    let mut bad = Vec::new();
    for i in 0..n {
        let (meta, pixels) = triangles::decode(size, data.record(i));
        let m: Vec<[f64; 2]> = meta.midpoints.iter().map(|p| [p[0] as f64, p[1] as f64]).collect();
        let sides = [dist(m[0], m[1]), dist(m[1], m[2]), dist(m[2], m[0])];
        let mut worst = 0f64;
        for a in sides {
            for b in sides {
                worst = worst.max((a - b).abs());
            }
        }
        let equilateral = if worst <= tol {
            Some(true)
        } else if worst >= 2.0 * tol {
            Some(false)
        } else {
            None
        };
        if equilateral != Some(meta.label) {
            bad.push(format!("sample {i}: label {} but side spread {worst:.3}", meta.label));
        }
        if sides.iter().any(|&s| s < sep) {
            bad.push(format!("sample {i}: clusters closer than {sep}"));
        }
        let expected = match data.example(i).target {
            Target::Class(c) => c == 1,
            _ => unreachable!(),
        };
        if expected != meta.label {
            bad.push(format!("sample {i}: example target disagrees with record"));
        }
        // Every lit pixel is a recorded point near its own cluster and vice versa.
        let mut lit = vec![false; size * size];
        for (k, p) in meta.points.iter().enumerate() {
            let c = m[k / triangles::POINTS_PER_CLUSTER];
            if dist([p[0] as f64, p[1] as f64], c) > 6.0 * sigma + 1.0 {
                bad.push(format!("sample {i}: point {k} strays from its cluster"));
            }
            lit[p[1] as usize * size + p[0] as usize] = true;
        }
        for (j, &v) in pixels.iter().enumerate() {
            if (v == 255) != lit[j] || (v != 0 && v != 255) {
                bad.push(format!("sample {i}: pixel {j} does not match the points"));
                break;
            }
        }
    }
    bad
}

/// Object `(shape, x, y)` recovered from the canvas, if exactly one
/// placement explains the pixels of its color.
fn locate(px: &[u8], color: usize) -> Option<(u8, i64, i64)> {
    let n = IMAGE_SIZE as i64;
    let r = OBJECT_SIZE as i64;
    let at = |x: i64, y: i64| {
        let i = ((y * n + x) * 3) as usize;
        [px[i], px[i + 1], px[i + 2]]
    };
    let owner = |x: i64, y: i64| COLORS.iter().position(|c| *c == at(x, y));
    let mine: Vec<(i64, i64)> = (0..n)
        .flat_map(|y| (0..n).map(move |x| (x, y)))
        .filter(|&(x, y)| owner(x, y) == Some(color))
        .collect();
    let (x0, x1) = (mine.iter().map(|p| p.0).min()?, mine.iter().map(|p| p.0).max()?);
    let (y0, y1) = (mine.iter().map(|p| p.1).min()?, mine.iter().map(|p| p.1).max()?);
    let mut found = Vec::new();
    for cy in y1 - r..=y0 + r {
        for cx in x1 - r..=x0 + r {
            for shape in [clevr::SQUARE, clevr::CIRCLE] {
                let covers = |x: i64, y: i64| {
                    let (dx, dy) = (x - cx, y - cy);
                    dx.abs() <= r && dy.abs() <= r && (shape == clevr::SQUARE || dx * dx + dy * dy <= r * r)
                };
                // Later colors are painted on top, so a covered pixel may
                // belong to one of them but never to an earlier color or
                // the background.
                let fits = mine.iter().all(|&(x, y)| covers(x, y))
                    && (cy - r..=cy + r).all(|y| {
                        (cx - r..=cx + r).all(|x| {
                            !covers(x, y) || x < 0 || y < 0 || x >= n || y >= n || owner(x, y).is_some_and(|o| o >= color)
                        })
                    });
                if fits {
                    found.push((shape, cx, cy));
                }
            }
        }
    }
    (found.len() == 1).then(|| found[0])
}

/// Disagreements between stored answers and answers read off the canvas.
pub fn clevr_mismatches(n: usize) -> Vec<String> {
    let task = TaskConfig {
        kind: TaskKind::SortOfClevr,
        n_train: n,
        seed: 78,
        ..Default::default()
    };
    let data = generate(&task, Split::Train).unwrap();
    let mut bad = Vec::new();
    for i in 0..n {
        let (_, questions, px) = clevr::decode(data.record(i));
        let objs: Vec<(u8, i64, i64)> = match (0..N_OBJECTS).map(|c| locate(px, c)).collect::<Option<Vec<_>>>() {
            Some(o) => o,
            None => {
                bad.push(format!("image {i}: objects cannot be read off the canvas"));
                continue;
            }
        };
        let half = IMAGE_SIZE as i64 / 2;
        for (j, q) in questions.iter().enumerate() {
            let c = q.color as usize;
            let (shape, x, y) = objs[c];
            let d2 = |o: usize| (objs[o].1 - x).pow(2) + (objs[o].2 - y).pow(2);
            let others = (0..N_OBJECTS).filter(|&o| o != c);
            let expect = match (q.relational, q.subtype) {
                (false, 0) => shape,
                (false, 1) => 2 + u8::from(x >= half),
                (false, _) => 4 + u8::from(y >= half),
                (true, 0) => objs[others.min_by_key(|&o| (d2(o), o)).unwrap()].0,
                (true, 1) => objs[others.min_by_key(|&o| (-d2(o), o)).unwrap()].0,
                (true, _) => 6 + others.filter(|&o| objs[o].0 == shape).count() as u8,
            };
            if expect != q.answer {
                bad.push(format!("image {i} question {j}: stored {} oracle {expect}", q.answer));
            }
            let ex = data.example(i * QUESTIONS_PER_IMAGE + j);
            let bits = ex.question.unwrap();
            let decoded = (
                bits[..N_OBJECTS].iter().position(|&b| b == 1),
                bits[N_OBJECTS + 1] == 1,
                bits[N_OBJECTS + 2..].iter().position(|&b| b == 1),
            );
            if decoded != (Some(c), q.relational, Some(q.subtype as usize))
                || ex.target != Target::Class(q.answer as usize)
                || ex.relational != Some(q.relational)
            {
                bad.push(format!("image {i} question {j}: example encoding disagrees"));
            }
        }
    }
    bad
}

/// Disagreements between copy targets and the token stream.
pub fn copy_mismatches(n: usize) -> Vec<String> {
    let task = TaskConfig {
        kind: TaskKind::Copy,
        n_train: n,
        vocab: 6,
        seq_len: 10,
        seed: 79,
        ..Default::default()
    };
    let data = generate(&task, Split::Train).unwrap();
    let p = task.seq_len / 2;
    let mut bad = Vec::new();
    for i in 0..n {
        let ex = data.example(i);
        let tokens = ex.tokens.clone().unwrap();
        let targets = ex.targets();
        let ok = tokens.len() == task.seq_len
            && targets.len() == task.seq_len
            && tokens[p] == task.vocab
            && tokens.iter().enumerate().all(|(t, &s)| t == p || s < task.vocab)
            && (0..task.seq_len).all(|t| targets[t] == (t >= p).then(|| tokens[t - p]))
            && (p + 1..task.seq_len).all(|t| tokens[t] == tokens[t - p - 1]);
        if !ok {
            bad.push(format!("sample {i}: tokens {tokens:?} targets {targets:?}"));
        }
    }
    bad
}

#[test]
fn triangle_labels_match_geometry() {
    for size in [32, 64] {
        let bad = triangle_mismatches(size, SAMPLES);
        assert!(bad.is_empty(), "{size}px: {:?}", &bad[..bad.len().min(5)]);
    }
}

#[test]
fn clevr_answers_match_canvas() {
    let bad = clevr_mismatches(SAMPLES);
    assert!(bad.is_empty(), "{:?}", &bad[..bad.len().min(5)]);
}

#[test]
fn copy_targets_match_tokens() {
    let bad = copy_mismatches(SAMPLES);
    assert!(bad.is_empty(), "{:?}", &bad[..bad.len().min(5)]);
}

#[test]
fn generation_is_order_independent() {
    let task = TaskConfig {
        kind: TaskKind::Triangles,
        n_train: 40,
        ..Default::default()
    };
    let all = generate(&task, Split::Train).unwrap();
    for i in [0, 7, 39] {
        let (meta, px) = triangles::sample(task.image_size, task.seed, Split::Train, i).unwrap();
        let (m2, p2) = triangles::decode(task.image_size, all.record(i));
        assert_eq!(meta, m2);
        assert_eq!(px, p2);
    }
    let fewer = TaskConfig { n_train: 8, ..task };
    let head = generate(&fewer, Split::Train).unwrap();
    assert_eq!(head.record(7), all.record(7));
}
