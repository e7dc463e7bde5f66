use proptest::prelude::*;

use sharedws::attention::{scaled_dot_attention, AttnOpts, ProjectionSet, ProjectionSpec, Selection};
use sharedws::autodiff::Tape;
use sharedws::params::{Initializer, ParamStore};
use sharedws::tasks::{sample_seed, Split};
use sharedws::tensor::Tensor;
use sharedws::workspace::{broadcast_step, gated_update, write_step, GateInput, GateStyle, GatingParams, WriteOpts};

pub fn proj(store: &mut ParamStore<f32>, init: &mut Initializer, name: &str, q: usize, kv: usize, out: usize) -> ProjectionSet {
    ProjectionSet::new(
        store,
        init,
        name,
        ProjectionSpec {
            query_in: q,
            kv_in: kv,
            out_dim: out,
            n_heads: 2,
            key_dim: 3,
            value_dim: out / 2,
            output_proj: false,
        },
    )
    .unwrap()
}

pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut s = seed;
    for i in (1..n).rev() {
        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        p.swap(i, (s >> 33) as usize % (i + 1));
    }
    p
}

pub fn permute_rows(data: &[f32], width: usize, perm: &[usize]) -> Vec<f32> {
    perm.iter().flat_map(|&i| data[i * width..(i + 1) * width].to_vec()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_is_permutation_invariant(n_s in 1usize..9, n_m in 1usize..5, seed in any::<u64>(), k in 1usize..9) {
        let (d, n_l) = (6, 4);
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::<f32>::new();
        let p = proj(&mut store, &mut init, "w", n_l, d, n_l);
        let m: Tensor<f32> = init.uniform(&[n_m, n_l], 1.0);
        let r: Tensor<f32> = init.uniform(&[n_s, d], 1.0);
        let perm = permutation(n_s, seed);
        let rp = Tensor::from_vec(&[n_s, d], permute_rows(r.data(), d, &perm)).unwrap();
        for selection in [Selection::Soft, Selection::TopK(k.min(n_s))] {
            let mut tape = Tape::new();
            let vm = tape.constant(m.clone());
            let (a, b) = (tape.constant(r.clone()), tape.constant(rp.clone()));
            let opts = || WriteOpts { selection, ..Default::default() };
            let x = write_step(&mut tape, &store, &p, vm, a, opts()).unwrap().candidate;
            let y = write_step(&mut tape, &store, &p, vm, b, opts()).unwrap().candidate;
            let diff = tape.value(x).max_abs_diff(tape.value(y));
            prop_assert!(diff <= 1e-5, "{selection:?}: {diff:e}");
        }
    }

    #[test]
    fn broadcast_is_permutation_equivariant(n_s in 1usize..9, seed in any::<u64>()) {
        let (d, n_m, n_l) = (6, 3, 4);
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::<f32>::new();
        let p = proj(&mut store, &mut init, "r", d, n_l, d);
        let m: Tensor<f32> = init.uniform(&[n_m, n_l], 1.0);
        let h: Tensor<f32> = init.uniform(&[n_s, d], 1.0);
        let perm = permutation(n_s, seed);
        let hp = Tensor::from_vec(&[n_s, d], permute_rows(h.data(), d, &perm)).unwrap();
        let mut tape = Tape::new();
        let vm = tape.constant(m);
        let (a, b) = (tape.constant(h), tape.constant(hp));
        let x = broadcast_step(&mut tape, &store, &p, a, vm).unwrap();
        let y = broadcast_step(&mut tape, &store, &p, b, vm).unwrap();
        let xp = permute_rows(tape.data(x), d, &perm);
        prop_assert_eq!(xp, tape.data(y).to_vec());
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, seed in any::<u64>(), masked in any::<u64>()) {
        let mut init = Initializer::new(seed);
        let x: Tensor<f64> = init.uniform(&[rows, cols], 30.0);
        let mask: Vec<bool> = (0..rows * cols).map(|i| (masked >> (i % 64)) & 1 == 1).collect();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let s = tape.softmax_masked(v, Some(&mask)).unwrap();
        for (r, row) in tape.data(s).chunks(cols).enumerate() {
            let m = &mask[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            if m.iter().all(|&b| b) {
                prop_assert!(row.iter().all(|&w| w == 0.0));
            } else {
                prop_assert!((sum - 1.0).abs() < 1e-12);
                for (w, &hidden) in row.iter().zip(m) {
                    prop_assert!(*w >= 0.0);
                    if hidden {
                        prop_assert_eq!(*w, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn topk_keeps_k_and_all_keys_is_soft(nq in 1usize..4, nk in 1usize..8, k in 1usize..10, seed in any::<u64>()) {
        let mut init = Initializer::new(seed);
        let q: Tensor<f64> = init.uniform(&[nq, 3], 1.0);
        let key: Tensor<f64> = init.uniform(&[nk, 3], 1.0);
        let v: Tensor<f64> = init.uniform(&[nk, 2], 1.0);
        let mut tape = Tape::new();
        let (q, key, v) = (tape.constant(q), tape.constant(key), tape.constant(v));
        let soft = scaled_dot_attention(&mut tape, q, key, v, AttnOpts::default()).unwrap();
        let hard = scaled_dot_attention(&mut tape, q, key, v, AttnOpts { selection: Selection::TopK(k), ..Default::default() }).unwrap();
        if k >= nk {
            prop_assert_eq!(tape.data(soft.values), tape.data(hard.values));
        } else {
            for row in tape.data(hard.weights).chunks(nk) {
                prop_assert_eq!(row.iter().filter(|&&w| w > 0.0).count(), k);
            }
        }
        for sel in hard.selected.unwrap() {
            prop_assert_eq!(sel.len(), k.min(nk));
        }
    }

    #[test]
    fn gated_memory_stays_bounded(n_s in 1usize..6, seed in any::<u64>(), unit in any::<bool>()) {
        let (d, n_m, n_l) = (5, 3, 4);
        let style = if unit { GateStyle::Unit } else { GateStyle::Memory };
        let mut init = Initializer::new(seed);
        let mut store = ParamStore::<f64>::new();
        let g = GatingParams::new(&mut store, &mut init, "g", d, n_l, style).unwrap();
        let mut tape = Tape::new();
        let prev: Tensor<f64> = init.uniform(&[n_m, n_l], 3.0);
        let bound: Vec<f64> = prev.data().iter().map(|v| v.abs() + 1.0).collect();
        let prev = tape.constant(prev);
        let cand = tape.constant(init.uniform(&[n_m, n_l], 10.0));
        let x = tape.constant(init.uniform(&[n_s, d], 1.0));
        let m = gated_update(&mut tape, &store, &g, cand, prev, GateInput::Rows(x)).unwrap();
        for (v, b) in tape.data(m).iter().zip(bound) {
            prop_assert!(v.abs() <= b);
        }
    }

    #[test]
    fn sample_seeds_are_distinct_per_index(master in any::<u64>(), i in 0u64..1_000_000) {
        prop_assert_ne!(sample_seed(master, Split::Train, i), sample_seed(master, Split::Train, i + 1));
        prop_assert_ne!(sample_seed(master, Split::Train, i), sample_seed(master, Split::Test, i));
    }
}
