mod oracles;

use fvstage_core::attention::{
    attend, relu_linear_attention, relu_linear_similarity, softmax_attention, softmax_similarity, AttentionKind,
    AttentionParams, DEFAULT_EPS,
};
use oracles::*;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn both_kinds_match_naive_oracles() {
    let mut r = rng(61);
    for t in 0..200 {
        let n = r.random_range(1..=8);
        let f = r.random_range(1..=6);
        let d = r.random_range(1..=5);
        let p = AttentionParams::random(f, d, t);
        let x = random_matrix(&mut r, n, f, 1.0);
        let (q, k, _) = p.project(&x).unwrap();

        let (out, sim) = softmax_attention_naive(&x, &p);
        let fast = softmax_attention(&x, &p).unwrap();
        let fast_sim = softmax_similarity(&q, &k);
        for (a, b) in fast.as_slice().iter().zip(out.as_slice()).chain(fast_sim.as_slice().iter().zip(sim.as_slice())) {
            assert!((a - b).abs() < 1e-12);
        }

        let (out, sim) = relu_attention_naive(&x, &p, DEFAULT_EPS);
        let fast = relu_linear_attention(&x, &p, DEFAULT_EPS).unwrap();
        let fast_sim = relu_linear_similarity(&q, &k, DEFAULT_EPS);
        for (a, b) in fast.as_slice().iter().zip(out.as_slice()).chain(fast_sim.as_slice().iter().zip(sim.as_slice())) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn similarity_rows_sum_to_one() {
    let mut r = rng(62);
    for t in 0..200 {
        let n = r.random_range(1..=10);
        let p = AttentionParams::random(4, 3, t);
        let x = random_matrix(&mut r, n, 4, 3.0);
        let (q, k, _) = p.project(&x).unwrap();
        let s = softmax_similarity(&q, &k);
        for i in 0..n {
            assert!((s.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let s = relu_linear_similarity(&q, &k, DEFAULT_EPS);
        for i in 0..n {
            let qi: Vec<f64> = q.row(i).iter().map(|v| v.max(0.0)).collect();
            let denom: f64 = (0..n).map(|j| k.row(j).iter().zip(&qi).map(|(a, b)| a.max(0.0) * b).sum::<f64>()).sum();
            // each row sums to denom / (denom + eps) exactly, so the gap to 1
            // only falls under 1e-6 once denom is above roughly 1e6 * eps
            let rs = s.row(i).iter().sum::<f64>();
            assert!((rs - denom / (denom + DEFAULT_EPS)).abs() < 1e-12);
            if denom > 1e6 * DEFAULT_EPS {
                assert!((rs - 1.0).abs() < 1e-6, "denom {denom} sum {rs}");
            }
        }
    }
}

#[test]
fn permutation_equivariant() {
    let mut r = rng(63);
    for t in 0..50 {
        let n = r.random_range(2..=8);
        let p = AttentionParams::random(5, 4, t);
        let x = random_matrix(&mut r, n, 5, 1.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        for kind in [AttentionKind::Softmax, AttentionKind::ReluLinear] {
            let base = attend(&x, &p, kind, DEFAULT_EPS).unwrap();
            let moved = attend(&x.select_rows(&perm), &p, kind, DEFAULT_EPS).unwrap();
            for (i, &src) in perm.iter().enumerate() {
                for (a, b) in moved.row(i).iter().zip(base.row(src)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }
}
