mod oracles;

use fvstage_core::fisher::{encode, normalize, FisherVector};
use fvstage_core::Matrix;
use oracles::*;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn encode_matches_scalar_equations() {
    let mut r = rng(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let k = r.random_range(1..=4);
        let d = r.random_range(1..=5);
        let t = r.random_range(1..=20);
        let g = random_gmm(&mut r, k, d);
        let x = random_matrix(&mut r, t, d, 3.0);
        let fast = encode(&g, &x).unwrap().values;
        let slow = fisher_naive(&g, &x);
        assert_eq!(fast.len(), slow.len());
        for (a, b) in fast.iter().zip(&slow) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-10, "max abs diff {worst}");
}

#[test]
fn small_instance_to_1e12() {
    let mut r = rng(7);
    let g = random_gmm(&mut r, 2, 3);
    let x = random_matrix(&mut r, 7, 3, 2.0);
    let fast = encode(&g, &x).unwrap().values;
    let slow = fisher_naive(&g, &x);
    for (a, b) in fast.iter().zip(&slow) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn orderless_and_duplication_invariant() {
    let mut r = rng(99);
    for _ in 0..50 {
        let g = random_gmm(&mut r, 3, 4);
        let x = random_matrix(&mut r, 12, 4, 2.5);
        let base = encode(&g, &x).unwrap().values;

        let mut idx: Vec<usize> = (0..12).collect();
        idx.shuffle(&mut r);
        let shuffled = encode(&g, &x.select_rows(&idx)).unwrap().values;
        let doubled = encode(&g, &Matrix::vstack(&[x.clone(), x.clone()]).unwrap()).unwrap().values;
        for i in 0..base.len() {
            assert!((base[i] - shuffled[i]).abs() < 1e-12);
            assert!((base[i] - doubled[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn normalization_properties() {
    let mut r = rng(5);
    for _ in 0..100 {
        let v: Vec<f64> = (0..30).map(|_| r.random::<f64>() * 10.0 - 5.0).collect();
        let n = normalize(FisherVector { values: v, normalized: false }, 0.5);
        let norm: f64 = n.values.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let again = normalize(FisherVector { values: n.values.clone(), normalized: false }, 1.0);
        for (a, b) in again.values.iter().zip(&n.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
