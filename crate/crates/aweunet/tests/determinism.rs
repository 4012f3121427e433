//! Bitwise agreement between the data-parallel kernels and their
//! sequential counterparts, plus end-to-end run-to-run stability.

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aweunet::kernels;

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn conv2d_parallel_matches_sequential_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..10 {
        let ci = rng.gen_range(1..6);
        let co = rng.gen_range(1..6);
        let s = rng.gen_range(3..20);
        let x = Array3::from_shape_fn((ci, s, s), |_| rng.gen_range(-1.0..1.0));
        let w = Array4::from_shape_fn((co, ci, 3, 3), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(co, |_| rng.gen_range(-1.0..1.0));
        let p = kernels::conv2d(x.view(), w.view(), &b, 1);
        let q = kernels::conv2d_seq(x.view(), w.view(), &b, 1);
        assert!(
            bitwise_eq(p.as_slice().unwrap(), q.as_slice().unwrap()),
            "conv2d case {case}"
        );
    }
}

#[test]
fn attention_aggregate_parallel_matches_sequential_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..10 {
        let r = rng.gen_range(1..5);
        let c = rng.gen_range(1..8);
        let n = rng.gen_range(1..120);
        let a = Array2::from_shape_fn((r, n), |_| rng.gen_range(-1.0..1.0));
        let b = Array2::from_shape_fn((r, n), |_| rng.gen_range(-1.0..1.0));
        let cm = Array2::from_shape_fn((c, n), |_| rng.gen_range(-1.0..1.0));
        let p = kernels::attention_aggregate(a.view(), b.view(), cm.view());
        let q = kernels::attention_aggregate_seq(a.view(), b.view(), cm.view());
        assert!(
            bitwise_eq(p.as_slice().unwrap(), q.as_slice().unwrap()),
            "attention case {case}"
        );
    }
}

#[test]
fn attention_gradients_are_run_to_run_stable() {
    // the chunked backward reduction must not depend on thread scheduling
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Array2::from_shape_fn((3, 50), |_| rng.gen_range(-1.0..1.0));
    let b = Array2::from_shape_fn((3, 50), |_| rng.gen_range(-1.0..1.0));
    let cm = Array2::from_shape_fn((5, 50), |_| rng.gen_range(-1.0..1.0));
    let g = Array2::from_shape_fn((5, 50), |_| rng.gen_range(-1.0..1.0));
    let (da1, db1, dc1) = kernels::attention_aggregate_grads(a.view(), b.view(), cm.view(), g.view());
    for run in 0..5 {
        let (da, db, dc) =
            kernels::attention_aggregate_grads(a.view(), b.view(), cm.view(), g.view());
        assert!(bitwise_eq(da1.as_slice().unwrap(), da.as_slice().unwrap()), "run {run}");
        assert!(bitwise_eq(db1.as_slice().unwrap(), db.as_slice().unwrap()), "run {run}");
        assert!(bitwise_eq(dc1.as_slice().unwrap(), dc.as_slice().unwrap()), "run {run}");
    }
}

#[test]
fn conv2d_is_run_to_run_stable() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Array3::from_shape_fn((8, 24, 24), |_| rng.gen_range(-1.0..1.0));
    let w = Array4::from_shape_fn((8, 8, 3, 3), |_| rng.gen_range(-1.0..1.0));
    let b = Array1::zeros(8);
    let first = kernels::conv2d(x.view(), w.view(), &b, 1);
    for _ in 0..5 {
        let again = kernels::conv2d(x.view(), w.view(), &b, 1);
        assert!(bitwise_eq(
            first.as_slice().unwrap(),
            again.as_slice().unwrap()
        ));
    }
}
