//! Finite-difference checks for every differentiable op, plus softmax and
//! backward-linearity properties.

#[path = "support/grad_cases.rs"]
mod grad_cases;

use grad_cases::{project, rand_tensor, Case, TOL};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskmoe::tensor::{Graph, Tensor, Var};
use taskmoe::Result;

fn assert_within_tolerance(cases: &[Case]) {
    assert!(cases.len() as u64 >= grad_cases::SEEDS);
    for c in cases {
        assert!(c.err < TOL, "{}, seed {}: relative error {:e}", c.op, c.seed, c.err);
    }
}

#[test]
fn matmul_both_sides() {
    let mut out = Vec::new();
    grad_cases::matmul_both_sides(&mut out);
    assert_within_tolerance(&out);
}

#[test]
fn elementwise_ops() {
    let mut out = Vec::new();
    grad_cases::elementwise_ops(&mut out);
    assert_within_tolerance(&out);
}

#[test]
fn add_row_both_inputs() {
    let mut out = Vec::new();
    grad_cases::add_row_both_inputs(&mut out);
    assert_within_tolerance(&out);
}

#[test]
fn softmax_each_axis() {
    let mut out = Vec::new();
    grad_cases::softmax_each_axis(&mut out);
    assert_within_tolerance(&out);
}

#[test]
fn layer_norm_all_inputs() {
    let mut out = Vec::new();
    grad_cases::layer_norm_all_inputs(&mut out);
    assert_within_tolerance(&out);
}

#[test]
fn cross_entropy_with_padding() {
    let mut out = Vec::new();
    grad_cases::cross_entropy_with_padding(&mut out);
    assert_within_tolerance(&out);
}

#[test]
fn one_layer_net_cross_entropy() {
    let mut out = Vec::new();
    grad_cases::one_layer_net_cross_entropy(&mut out);
    assert_within_tolerance(&out);
}

#[test]
fn row_indexing_ops() {
    let mut out = Vec::new();
    grad_cases::row_indexing_ops(&mut out);
    assert_within_tolerance(&out);
}

#[test]
fn attention_all_inputs() {
    let mut out = Vec::new();
    grad_cases::attention_all_inputs(&mut out);
    assert_within_tolerance(&out);
}

fn leaf_grad(x: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> Vec<f64> {
    let mut g = Graph::new();
    let v = g.leaf(x.clone().with_grad());
    let out = f(&mut g, v).unwrap();
    g.backward(out).unwrap();
    g.grad(v).unwrap().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one(rows in 1usize..=8, cols in 1usize..=8, seed in any::<u64>(), spread in 0.1f64..50.0, axis in 0usize..2) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-spread..spread)).collect();
        let x = Tensor::new(vec![rows, cols], data).unwrap();
        let mut g = Graph::new();
        let v = g.constant(x);
        let s = g.softmax(v, axis).unwrap();
        let out = g.value(s).data();
        prop_assert!(out.iter().all(|&p| p >= 0.0));
        let (outer, len, stride) = if axis == 0 { (cols, rows, cols) } else { (rows, cols, 1) };
        for o in 0..outer {
            let start = if axis == 0 { o } else { o * cols };
            let total: f64 = (0..len).map(|i| out[start + i * stride]).sum();
            prop_assert!((total - 1.0).abs() < 1e-9, "sum {}", total);
        }
    }

    #[test]
    fn backward_is_linear(rows in 1usize..=6, cols in 1usize..=6, seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[rows, cols]);
        let w = rand_tensor(&mut rng, &[cols, cols]);
        let f = |g: &mut Graph, v: Var| -> Result<Var> {
            let w = g.constant(w.clone());
            let h = g.matmul(v, w)?;
            let s = g.softmax(h, 1)?;
            project(g, s, seed)
        };
        let gf = |g: &mut Graph, v: Var| -> Result<Var> {
            let m = g.mul(v, v)?;
            g.sum(m)
        };
        let combined = leaf_grad(&x, |g, v| {
            let l1 = f(g, v)?;
            let l1 = g.scale(l1, a)?;
            let l2 = gf(g, v)?;
            let l2 = g.scale(l2, b)?;
            g.add(l1, l2)
        });
        let d1 = leaf_grad(&x, f);
        let d2 = leaf_grad(&x, gf);
        for i in 0..combined.len() {
            let want = a * d1[i] + b * d2[i];
            prop_assert!((combined[i] - want).abs() < 1e-12 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn repeated_backward_accumulates() {
    let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let mut g = Graph::new();
    let v = g.leaf(x.with_grad());
    let sq = g.mul(v, v).unwrap();
    let loss = g.sum(sq).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0]);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[4.0, 8.0]);
    g.zero_grads();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(v).unwrap(), &[2.0, 4.0]);
}

#[test]
fn every_op_covers_twenty_seeds() {
    let cases = grad_cases::every_op();
    let mut seeds: std::collections::BTreeMap<&str, std::collections::BTreeSet<u64>> = Default::default();
    for c in &cases {
        seeds.entry(c.op.as_str()).or_default().insert(c.seed);
    }
    assert!(seeds.len() >= 25, "{:?}", seeds.keys());
    for (op, s) in seeds {
        assert!(s.len() as u64 >= grad_cases::SEEDS, "{op}: {} seeds", s.len());
    }
}
