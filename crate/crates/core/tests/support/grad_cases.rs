//! Finite-difference cases for every differentiable op, shared by the
//! property tests and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskmoe::tensor::{grad_check, AttentionMask, Graph, Tensor, Var};
use taskmoe::Result;

pub const SEEDS: u64 = 20;
pub const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values at least 0.1 away from zero so a step of 1e-4 never crosses a kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..=8), rng.random_range(1..=8))
}

/// Reduces a non-scalar output to a scalar through fixed random weights, so
/// every output element gets a distinct upstream gradient.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = g.constant(rand_tensor(&mut rng, &shape));
    let p = g.mul(out, w)?;
    g.sum(p)
}

/// One finite-difference comparison.
#[derive(Clone, Debug)]
pub struct Case {
    pub op: String,
    pub seed: u64,
    pub err: f64,
}

fn check<F>(out: &mut Vec<Case>, what: &str, seed: u64, x: &Tensor, f: F)
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let err = grad_check(f, x, H).unwrap();
    out.push(Case {
        op: what.to_string(),
        seed,
        err,
    });
}

pub fn matmul_both_sides(out: &mut Vec<Case>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k) = dims(&mut rng);
        let n = rng.random_range(1..=8);
        let a = rand_tensor(&mut rng, &[m, k]);
        let b = rand_tensor(&mut rng, &[k, n]);
        check(out, "matmul lhs", seed, &a, |g, v| {
            let b = g.constant(b.clone());
            let y = g.matmul(v, b)?;
            project(g, y, seed)
        });
        check(out, "matmul rhs", seed, &b, |g, v| {
            let a = g.constant(a.clone());
            let y = g.matmul(a, v)?;
            project(g, y, seed)
        });
    }
}

pub fn elementwise_ops(out: &mut Vec<Case>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (r, c) = dims(&mut rng);
        let x = rand_tensor(&mut rng, &[r, c]);
        let other = rand_tensor(&mut rng, &[r, c]);
        check(out, "add", seed, &x, |g, v| {
            let o = g.constant(other.clone());
            let y = g.add(v, o)?;
            project(g, y, seed)
        });
        check(out, "mul", seed, &x, |g, v| {
            let o = g.constant(other.clone());
            let y = g.mul(v, o)?;
            project(g, y, seed)
        });
        check(out, "mul self", seed, &x, |g, v| {
            let y = g.mul(v, v)?;
            project(g, y, seed)
        });
        check(out, "scale", seed, &x, |g, v| {
            let y = g.scale(v, -1.7)?;
            project(g, y, seed)
        });
        check(out, "sum", seed, &x, |g, v| g.sum(v));
        let kinked = away_from_zero(&mut rng, &[r, c]);
        check(out, "relu", seed, &kinked, |g, v| {
            let y = g.relu(v)?;
            project(g, y, seed)
        });
    }
}

pub fn add_row_both_inputs(out: &mut Vec<Case>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let (r, c) = dims(&mut rng);
        let x = rand_tensor(&mut rng, &[r, c]);
        let b = rand_tensor(&mut rng, &[c]);
        check(out, "add_row x", seed, &x, |g, v| {
            let b = g.constant(b.clone());
            let y = g.add_row(v, b)?;
            project(g, y, seed)
        });
        check(out, "add_row bias", seed, &b, |g, v| {
            let x = g.constant(x.clone());
            let y = g.add_row(x, v)?;
            project(g, y, seed)
        });
    }
}

pub fn softmax_each_axis(out: &mut Vec<Case>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (r, c) = dims(&mut rng);
        let x = rand_tensor(&mut rng, &[r, c]);
        for axis in 0..2 {
            check(out, &format!("softmax axis {axis}"), seed, &x, |g, v| {
                let y = g.softmax(v, axis)?;
                project(g, y, seed)
            });
        }
    }
}

pub fn layer_norm_all_inputs(out: &mut Vec<Case>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let r = rng.random_range(1..=8);
        let c = rng.random_range(2..=8);
        let x = rand_tensor(&mut rng, &[r, c]);
        let gain = rand_tensor(&mut rng, &[c]);
        let bias = rand_tensor(&mut rng, &[c]);
        check(out, "layer_norm x", seed, &x, |g, v| {
            let (a, b) = (g.constant(gain.clone()), g.constant(bias.clone()));
            let y = g.layer_norm(v, a, b, 1e-5)?;
            project(g, y, seed)
        });
        check(out, "layer_norm gain", seed, &gain, |g, v| {
            let (x, b) = (g.constant(x.clone()), g.constant(bias.clone()));
            let y = g.layer_norm(x, v, b, 1e-5)?;
            project(g, y, seed)
        });
        check(out, "layer_norm bias", seed, &bias, |g, v| {
            let (x, a) = (g.constant(x.clone()), g.constant(gain.clone()));
            let y = g.layer_norm(x, a, v, 1e-5)?;
            project(g, y, seed)
        });
    }
}

pub fn cross_entropy_with_padding(out: &mut Vec<Case>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (r, c) = dims(&mut rng);
        let c = c.max(2);
        let x = rand_tensor(&mut rng, &[r, c]);
        let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..c)).collect();
        check(out, "cross_entropy", seed, &x, |g, v| g.cross_entropy(v, &targets, 0));
    }
}

pub fn one_layer_net_cross_entropy(out: &mut Vec<Case>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(550 + seed);
        let (r, d) = dims(&mut rng);
        let vocab = rng.random_range(2..=8);
        let x = rand_tensor(&mut rng, &[r, d]);
        let w = rand_tensor(&mut rng, &[d, vocab]);
        let b = rand_tensor(&mut rng, &[vocab]);
        let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..vocab)).collect();
        check(out, "linear + cross_entropy", seed, &w, |g, v| {
            let (x, b) = (g.constant(x.clone()), g.constant(b.clone()));
            let h = g.matmul(x, v)?;
            let h = g.add_row(h, b)?;
            g.cross_entropy(h, &targets, usize::MAX)
        });
    }
}

pub fn row_indexing_ops(out: &mut Vec<Case>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let (n, d) = dims(&mut rng);
        let table = rand_tensor(&mut rng, &[n, d]);
        let m = rng.random_range(1..=8);
        let ids: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
        check(out, "gather_rows", seed, &table, |g, v| {
            let y = g.gather_rows(v, &ids)?;
            project(g, y, seed)
        });

        let scales = rand_tensor(&mut rng, &[n]);
        check(out, "mul_rows a", seed, &table, |g, v| {
            let s = g.constant(scales.clone());
            let y = g.mul_rows(v, s)?;
            project(g, y, seed)
        });
        check(out, "mul_rows s", seed, &scales, |g, v| {
            let a = g.constant(table.clone());
            let y = g.mul_rows(a, v)?;
            project(g, y, seed)
        });

        let src = rand_tensor(&mut rng, &[m, d]);
        check(out, "index_add_rows base", seed, &table, |g, v| {
            let s = g.constant(src.clone());
            let y = g.index_add_rows(v, s, &ids)?;
            project(g, y, seed)
        });
        check(out, "index_add_rows src", seed, &src, |g, v| {
            let b = g.constant(table.clone());
            let y = g.index_add_rows(b, v, &ids)?;
            project(g, y, seed)
        });

        let other = rand_tensor(&mut rng, &[m, d]);
        check(out, "concat_rows", seed, &table, |g, v| {
            let o = g.constant(other.clone());
            let y = g.concat_rows(&[o, v, o])?;
            project(g, y, seed)
        });

        let picks: Vec<usize> = (0..m).map(|_| rng.random_range(0..n * d)).collect();
        check(out, "take", seed, &table, |g, v| {
            let y = g.take(v, &picks, vec![m])?;
            project(g, y, seed)
        });
        check(out, "reshape", seed, &table, |g, v| {
            let y = g.reshape(v, vec![n * d])?;
            project(g, y, seed)
        });
    }
}

pub fn attention_all_inputs(out: &mut Vec<Case>) {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let batch = rng.random_range(1..=2);
        let heads = rng.random_range(1..=2);
        let d = heads * rng.random_range(1..=4);
        let causal = seed % 2 == 0;
        let lk = rng.random_range(1..=4);
        let lq = if causal { lk } else { rng.random_range(1..=4) };
        // the first key always stays visible so no query is left without keys
        let key_valid = (0..batch * lk).map(|i| i % lk == 0 || rng.random_bool(0.7)).collect();
        let mask = AttentionMask { batch, q_len: lq, k_len: lk, key_valid, causal };
        let q = rand_tensor(&mut rng, &[batch * lq, d]);
        let k = rand_tensor(&mut rng, &[batch * lk, d]);
        let v = rand_tensor(&mut rng, &[batch * lk, d]);
        check(out, "attention q", seed, &q, |g, x| {
            let (k, v) = (g.constant(k.clone()), g.constant(v.clone()));
            let y = g.attention(x, k, v, heads, &mask)?;
            project(g, y, seed)
        });
        check(out, "attention k", seed, &k, |g, x| {
            let (q, v) = (g.constant(q.clone()), g.constant(v.clone()));
            let y = g.attention(q, x, v, heads, &mask)?;
            project(g, y, seed)
        });
        check(out, "attention v", seed, &v, |g, x| {
            let (q, k) = (g.constant(q.clone()), g.constant(k.clone()));
            let y = g.attention(q, k, x, heads, &mask)?;
            project(g, y, seed)
        });
        check(out, "self attention", seed, &q, |g, x| {
            if lq != lk {
                return g.sum(x);
            }
            let y = g.attention(x, x, x, heads, &mask)?;
            project(g, y, seed)
        });
    }
}

/// Every op group over every seed.
pub fn every_op() -> Vec<Case> {
    let mut out = Vec::new();
    matmul_both_sides(&mut out);
    elementwise_ops(&mut out);
    add_row_both_inputs(&mut out);
    softmax_each_axis(&mut out);
    layer_norm_all_inputs(&mut out);
    cross_entropy_with_padding(&mut out);
    one_layer_net_cross_entropy(&mut out);
    row_indexing_ops(&mut out);
    attention_all_inputs(&mut out);
    out
}
