//! A small routed model, random token batches, and the whole-model
//! finite-difference check, shared by the oracle tests and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskmoe::corpus::ParallelExample;
use taskmoe::model::{MoeConfig, MoeModel, Translator};
use taskmoe::tasks::{TaskId, TaskMode, TaskRegistry};
use taskmoe::tensor::grad_check;
use taskmoe::vocab::{TokenId, Vocab, BOS, EOS};

pub fn world() -> (Vocab, TaskRegistry) {
    let corpus = vec![
        ParallelExample::new("en", "xx", "s0 s1 s2", "s3 s4 s5"),
        ParallelExample::new("xx", "en", "s5 s4", "s1 s0"),
        ParallelExample::new("en", "yy", "s2", "s6"),
        ParallelExample::new("yy", "xx", "s7", "s2"),
    ];
    let vocab = Vocab::build(&corpus, 64).unwrap();
    let reg = TaskRegistry::build(TaskMode::Lp, &[("en", "xx"), ("xx", "en"), ("en", "yy"), ("yy", "xx")]).unwrap();
    (vocab, reg)
}

pub fn small_model(seed: u64, n_experts: usize) -> MoeModel {
    let (vocab, reg) = world();
    let mut cfg = MoeConfig::toy(vocab.len(), reg.len());
    cfg.d_model = 6;
    cfg.d_ff = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.n_experts = n_experts;
    cfg.d_task = 3;
    MoeModel::init(cfg, reg, vocab, seed).unwrap()
}

pub type Batch = (Vec<Vec<TokenId>>, Vec<Vec<TokenId>>, Vec<Vec<TokenId>>, Vec<TaskId>);

pub fn random_batch(model: &MoeModel, rng: &mut ChaCha8Rng, size: usize) -> Batch {
    let v = model.vocab().len() as TokenId;
    let first_word = (v - 8).min(14);
    let n_tasks = model.registry().len();
    let mut src = Vec::new();
    let mut tin = Vec::new();
    let mut tout = Vec::new();
    let mut tasks = Vec::new();
    for _ in 0..size {
        let ls = rng.random_range(1..5);
        let lt = rng.random_range(1..5);
        let mut s: Vec<TokenId> = (0..ls).map(|_| rng.random_range(first_word..v)).collect();
        s.insert(0, 4);
        s.push(EOS);
        let body: Vec<TokenId> = (0..lt).map(|_| rng.random_range(first_word..v)).collect();
        let mut i = vec![BOS];
        i.extend(&body);
        let mut o = body;
        o.push(EOS);
        src.push(s);
        tin.push(i);
        tout.push(o);
        tasks.push(TaskId(rng.random_range(0..n_tasks)));
    }
    (src, tin, tout, tasks)
}

/// Worst relative error over every parameter of a 4-expert model, and the
/// parameters that needed the smaller step.
///
/// A step of 1e-4 occasionally carries a hidden ReLU unit across zero; the
/// difference quotient is then meaningless, so such parameters are rechecked
/// at 1e-5.
pub fn full_model_check(seed: u64) -> (f64, Vec<String>) {
    let model = small_model(seed, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let (src, tin, tout, tasks) = random_batch(&model, &mut rng, 3);
    let mut worst: f64 = 0.0;
    let mut rechecked = Vec::new();
    for (name, value) in model.params().iter() {
        let check = |h| grad_check(|g, v| model.loss_on_graph(g, &[(name, v)], &src, &tin, &tout, &tasks), value, h).unwrap();
        let mut err = check(1e-4);
        if err >= 1e-4 {
            err = check(1e-5);
            rechecked.push(name.to_string());
        }
        worst = worst.max(err);
    }
    (worst, rechecked)
}
