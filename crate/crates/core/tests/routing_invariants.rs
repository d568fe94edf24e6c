//! Randomized checks of the task-level router contract.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskmoe::corpus::ParallelExample;
use taskmoe::model::{GateMode, MoeConfig, MoeModel, Side, Translator};
use taskmoe::tasks::{TaskId, TaskMode, TaskRegistry};
use taskmoe::vocab::{TokenId, Vocab, BOS, EOS};

const LANGS: [&str; 5] = ["en", "aa", "bb", "cc", "dd"];

fn model(seed: u64, n_experts: usize, gating: GateMode) -> MoeModel {
    let corpus: Vec<ParallelExample> = LANGS[1..]
        .iter()
        .flat_map(|l| {
            [
                ParallelExample::new("en", l, "s0 s1 s2", "s3 s4"),
                ParallelExample::new(l, "en", "s5 s6", "s7 s8 s9"),
            ]
        })
        .collect();
    let vocab = Vocab::build(&corpus, 64).unwrap();
    let pairs: Vec<(&str, &str)> = corpus.iter().map(|e| (e.src_lang.as_str(), e.tgt_lang.as_str())).collect();
    let reg = TaskRegistry::build(TaskMode::Lp, &pairs).unwrap();
    let mut cfg = MoeConfig::toy(vocab.len(), reg.len());
    cfg.d_model = 8;
    cfg.d_ff = 12;
    cfg.n_layers = 2;
    cfg.n_experts = n_experts;
    cfg.d_task = 4;
    cfg.gating = gating;
    MoeModel::init(cfg, reg, vocab, seed).unwrap()
}

fn random_inputs(model: &MoeModel, rng: &mut ChaCha8Rng, n: usize) -> (Vec<Vec<TokenId>>, Vec<Vec<TokenId>>) {
    let v = model.vocab().len() as TokenId;
    let words = 4 + 2 * LANGS.len() as TokenId;
    let mut src = Vec::new();
    let mut tin = Vec::new();
    for _ in 0..n {
        let mut s = vec![4];
        s.extend((0..rng.random_range(1..7)).map(|_| rng.random_range(words..v)));
        s.push(EOS);
        let mut t = vec![BOS];
        t.extend((0..rng.random_range(1..7)).map(|_| rng.random_range(words..v)));
        src.push(s);
        tin.push(t);
    }
    (src, tin)
}

#[test]
fn thousand_random_routings() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let models: Vec<MoeModel> = (0..12).map(|s| model(s, 2 + (s as usize % 7), GateMode::Renormalized)).collect();
    for trial in 0..1000 {
        let m = &models[rng.random_range(0..models.len())];
        let task = TaskId(rng.random_range(0..m.registry().len()));
        let layer = rng.random_range(0..m.config().n_layers);
        let side = Side::BOTH[rng.random_range(0..2)];
        let r = m.route(layer, side, task).unwrap();
        let sum: f64 = r.gates.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-9, "trial {trial}: gates sum to {sum}");
        assert!(r.gates.iter().all(|&g| g >= 0.0), "trial {trial}: {:?}", r.gates);
        assert_ne!(r.experts[0], r.experts[1]);
        assert!(r.experts.iter().all(|&e| e < m.config().n_experts));
        // scattered over experts: at most two nonzero
        let mut full = vec![0.0; m.config().n_experts];
        for (e, g) in r.experts.iter().zip(r.gates) {
            full[*e] += g;
        }
        assert!(full.iter().filter(|&&g| g != 0.0).count() <= 2);
        // a pure function of weights and task
        assert_eq!(r, m.route(layer, side, task).unwrap());
    }
}

#[test]
fn truncated_gates_are_a_subset_of_a_distribution() {
    for seed in 0..50 {
        let m = model(seed, 6, GateMode::Truncated);
        for task in m.registry().ids() {
            let r = m.route(0, Side::Encoder, task).unwrap();
            let sum: f64 = r.gates.iter().sum();
            assert!(r.gates.iter().all(|&g| g > 0.0) && sum <= 1.0 + 1e-12);
            assert!(r.gates[0] >= r.gates[1]);
        }
    }
}

/// Every position of every sequence runs the same frozen mixture: the routed
/// logits equal the dense extraction, and a row does not depend on what else
/// is in its batch.
#[test]
fn routing_is_shared_across_positions_and_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for seed in 0..10 {
        let m = model(100 + seed, 5, GateMode::Renormalized);
        for task in m.registry().ids() {
            let dense = m.extract_dense(task).unwrap();
            let (src, tin) = random_inputs(&m, &mut rng, 4);
            let tasks = vec![task; src.len()];
            let routed = m.logits(&src, &tin, Some(&tasks)).unwrap();
            assert!(routed.max_abs_diff(&dense.logits(&src, &tin, None).unwrap()) < 1e-9);

            // the same first row inside a batch of other tasks
            let other: Vec<TaskId> = (0..src.len()).map(|i| if i == 0 { task } else { TaskId(rng.random_range(0..m.registry().len())) }).collect();
            let mixed = m.logits(&src, &tin, Some(&other)).unwrap();
            let alone = m.logits(&src[..1], &tin[..1], Some(&[task])).unwrap();
            let (lt, v) = (mixed.shape()[1], mixed.shape()[2]);
            for p in 0..alone.shape()[1] {
                for c in 0..v {
                    let a = alone.data()[p * v + c];
                    let b = mixed.data()[p * v + c];
                    assert!((a - b).abs() < 1e-9, "task {task} pos {p}");
                }
            }
            assert_eq!(lt, routed.shape()[1]);
        }
    }
}
