//! Corpus BLEU against hand-computed cases and an independent brute-force
//! n-gram counter (nested scans, no hashing).

#[path = "support/bleu_brute.rs"]
mod bleu_brute;

use bleu_brute::brute_force_bleu;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use taskmoe::eval::corpus_bleu;

#[test]
fn hand_computed_cases() {
    let ids = ["a b c d", "x y z w v"];
    let rep = corpus_bleu(&ids, &ids).unwrap();
    assert!((rep.score - 100.0).abs() < 1e-9, "{rep:?}");

    // p = (4/5, 3/4, 2/3, 1/2), BP = 1, BLEU = 100 * 0.2^(1/4)
    let rep = corpus_bleu(&["a b c d e"], &["a b c d f"]).unwrap();
    let want = [0.8, 0.75, 2.0 / 3.0, 0.5];
    for n in 0..4 {
        assert!((rep.precisions[n] - want[n]).abs() < 1e-12);
    }
    assert_eq!(rep.bp, 1.0);
    assert!((rep.score - 66.87).abs() < 0.01, "{}", rep.score);

    let rep = corpus_bleu(&["a"], &["a b c"]).unwrap();
    assert!((rep.bp - 0.1353).abs() < 5e-4, "{}", rep.bp);
    assert!((rep.bp - (-2.0f64).exp()).abs() < 1e-12);
}

#[test]
fn frozen_oracle_values() {
    // computed once with the brute-force counter above and frozen
    let (s, p, bp) = brute_force_bleu(&["a b c d e"], &["a b c d f"]);
    assert!((s - 66.874_030_497_642_2).abs() < 1e-9, "{s}");
    assert_eq!(p, [0.8, 0.75, 2.0 / 3.0, 0.5]);
    assert_eq!(bp, 1.0);
    let (s, _, bp) = brute_force_bleu(&["a"], &["a b c"]);
    assert!((bp - 0.135_335_283_236_612_7).abs() < 1e-15);
    assert!((s - 2.406_639_476_314_542).abs() < 1e-9, "{s}");
}

#[test]
fn matches_brute_force_on_random_corpora() {
    let words = ["a", "b", "c", "d", "e"];
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..6);
        let sent = |rng: &mut ChaCha8Rng| -> String {
            let len = rng.random_range(0..9);
            (0..len).map(|_| words[rng.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
        };
        let hyps: Vec<String> = (0..n).map(|_| sent(&mut rng)).collect();
        let refs: Vec<String> = (0..n).map(|_| sent(&mut rng)).collect();
        let (score, p, bp) = brute_force_bleu(
            &hyps.iter().map(String::as_str).collect::<Vec<_>>(),
            &refs.iter().map(String::as_str).collect::<Vec<_>>(),
        );
        let rep = corpus_bleu(&hyps, &refs).unwrap();
        assert!((rep.score - score).abs() < 1e-9, "seed {seed}: {} vs {score}", rep.score);
        assert!((rep.bp - bp).abs() < 1e-12);
        for k in 0..4 {
            assert!((rep.precisions[k] - p[k]).abs() < 1e-12);
        }
        assert!((0.0..=100.0).contains(&rep.score));
    }
}

#[test]
fn invariant_under_joint_shuffle() {
    let hyps = ["a b c", "d e", "a a b b", "c d e a"];
    let refs = ["a b d", "d e", "a b b", "e d c a"];
    let base = corpus_bleu(&hyps, &refs).unwrap().score;
    let order = [2, 0, 3, 1];
    let h: Vec<&str> = order.iter().map(|&i| hyps[i]).collect();
    let r: Vec<&str> = order.iter().map(|&i| refs[i]).collect();
    assert_eq!(corpus_bleu(&h, &r).unwrap().score, base);
}

#[test]
fn rejects_bad_input() {
    assert!(corpus_bleu::<&str, &str>(&[], &[]).is_err());
    assert!(corpus_bleu(&["a"], &["a", "b"]).is_err());
}
