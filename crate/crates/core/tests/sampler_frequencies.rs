//! Temperature sampling against closed-form probabilities.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use taskmoe::training::{pair_probs, Sampler};

const DRAWS: usize = 100_000;

fn counts(pairs: &[(&str, usize)]) -> BTreeMap<String, usize> {
    pairs.iter().map(|(k, n)| (k.to_string(), *n)).collect()
}

/// n_i^(1/T) / sum_j n_j^(1/T), written out independently of the library.
fn analytic(c: &BTreeMap<String, usize>, t: f64) -> Vec<f64> {
    let w: Vec<f64> = c.values().map(|&n| (n as f64).powf(1.0 / t)).collect();
    let z: f64 = w.iter().sum();
    w.iter().map(|x| x / z).collect()
}

fn empirical(s: &Sampler, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = vec![0usize; s.keys().len()];
    for _ in 0..DRAWS {
        hits[s.draw(&mut rng)] += 1;
    }
    hits.iter().map(|&h| h as f64 / DRAWS as f64).collect()
}

#[test]
fn frequencies_match_for_each_temperature() {
    let c = counts(&[("en-aa", 100_000), ("aa-en", 20_000), ("en-bb", 5_000), ("bb-aa", 500)]);
    for t in [1.0, 5.0, 100.0] {
        let want = analytic(&c, t);
        let s = Sampler::new(&c, t).unwrap();
        for (p, w) in s.probs().iter().zip(&want) {
            assert!((p - w).abs() < 1e-12);
        }
        let got = empirical(&s, t as u64);
        for (k, (g, w)) in c.keys().zip(got.iter().zip(&want)) {
            assert!((g - w).abs() <= 0.02, "T={t} {k}: {g} vs {w}");
        }
    }
}

#[test]
fn two_pair_case() {
    // 9:1 data at T = 5: 9^(1/5) / (9^(1/5) + 1)
    let c = counts(&[("en-aa", 9_000), ("en-bb", 1_000)]);
    let probs = pair_probs(&c, 5.0).unwrap();
    assert!((probs["en-aa"] - 0.6081).abs() < 5e-5, "{probs:?}");
    assert!((probs["en-bb"] - 0.3919).abs() < 5e-5);
    let got = empirical(&Sampler::new(&c, 5.0).unwrap(), 7);
    assert!((got[0] - 0.6081).abs() <= 0.02 && (got[1] - 0.3919).abs() <= 0.02, "{got:?}");
}

#[test]
fn temperature_extremes() {
    let c = counts(&[("a-b", 1000), ("b-a", 10)]);
    let p1 = pair_probs(&c, 1.0).unwrap();
    assert!((p1["a-b"] - 1000.0 / 1010.0).abs() < 1e-12);
    // large T flattens toward uniform
    let p = pair_probs(&c, 1e6).unwrap();
    assert!((p["a-b"] - 0.5).abs() < 1e-4);
    assert!(pair_probs(&c, 0.0).is_err());
    assert!(pair_probs(&BTreeMap::new(), 1.0).is_err());
}
