//! Temperature sampling over language pairs, Adam with inverse-sqrt warmup,
//! and the checkpointing training loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, TrainState};
use crate::corpus::{fnv1a, ParallelExample};
use crate::error::{Error, Result};
use crate::model::{MoeModel, Translator};
use crate::tasks::TaskId;
use crate::vocab::{TokenId, BOS, EOS};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-9;

/// Sampling probabilities `p_i ∝ (n_i / Σn)^(1/T)`, keyed like `counts`.
pub fn pair_probs(counts: &BTreeMap<String, usize>, temperature: f64) -> Result<BTreeMap<String, f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::config(format!("sampling temperature must be positive, got {temperature}")));
    }
    if counts.is_empty() {
        return Err(Error::config("no language pairs to sample from"));
    }
    if let Some((k, _)) = counts.iter().find(|(_, &n)| n == 0) {
        return Err(Error::config(format!("pair {k} has no sentences")));
    }
    let total: f64 = counts.values().map(|&n| n as f64).sum();
    let raw: Vec<f64> = counts.values().map(|&n| (n as f64 / total).powf(1.0 / temperature)).collect();
    let z: f64 = raw.iter().sum();
    Ok(counts.keys().cloned().zip(raw.into_iter().map(|r| r / z)).collect())
}

/// Draws pairs from [`pair_probs`].
#[derive(Clone, Debug)]
pub struct Sampler {
    keys: Vec<String>,
    probs: Vec<f64>,
    cdf: Vec<f64>,
}

impl Sampler {
    pub fn new(counts: &BTreeMap<String, usize>, temperature: f64) -> Result<Self> {
        let probs = pair_probs(counts, temperature)?;
        let keys: Vec<String> = probs.keys().cloned().collect();
        let probs: Vec<f64> = probs.into_values().collect();
        let mut acc = 0.0;
        let cdf = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Ok(Sampler { keys, probs, cdf })
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Index into [`Sampler::keys`].
    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random::<f64>() * self.cdf[self.cdf.len() - 1];
        self.cdf.partition_point(|&c| c <= u).min(self.keys.len() - 1)
    }
}

/// Generator for the `call`-th batch: independent of how many batches were
/// drawn before, which is what makes resumed runs reproduce fresh ones.
pub fn batch_rng(seed: u64, call: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(b"batch"));
    rng.set_stream(call);
    rng
}

/// Token-id batch ready for the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub examples: Vec<ParallelExample>,
    pub tasks: Vec<TaskId>,
    pub src: Vec<Vec<TokenId>>,
    pub tgt_in: Vec<Vec<TokenId>>,
    pub tgt_out: Vec<Vec<TokenId>>,
}

/// Encodes examples, truncating word sequences so every side fits `max_len`
/// (language tags and end marker included).
pub fn encode_batch<M: Translator + ?Sized>(
    model: &M,
    resolve: impl Fn(&ParallelExample) -> Result<TaskId>,
    examples: Vec<ParallelExample>,
    max_len: usize,
) -> Result<Batch> {
    let vocab = model.vocab();
    let mut b = Batch {
        examples: Vec::new(),
        tasks: Vec::new(),
        src: Vec::new(),
        tgt_in: Vec::new(),
        tgt_out: Vec::new(),
    };
    for ex in examples {
        b.tasks.push(resolve(&ex)?);
        let mut src = vocab.encode_source(&ex.src_lang, &ex.tgt_lang, &ex.src)?;
        if src.len() > max_len {
            src.truncate(max_len - 1);
            src.push(EOS);
        }
        let mut words = vocab.encode_target(&ex.tgt);
        // [bos, words.., eos] -> words
        words.remove(0);
        words.pop();
        words.truncate(max_len - 1);
        let mut tin = vec![BOS];
        tin.extend(&words);
        words.push(EOS);
        b.src.push(src);
        b.tgt_in.push(tin);
        b.tgt_out.push(words);
        b.examples.push(ex);
    }
    Ok(b)
}

/// The `call`-th training batch: pairs i.i.d. from the sampler, sentences
/// uniformly within each pair.
pub fn sample_batch(
    model: &MoeModel,
    sampler: &Sampler,
    corpora: &BTreeMap<String, Vec<ParallelExample>>,
    batch_size: usize,
    max_len: usize,
    seed: u64,
    call: u64,
) -> Result<Batch> {
    let mut rng = batch_rng(seed, call);
    let mut picked = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let key = &sampler.keys()[sampler.draw(&mut rng)];
        let pool = corpora
            .get(key)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| Error::config(format!("no training sentences for sampled pair {key}")))?;
        picked.push(pool[rng.random_range(0..pool.len())].clone());
    }
    let reg = model.registry();
    encode_batch(model, |ex| reg.resolve_example(ex), picked, max_len)
}

fn default_temperature() -> f64 {
    5.0
}

fn default_warmup() -> u64 {
    400
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_len: usize,
    pub steps: u64,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup: u64,
    pub seed: u64,
    /// Checkpoint every this many steps; the final step is always saved.
    pub checkpoint_every: u64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Rescale gradients whose global L2 norm exceeds this.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    /// Desk-scale default.
    pub fn toy(steps: u64, seed: u64) -> Self {
        TrainConfig {
            batch_size: 32,
            max_len: 16,
            steps,
            lr: 1e-3,
            warmup: default_warmup(),
            seed,
            checkpoint_every: steps.max(1),
            temperature: default_temperature(),
            clip_norm: None,
        }
    }

    pub fn validate(&self, model_max_len: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.max_len < 3 || self.max_len > model_max_len {
            return fail(format!(
                "train max_len {} must lie in 3..={model_max_len} (the model's max_len)",
                self.max_len
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        if self.checkpoint_every == 0 {
            return fail("checkpoint_every must be at least 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!("temperature must be positive, got {}", self.temperature));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return fail(format!("clip_norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    /// `lr · min(step / warmup, sqrt(warmup / step))` for 1-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let s = step.max(1) as f64;
        if self.warmup == 0 {
            return self.lr;
        }
        let w = self.warmup as f64;
        self.lr * (s / w).min((w / s).sqrt())
    }
}

/// Zeroed optimizer state matching `model`'s parameters.
pub fn fresh_state(model: &MoeModel, seed: u64) -> TrainState {
    let zeros: Vec<Vec<f64>> = model.params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    TrainState {
        step: 0,
        seed,
        m: zeros.clone(),
        v: zeros,
    }
}

/// One optimisation step on `batch`; returns the batch cross-entropy.
///
/// Parameters that received no gradient (experts no task in the batch was
/// routed to) are left untouched, moments included.
pub fn train_step(model: &mut MoeModel, batch: &Batch, state: &mut TrainState, cfg: &TrainConfig) -> Result<f64> {
    let mut lg = model.loss_graph(&batch.src, &batch.tgt_in, &batch.tgt_out, &batch.tasks)?;
    let loss = lg.graph.value(lg.loss).data()[0];
    if !loss.is_finite() || !lg.nll.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {} is {loss}", state.step + 1)));
    }
    let nll = lg.nll;
    lg.graph.backward(lg.loss)?;
    let store = model.params_mut();
    store.zero_grads();
    lg.vars.accumulate_into(&lg.graph, store);
    drop(lg);

    let mut scale = 1.0;
    if let Some(max) = cfg.clip_norm {
        let norm = store
            .iter()
            .filter_map(|(_, t)| t.grad())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if norm > max {
            scale = max / norm;
        }
    }

    state.step += 1;
    let lr = cfg.lr_at(state.step);
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in store.tensors_mut().enumerate() {
        let Some(grad) = p.grad().map(<[f64]>::to_vec) else { continue };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient at step {}", state.step)));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let g = grad[j] * scale;
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
            *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
        }
        p.zero_grad();
    }
    Ok(nll)
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:06}.ckpt")
}

pub const METRICS_FILE: &str = "metrics.tsv";

/// What a finished [`train`] call produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<PathBuf>,
    pub last_loss: Option<f64>,
    pub state: TrainState,
}

/// Runs from `state.step` to `cfg.steps`, writing `step-NNNNNN.ckpt` every
/// `checkpoint_every` steps and at the end, and appending `step\tloss` lines
/// to `metrics.tsv` in `out_dir`. `on_step` sees each step and its loss.
pub fn train(
    model: &mut MoeModel,
    corpora: &BTreeMap<String, Vec<ParallelExample>>,
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<TrainState>,
    mut on_step: impl FnMut(u64, f64),
) -> Result<TrainOutcome> {
    cfg.validate(model.config().max_len)?;
    let counts: BTreeMap<String, usize> = corpora.iter().map(|(k, v)| (k.clone(), v.len())).collect();
    let sampler = Sampler::new(&counts, cfg.temperature)?;
    for ex in corpora.values().flatten() {
        model.registry().resolve_example(ex)?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut state = match resume {
        Some(s) => {
            if s.seed != cfg.seed {
                return Err(Error::config(format!(
                    "checkpoint was trained with seed {} but the config says {}",
                    s.seed, cfg.seed
                )));
            }
            s
        }
        None => fresh_state(model, cfg.seed),
    };
    let metrics_path = out_dir.join(METRICS_FILE);
    let kept = match fs::read_to_string(&metrics_path) {
        Ok(text) if state.step > 0 => text
            .lines()
            .filter(|l| l.split('\t').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= state.step))
            .map(|l| format!("{l}\n"))
            .collect(),
        _ => String::new(),
    };
    fs::write(&metrics_path, kept).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = fs::OpenOptions::new()
        .append(true)
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;

    let mut outcome = TrainOutcome {
        checkpoints: Vec::new(),
        last_loss: None,
        state: state.clone(),
    };
    while state.step < cfg.steps {
        let batch = sample_batch(model, &sampler, corpora, cfg.batch_size, cfg.max_len, cfg.seed, state.step)?;
        let loss = train_step(model, &batch, &mut state, cfg)?;
        writeln!(metrics, "{}\t{loss}", state.step).map_err(|e| Error::io(&metrics_path, e))?;
        on_step(state.step, loss);
        outcome.last_loss = Some(loss);
        if state.step % cfg.checkpoint_every == 0 || state.step == cfg.steps {
            let path = out_dir.join(checkpoint_name(state.step));
            checkpoint::save_moe(&path, model, Some(&state))?;
            outcome.checkpoints.push(path);
        }
    }
    if outcome.checkpoints.is_empty() {
        // already at or past the requested step: still leave a final checkpoint
        let path = out_dir.join(checkpoint_name(state.step));
        checkpoint::save_moe(&path, model, Some(&state))?;
        outcome.checkpoints.push(path);
    }
    outcome.state = state;
    Ok(outcome)
}

/// Parses a `step\tloss` metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let parse = || -> Option<(u64, f64)> {
                let (s, l) = line.split_once('\t')?;
                Some((s.parse().ok()?, l.parse().ok()?))
            };
            parse().ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected step<TAB>loss, got {line:?}"),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(a: usize, b: usize) -> BTreeMap<String, usize> {
        [("A".to_string(), a), ("B".to_string(), b)].into_iter().collect()
    }

    #[test]
    fn temperature_probabilities() {
        let p = pair_probs(&counts(900, 100), 1.0).unwrap();
        assert!((p["A"] - 0.9).abs() < 1e-12 && (p["B"] - 0.1).abs() < 1e-12);
        let p = pair_probs(&counts(900, 100), 5.0).unwrap();
        assert!((p["A"] - 0.6081).abs() < 1e-3, "{p:?}");
        assert!((p["B"] - 0.3919).abs() < 1e-3, "{p:?}");
        let p = pair_probs(&counts(900, 100), 1e9).unwrap();
        assert!((p["A"] - 0.5).abs() < 1e-6);
        assert!(pair_probs(&counts(9, 1), 0.0).is_err());
        assert!(pair_probs(&counts(9, 0), 1.0).is_err());
    }

    #[test]
    fn schedule_peaks_at_warmup() {
        let mut c = TrainConfig::toy(10, 0);
        c.warmup = 100;
        c.lr = 2.0;
        assert!((c.lr_at(50) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(100) - 2.0).abs() < 1e-12);
        assert!((c.lr_at(400) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampler_draws_every_key() {
        let s = Sampler::new(&counts(3, 1), 1.0).unwrap();
        let mut rng = batch_rng(1, 0);
        let mut seen = [0usize; 2];
        for _ in 0..1000 {
            seen[s.draw(&mut rng)] += 1;
        }
        assert!(seen[0] > 650 && seen[1] > 150, "{seen:?}");
    }
}
