//! The JSON run configuration and the directory layout derived from it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use taskmoe::corpus::{split_pair_key, CorpusSpec};
use taskmoe::model::{GateMode, MoeConfig};
use taskmoe::tasks::{InferenceStrategy, TaskMode};
use taskmoe::training::TrainConfig;
use taskmoe::{Error, Result};

fn two() -> usize {
    2
}

fn yes() -> bool {
    true
}

/// Architecture plus task mode; vocabulary size and task count come from
/// the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub mode: TaskMode,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    #[serde(default = "two")]
    pub top_k: usize,
    pub max_len: usize,
    #[serde(default = "yes")]
    pub moe_every_layer: bool,
    pub d_task: usize,
    #[serde(default)]
    pub gating: GateMode,
    #[serde(default)]
    pub balance_coef: f64,
    /// Upper bound on the shared vocabulary.
    pub vocab_max: usize,
}

impl ModelSection {
    pub fn config(&self, vocab_size: usize, n_tasks: usize) -> MoeConfig {
        MoeConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            n_experts: self.n_experts,
            top_k: self.top_k,
            vocab_size,
            max_len: self.max_len,
            moe_every_layer: self.moe_every_layer,
            n_tasks,
            d_task: self.d_task,
            gating: self.gating,
            balance_coef: self.balance_coef,
        }
    }
}

/// Single-pair dense models used by the bilingual and pivot rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    /// `"src-tgt"` keys; pivot rows need `xx-en` and `en-yy`.
    pub pairs: Vec<String>,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub train: TrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    /// The routed model under each strategy.
    Moe,
    /// Sub-network extracted for the task each strategy resolves to.
    Dense,
    /// One single-pair model per column.
    Bilingual,
    /// Two single-pair models bridged through English.
    Pivot,
    /// The routed model used twice, through English.
    MoePivot,
}

fn default_systems() -> Vec<SystemKind> {
    vec![SystemKind::Moe, SystemKind::Bilingual, SystemKind::Pivot]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Column keys; empty means every held-out set.
    #[serde(default)]
    pub pairs: Vec<String>,
    /// Empty means every strategy of the model's mode.
    #[serde(default)]
    pub strategies: Vec<InferenceStrategy>,
    #[serde(default = "default_systems")]
    pub systems: Vec<SystemKind>,
    #[serde(default)]
    pub max_sentences: Option<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            pairs: Vec::new(),
            strategies: Vec::new(),
            systems: default_systems(),
            max_sentences: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default = "PathsSection::default_data")]
    pub data: PathBuf,
    #[serde(default = "PathsSection::default_run")]
    pub run: PathBuf,
    #[serde(default = "PathsSection::default_report")]
    pub report: PathBuf,
}

impl PathsSection {
    fn default_data() -> PathBuf {
        "data".into()
    }

    fn default_run() -> PathBuf {
        "run".into()
    }

    fn default_report() -> PathBuf {
        "report.json".into()
    }
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            data: Self::default_data(),
            run: Self::default_run(),
            report: Self::default_report(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    #[serde(default)]
    pub baselines: Option<BaselineSection>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub paths: PathsSection,
}

/// A parsed config together with the directory its paths are relative to.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub cfg: RunConfig,
    pub base: PathBuf,
}

fn check_key(key: &str, what: &str) -> Result<()> {
    split_pair_key(key)
        .map(|_| ())
        .ok_or_else(|| Error::config(format!("{what} {key:?} is not of the form src-tgt")))
}

impl Loaded {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        cfg.corpus.validate()?;
        cfg.train.validate(cfg.model.max_len)?;
        if let Some(b) = &cfg.baselines {
            b.train.validate(cfg.model.max_len)?;
            for k in &b.pairs {
                check_key(k, "baseline pair")?;
            }
        }
        for k in &cfg.eval.pairs {
            check_key(k, "evaluation pair")?;
        }
        if let Some(s) = cfg.eval.strategies.iter().find(|s| s.mode() != cfg.model.mode) {
            return Err(Error::config(format!(
                "strategy {s} needs a {}-mode model, but the model is trained in {} mode",
                s.mode(),
                cfg.model.mode
            )));
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Loaded { cfg, base })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.data)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.run)
    }

    pub fn moe_dir(&self) -> PathBuf {
        self.run_dir().join("moe")
    }

    pub fn bilingual_dir(&self, key: &str) -> PathBuf {
        self.run_dir().join("bilingual").join(key)
    }

    pub fn report_path(&self) -> PathBuf {
        self.resolve(&self.cfg.paths.report)
    }

    pub fn strategies(&self) -> Vec<InferenceStrategy> {
        if self.cfg.eval.strategies.is_empty() {
            InferenceStrategy::for_mode(self.cfg.model.mode).collect()
        } else {
            self.cfg.eval.strategies.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
      "corpus": {"languages": ["en", "aa"], "pairs": [{"src": "en", "tgt": "aa", "count": 5}],
                 "min_len": 1, "max_len": 3, "base_vocab": 4, "seed": 0},
      "model": {"mode": "tl", "d_model": 8, "d_ff": 8, "n_heads": 2, "n_layers": 1,
                "n_experts": 4, "max_len": 8, "d_task": 2, "vocab_max": 30},
      "train": {"batch_size": 2, "max_len": 8, "steps": 1, "lr": 0.001, "seed": 0, "checkpoint_every": 1}
    }"#;

    fn load(text: &str) -> Result<Loaded> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, text).unwrap();
        Loaded::load(&path)
    }

    #[test]
    fn defaults_and_layout() {
        let run = load(MINIMAL).unwrap();
        assert_eq!(run.cfg.model.top_k, 2);
        assert!(run.cfg.model.moe_every_layer);
        assert_eq!(run.cfg.eval.systems, default_systems());
        assert_eq!(run.moe_dir(), run.base.join("run/moe"));
        assert_eq!(run.bilingual_dir("en-aa"), run.base.join("run/bilingual/en-aa"));
        assert_eq!(run.strategies(), [InferenceStrategy::TlA, InferenceStrategy::TlB]);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(matches!(load(&MINIMAL.replacen('{', r#"{"oops": 1,"#, 1)), Err(Error::Parse { .. })));
        let wrong_mode = MINIMAL.replacen("\"train\"", r#""eval": {"strategies": ["lp_a"]}, "train""#, 1);
        assert!(matches!(load(&wrong_mode), Err(Error::Config(_))));
        let bad_pair = MINIMAL.replacen("\"train\"", r#""eval": {"pairs": ["enaa"]}, "train""#, 1);
        assert!(matches!(load(&bad_pair), Err(Error::Config(_))));
        let long = MINIMAL.replace(r#""max_len": 8, "steps""#, r#""max_len": 9, "steps""#);
        assert!(matches!(load(&long), Err(Error::Config(_))));
    }
}
