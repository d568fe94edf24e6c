//! Task universe and the train/inference mapping from language pairs to tasks.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{pair_key, ParallelExample, ENGLISH};
use crate::error::{Error, Result};

/// What a routing task stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskMode {
    /// One task per directional language pair, `"xx-yy"`.
    Lp,
    /// One task per target language, `"yy"`.
    Tl,
}

impl fmt::Display for TaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskMode::Lp => "lp",
            TaskMode::Tl => "tl",
        })
    }
}

impl FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lp" | "LP" => Ok(TaskMode::Lp),
            "tl" | "TL" => Ok(TaskMode::Tl),
            other => Err(Error::config(format!("unknown task mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub usize);

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Inference-time remapping of a `(src, tgt)` request onto a trained task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum InferenceStrategy {
    /// `src-tgt`
    #[serde(rename = "lp_a")]
    LpA,
    /// `en-tgt`
    #[serde(rename = "lp_b")]
    LpB,
    /// `src-en`
    #[serde(rename = "lp_c")]
    LpC,
    /// `tgt`
    #[serde(rename = "tl_a")]
    TlA,
    /// `src`
    #[serde(rename = "tl_b")]
    TlB,
}

impl InferenceStrategy {
    pub const ALL: [InferenceStrategy; 5] = [Self::LpA, Self::LpB, Self::LpC, Self::TlA, Self::TlB];

    pub fn mode(self) -> TaskMode {
        match self {
            Self::LpA | Self::LpB | Self::LpC => TaskMode::Lp,
            Self::TlA | Self::TlB => TaskMode::Tl,
        }
    }

    pub fn for_mode(mode: TaskMode) -> impl Iterator<Item = InferenceStrategy> {
        Self::ALL.into_iter().filter(move |s| s.mode() == mode)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::LpA => "lp_a",
            Self::LpB => "lp_b",
            Self::LpC => "lp_c",
            Self::TlA => "tl_a",
            Self::TlB => "tl_b",
        }
    }

    /// The registry key this strategy looks up for `(src, tgt)`.
    pub fn task_key(self, src: &str, tgt: &str) -> String {
        match self {
            Self::LpA => pair_key(src, tgt),
            Self::LpB => pair_key(ENGLISH, tgt),
            Self::LpC => pair_key(src, ENGLISH),
            Self::TlA => tgt.to_string(),
            Self::TlB => src.to_string(),
        }
    }
}

impl fmt::Display for InferenceStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InferenceStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown inference strategy {s:?}")))
    }
}

#[derive(Serialize, Deserialize)]
struct RegistryRepr {
    mode: TaskMode,
    tasks: Vec<String>,
}

/// Frozen, densely indexed set of routing tasks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "RegistryRepr", try_from = "RegistryRepr")]
pub struct TaskRegistry {
    mode: TaskMode,
    tasks: Vec<String>,
    index: HashMap<String, TaskId>,
}

impl From<TaskRegistry> for RegistryRepr {
    fn from(r: TaskRegistry) -> Self {
        RegistryRepr {
            mode: r.mode,
            tasks: r.tasks,
        }
    }
}

impl TryFrom<RegistryRepr> for TaskRegistry {
    type Error = Error;

    fn try_from(r: RegistryRepr) -> Result<Self> {
        TaskRegistry::from_keys(r.mode, r.tasks)
    }
}

impl TaskRegistry {
    /// One task per distinct directional pair (LP) or target language (TL),
    /// ordered by key.
    pub fn build<S: AsRef<str>>(mode: TaskMode, training_pairs: &[(S, S)]) -> Result<Self> {
        if training_pairs.is_empty() {
            return Err(Error::config("cannot build a task registry from an empty pair list"));
        }
        let keys: BTreeSet<String> = training_pairs
            .iter()
            .map(|(s, t)| match mode {
                TaskMode::Lp => pair_key(s.as_ref(), t.as_ref()),
                TaskMode::Tl => t.as_ref().to_string(),
            })
            .collect();
        Self::from_keys(mode, keys.into_iter().collect())
    }

    /// Registry with explicit key order (used when loading).
    pub fn from_keys(mode: TaskMode, tasks: Vec<String>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::config("task registry is empty"));
        }
        let mut index = HashMap::with_capacity(tasks.len());
        for (i, k) in tasks.iter().enumerate() {
            if index.insert(k.clone(), TaskId(i)).is_some() {
                return Err(Error::config(format!("duplicate task key {k:?}")));
            }
        }
        Ok(TaskRegistry { mode, tasks, index })
    }

    pub fn mode(&self) -> TaskMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.tasks
    }

    pub fn key(&self, id: TaskId) -> Option<&str> {
        self.tasks.get(id.0).map(String::as_str)
    }

    pub fn id(&self, key: &str) -> Option<TaskId> {
        self.index.get(key).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = TaskId> {
        (0..self.tasks.len()).map(TaskId)
    }

    fn lookup(&self, key: String, reason: impl FnOnce() -> String) -> Result<TaskId> {
        self.id(&key).ok_or_else(|| Error::UnresolvedTask { key, reason: reason() })
    }

    /// Task a training pair is routed to.
    pub fn resolve_train(&self, src: &str, tgt: &str) -> Result<TaskId> {
        let key = match self.mode {
            TaskMode::Lp => pair_key(src, tgt),
            TaskMode::Tl => tgt.to_string(),
        };
        self.lookup(key, || format!("not a training task of this {} registry", self.mode))
    }

    pub fn resolve_example(&self, ex: &ParallelExample) -> Result<TaskId> {
        self.resolve_train(&ex.src_lang, &ex.tgt_lang)
    }

    /// Maps an inference request onto a trained task.
    pub fn resolve_infer(&self, strategy: InferenceStrategy, src: &str, tgt: &str) -> Result<TaskId> {
        if strategy.mode() != self.mode {
            return Err(Error::UnresolvedTask {
                key: pair_key(src, tgt),
                reason: format!("strategy {strategy} needs a {} registry, model was trained in {} mode", strategy.mode(), self.mode),
            });
        }
        self.lookup(strategy.task_key(src, tgt), || {
            format!("{strategy} mapping of {src}-{tgt} was never trained")
        })
    }

    /// `key<TAB>id` lines.
    pub fn to_text(&self) -> String {
        self.tasks.iter().enumerate().map(|(i, k)| format!("{k}\t{i}\n")).collect()
    }

    pub fn from_text(mode: TaskMode, text: &str) -> Result<Self> {
        let mut keys = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (key, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::config(format!("registry line {}: missing tab", n + 1)))?;
            if id.trim().parse::<usize>().ok() != Some(n) {
                return Err(Error::config(format!("registry line {}: ids must be dense and ordered", n + 1)));
            }
            keys.push(key.to_string());
        }
        Self::from_keys(mode, keys)
    }
}
