//! Greedy decoding, corpus BLEU, pivoting, and the system × pair comparison
//! matrix.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{pair_key, ParallelExample, ENGLISH};
use crate::error::{Error, Result};
use crate::model::Translator;
use crate::tasks::InferenceStrategy;
use crate::vocab::{TokenId, BOS, EOS, PAD};

/// Substituted for a zero n-gram match count.
pub const BLEU_EPSILON: f64 = 0.1;

/// Env var capping evaluation threads.
pub const THREADS_ENV: &str = "TASKMOE_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    pub precisions: [f64; 4],
    pub bp: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = self.precisions.map(|x| 100.0 * x);
        write!(
            f,
            "BLEU = {:.2} ({:.1}/{:.1}/{:.1}/{:.1}, BP={:.4}, hyp_len={}, ref_len={})",
            self.score, p[0], p[1], p[2], p[3], self.bp, self.hyp_len, self.ref_len
        )
    }
}

/// Corpus BLEU-4 over whitespace tokens with clipped counts and epsilon
/// smoothing: a zero match count for an order becomes [`BLEU_EPSILON`] (over
/// at least one candidate n-gram).
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuReport> {
    if hyps.is_empty() {
        return Err(Error::config("BLEU needs at least one hypothesis"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::config(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut matches = [0u64; 4];
    let mut totals = [0u64; 4];
    let (mut c, mut r) = (0, 0);
    for (h, rf) in hyps.iter().zip(refs) {
        let hw: Vec<&str> = h.as_ref().split_whitespace().collect();
        let rw: Vec<&str> = rf.as_ref().split_whitespace().collect();
        c += hw.len();
        r += rw.len();
        for n in 1..=4 {
            if hw.len() < n {
                continue;
            }
            totals[n - 1] += (hw.len() + 1 - n) as u64;
            let mut ref_counts: HashMap<&[&str], u64> = HashMap::new();
            for g in rw.windows(n) {
                *ref_counts.entry(g).or_default() += 1;
            }
            let mut hyp_counts: HashMap<&[&str], u64> = HashMap::new();
            for g in hw.windows(n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            matches[n - 1] += hyp_counts
                .iter()
                .map(|(g, &k)| k.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        let m = if matches[n] == 0 { BLEU_EPSILON } else { matches[n] as f64 };
        precisions[n] = m / totals[n].max(1) as f64;
    }
    let bp = if c < r { (1.0 - r as f64 / c.max(1) as f64).exp() } else { 1.0 };
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
    let score = (100.0 * bp * log_mean.exp()).min(100.0);
    Ok(BleuReport {
        score,
        precisions,
        bp,
        hyp_len: c,
        ref_len: r,
    })
}

/// Sentences decoded together.
const DECODE_CHUNK: usize = 64;

/// Greedy decoding of `texts` from `src` into `tgt`, routed under `strategy`
/// (ignored by task-free models). Stops at end-of-sentence or once the target
/// prefix reaches the model's `max_len`.
pub fn greedy_decode<M: Translator + ?Sized, S: AsRef<str>>(
    model: &M,
    texts: &[S],
    src: &str,
    tgt: &str,
    strategy: Option<InferenceStrategy>,
) -> Result<Vec<String>> {
    let task = model.resolve_task(strategy, src, tgt)?;
    let max_len = model.config().max_len;
    let vocab = model.vocab();
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(DECODE_CHUNK) {
        let srcs = chunk
            .iter()
            .map(|t| {
                let mut ids = vocab.encode_source(src, tgt, t.as_ref())?;
                if ids.len() > max_len {
                    ids.truncate(max_len - 1);
                    ids.push(EOS);
                }
                Ok(ids)
            })
            .collect::<Result<Vec<_>>>()?;
        let tasks = task.map(|t| vec![t; chunk.len()]);
        let mut prefixes: Vec<Vec<TokenId>> = vec![vec![BOS]; chunk.len()];
        let mut done = vec![false; chunk.len()];
        while done.iter().any(|d| !d) && prefixes[0].len() <= max_len {
            let logits = model.logits(&srcs, &prefixes, tasks.as_deref())?;
            let (lt, v) = (logits.shape()[1], logits.shape()[2]);
            let pos = prefixes[0].len() - 1;
            for (i, prefix) in prefixes.iter_mut().enumerate() {
                if done[i] {
                    prefix.push(PAD);
                    continue;
                }
                let row = &logits.data()[(i * lt + pos) * v..(i * lt + pos + 1) * v];
                let best = (0..v).fold(0, |b, c| if row[c] > row[b] { c } else { b }) as TokenId;
                prefix.push(best);
                if best == EOS {
                    done[i] = true;
                }
            }
        }
        for p in prefixes {
            out.push(vocab.decode(&p)?);
        }
    }
    Ok(out)
}

/// One model plus the strategy it routes with.
#[derive(Clone)]
pub struct Stage {
    pub model: Arc<dyn Translator + Send>,
    pub strategy: Option<InferenceStrategy>,
}

impl Stage {
    pub fn new(model: Arc<dyn Translator + Send>, strategy: Option<InferenceStrategy>) -> Self {
        Stage { model, strategy }
    }

    pub fn translate<S: AsRef<str>>(&self, texts: &[S], src: &str, tgt: &str) -> Result<Vec<String>> {
        greedy_decode(self.model.as_ref(), texts, src, tgt, self.strategy)
    }
}

/// `src -> en -> tgt`, each stage greedy; errors carry the stage label.
pub fn pivot_translate<S: AsRef<str>>(first: &Stage, second: &Stage, texts: &[S], src: &str, tgt: &str) -> Result<Vec<String>> {
    let mid = first.translate(texts, src, ENGLISH).map_err(|e| e.in_stage("pivot stage 1"))?;
    second.translate(&mid, ENGLISH, tgt).map_err(|e| e.in_stage("pivot stage 2"))
}

/// How a system handles one column.
#[derive(Clone)]
pub enum Route {
    Direct(Stage),
    Pivot(Stage, Stage),
}

type Resolver = dyn Fn(&str, &str) -> Result<Route> + Send + Sync;

/// One matrix row: a system, optionally under a strategy, and how it reaches
/// a translation for each `(src, tgt)` column.
pub struct SystemRow {
    pub system: String,
    pub strategy: Option<InferenceStrategy>,
    pub resolve: Box<Resolver>,
}

impl SystemRow {
    pub fn new(
        system: impl Into<String>,
        strategy: Option<InferenceStrategy>,
        resolve: impl Fn(&str, &str) -> Result<Route> + Send + Sync + 'static,
    ) -> Self {
        SystemRow {
            system: system.into(),
            strategy,
            resolve: Box::new(resolve),
        }
    }

    /// One model for every column.
    pub fn single(system: impl Into<String>, model: Arc<dyn Translator + Send>, strategy: Option<InferenceStrategy>) -> Self {
        let stage = Stage::new(model, strategy);
        Self::new(system, strategy, move |_, _| Ok(Route::Direct(stage.clone())))
    }

    pub fn label(&self) -> String {
        match self.strategy {
            Some(s) => format!("{} [{s}]", self.system),
            None => self.system.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cell {
    Bleu(BleuReport),
    Failed(String),
}

impl Cell {
    pub fn score(&self) -> Option<f64> {
        match self {
            Cell::Bleu(b) => Some(b.score),
            Cell::Failed(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub system: String,
    pub strategy: Option<InferenceStrategy>,
    pub cells: Vec<Cell>,
}

impl RowReport {
    pub fn label(&self) -> String {
        match self.strategy {
            Some(s) => format!("{} [{s}]", self.system),
            None => self.system.clone(),
        }
    }
}

/// Best-scoring rows of one column; every tied row is listed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnBest {
    pub column: String,
    pub score: Option<f64>,
    pub systems: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMatrix {
    /// `"src-tgt"` keys.
    pub columns: Vec<String>,
    pub rows: Vec<RowReport>,
    pub best: Vec<ColumnBest>,
    pub bleu_epsilon: f64,
}

impl EvalMatrix {
    pub fn cell(&self, system: &str, strategy: Option<InferenceStrategy>, column: &str) -> Option<&Cell> {
        let c = self.columns.iter().position(|k| k == column)?;
        let row = self.rows.iter().find(|r| r.system == system && r.strategy == strategy)?;
        row.cells.get(c)
    }

    fn summarize(columns: &[String], rows: &[RowReport]) -> Vec<ColumnBest> {
        columns
            .iter()
            .enumerate()
            .map(|(c, key)| {
                // scores are compared at printed precision so ties are visible ties
                let rounded = |r: &RowReport| r.cells[c].score().map(|s| (s * 100.0).round() as i64);
                let top = rows.iter().filter_map(rounded).max();
                let systems = match top {
                    Some(t) => rows.iter().filter(|r| rounded(r) == Some(t)).map(RowReport::label).collect(),
                    None => Vec::new(),
                };
                ColumnBest {
                    column: key.clone(),
                    score: top.map(|t| t as f64 / 100.0),
                    systems,
                }
            })
            .collect()
    }

    /// Aligned text table; failed cells show `FAIL`, best cells are starred.
    pub fn to_table(&self) -> String {
        let labels: Vec<String> = self.rows.iter().map(RowReport::label).collect();
        let w0 = labels.iter().map(String::len).chain([6]).max().unwrap_or(6);
        let widths: Vec<usize> = self.columns.iter().map(|c| c.len().max(8)).collect();
        let mut out = format!("{:<w0$}", "system");
        for (c, w) in self.columns.iter().zip(&widths) {
            out.push_str(&format!("  {c:>w$}"));
        }
        out.push('\n');
        for (row, label) in self.rows.iter().zip(&labels) {
            out.push_str(&format!("{label:<w0$}"));
            for (c, w) in widths.iter().enumerate() {
                let text = match &row.cells[c] {
                    Cell::Bleu(b) => {
                        let star = if self.best[c].systems.contains(label) { "*" } else { " " };
                        format!("{:.2}{star}", b.score)
                    }
                    Cell::Failed(_) => "FAIL ".to_string(),
                };
                out.push_str(&format!("  {text:>w$}"));
            }
            out.push('\n');
        }
        out.push_str("\nbest per column:\n");
        for b in &self.best {
            match b.score {
                Some(s) => out.push_str(&format!("  {}: {:.2} {}\n", b.column, s, b.systems.join(", "))),
                None => out.push_str(&format!("  {}: no successful system\n", b.column)),
            }
        }
        out
    }
}

/// Thread pool sized by `TASKMOE_THREADS` when set.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::config(format!("thread pool: {e}")))
}

fn run_cell(row: &SystemRow, key: &str, tests: Option<&Vec<ParallelExample>>) -> Result<BleuReport> {
    let tests = tests
        .filter(|t| !t.is_empty())
        .ok_or_else(|| Error::config(format!("no held-out sentences for {key}")))?;
    let (src, tgt) = (&tests[0].src_lang, &tests[0].tgt_lang);
    let texts: Vec<&str> = tests.iter().map(|e| e.src.as_str()).collect();
    let refs: Vec<&str> = tests.iter().map(|e| e.tgt.as_str()).collect();
    let hyps = match (row.resolve)(src, tgt)? {
        Route::Direct(stage) => stage.translate(&texts, src, tgt)?,
        Route::Pivot(a, b) => pivot_translate(&a, &b, &texts, src, tgt)?,
    };
    corpus_bleu(&hyps, &refs)
}

/// Fills every `(row, column)` cell. Cells run in parallel; a failing cell
/// records its error and leaves the rest unaffected.
pub fn run_matrix_eval(
    rows: &[SystemRow],
    columns: &[(String, String)],
    testsets: &BTreeMap<String, Vec<ParallelExample>>,
) -> Result<EvalMatrix> {
    let keys: Vec<String> = columns.iter().map(|(s, t)| pair_key(s, t)).collect();
    let jobs: Vec<(usize, usize)> = (0..rows.len()).flat_map(|r| (0..keys.len()).map(move |c| (r, c))).collect();
    let pool = thread_pool()?;
    let cells: Vec<Cell> = pool.install(|| {
        jobs.par_iter()
            .map(|&(r, c)| match run_cell(&rows[r], &keys[c], testsets.get(&keys[c])) {
                Ok(b) => Cell::Bleu(b),
                Err(e) => Cell::Failed(e.to_string()),
            })
            .collect()
    });
    let mut it = cells.into_iter();
    let reports: Vec<RowReport> = rows
        .iter()
        .map(|r| RowReport {
            system: r.system.clone(),
            strategy: r.strategy,
            cells: it.by_ref().take(keys.len()).collect(),
        })
        .collect();
    let best = EvalMatrix::summarize(&keys, &reports);
    Ok(EvalMatrix {
        columns: keys,
        rows: reports,
        best,
        bleu_epsilon: BLEU_EPSILON,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(score: f64) -> Cell {
        Cell::Bleu(BleuReport {
            score,
            precisions: [1.0; 4],
            bp: 1.0,
            hyp_len: 1,
            ref_len: 1,
        })
    }

    #[test]
    fn summary_lists_ties() {
        let rows = vec![
            RowReport {
                system: "a".into(),
                strategy: None,
                cells: vec![report(50.0), Cell::Failed("x".into())],
            },
            RowReport {
                system: "b".into(),
                strategy: Some(InferenceStrategy::TlA),
                cells: vec![report(50.0), Cell::Failed("y".into())],
            },
            RowReport {
                system: "c".into(),
                strategy: None,
                cells: vec![report(20.0), Cell::Failed("z".into())],
            },
        ];
        let cols = vec!["aa-bb".to_string(), "bb-aa".to_string()];
        let best = EvalMatrix::summarize(&cols, &rows);
        assert_eq!(best[0].systems, ["a", "b [tl_a]"]);
        assert!(best[1].systems.is_empty() && best[1].score.is_none());
        let m = EvalMatrix {
            columns: cols,
            rows,
            best,
            bleu_epsilon: BLEU_EPSILON,
        };
        let table = m.to_table();
        assert!(table.contains("50.00*") && table.contains("FAIL"), "{table}");
    }

    #[test]
    fn display_format() {
        let r = corpus_bleu(&["a b c d"], &["a b c d"]).unwrap();
        assert!(r.to_string().starts_with("BLEU = 100.00 (100.0/100.0/100.0/100.0, BP=1.0000"));
    }
}
