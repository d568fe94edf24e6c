//! Pipeline behind the `taskmoe` binary: data generation, training,
//! evaluation, extraction and routing dumps, all driven by one JSON config.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use taskmoe::analysis::{self, OverlapStats, SnapshotSeries, UtilizationMatrix};
use taskmoe::checkpoint::{self, Checkpoint};
use taskmoe::corpus::{self, pair_key, split_pair_key, CorpusManifest, ParallelExample, ENGLISH};
use taskmoe::eval::{self, EvalMatrix, Route, Stage, SystemRow};
use taskmoe::model::{MoeModel, Side, Translator};
use taskmoe::tasks::{InferenceStrategy, TaskId, TaskMode, TaskRegistry};
use taskmoe::training::{self, TrainOutcome};
use taskmoe::vocab::Vocab;
use taskmoe::{Error, Result};

pub use config::{Loaded, RunConfig, SystemKind};

/// Process exit status for an error: 2 bad input, 3 file problems,
/// 4 numerical failure, 5 a task that cannot be resolved.
pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_) | Error::Parse { .. } | Error::UnknownLanguage(_) => 2,
        Error::Io { .. } | Error::Checkpoint { .. } => 3,
        Error::NonFinite(_) | Error::Shape { .. } | Error::Axis { .. } | Error::NotScalar(_) | Error::Index { .. } => 4,
        Error::UnresolvedTask { .. } => 5,
        Error::Stage { .. } => unreachable!("root() strips stage labels"),
    }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report types serialize") + "\n"
}

pub fn gen_data(run: &Loaded) -> Result<CorpusManifest> {
    let synth = corpus::gen_corpus(&run.cfg.corpus)?;
    corpus::write_corpus(&run.cfg.corpus, &synth, &run.data_dir())
}

/// Training and held-out sets as written by [`gen_data`], keyed by pair.
pub struct Data {
    pub train: BTreeMap<String, Vec<ParallelExample>>,
    pub test: BTreeMap<String, Vec<ParallelExample>>,
}

pub fn load_data(run: &Loaded) -> Result<Data> {
    let dir = run.data_dir();
    let manifest = CorpusManifest::load(&dir)?;
    if manifest.spec != run.cfg.corpus {
        return Err(Error::config(format!(
            "{} was generated from a different corpus spec; rerun gen-data",
            dir.display()
        )));
    }
    let mut data = Data {
        train: BTreeMap::new(),
        test: BTreeMap::new(),
    };
    for f in &manifest.files {
        let examples = corpus::load_tsv(&dir.join(&f.path))?;
        let set = match f.split.as_str() {
            "train" => &mut data.train,
            "test" => &mut data.test,
            other => return Err(Error::config(format!("unknown split {other:?} in manifest"))),
        };
        set.insert(pair_key(&f.src, &f.tgt), examples);
    }
    Ok(data)
}

pub fn build_vocab(run: &Loaded, data: &Data) -> Result<Vocab> {
    Vocab::build_with_languages(
        data.train.values().flatten(),
        run.cfg.corpus.languages.iter().map(String::as_str),
        run.cfg.model.vocab_max,
    )
}

fn training_pairs(data: &Data) -> Vec<(String, String)> {
    data.train
        .keys()
        .filter_map(|k| split_pair_key(k).map(|(s, t)| (s.to_string(), t.to_string())))
        .collect()
}

/// The untrained routed model for this config and data.
pub fn build_moe(run: &Loaded, data: &Data) -> Result<MoeModel> {
    let vocab = build_vocab(run, data)?;
    let registry = TaskRegistry::build(run.cfg.model.mode, &training_pairs(data))?;
    let cfg = run.cfg.model.config(vocab.len(), registry.len());
    MoeModel::init(cfg, registry, vocab, run.cfg.train.seed)
}

/// Checkpoint with the highest step in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<PathBuf> {
    step_checkpoints(dir)?
        .pop()
        .map(|(_, p)| p)
        .ok_or_else(|| Error::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no step-*.ckpt files")))
}

/// All `step-N.ckpt` files in `dir`, ordered by step.
pub fn step_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step-")?.strip_suffix(".ckpt")?.parse::<u64>().ok());
        if let Some(s) = step {
            found.push((s, path));
        }
    }
    found.sort();
    Ok(found)
}

/// Trains the routed model into `run/moe`, optionally resuming.
pub fn train_moe(run: &Loaded, data: &Data, resume: Option<&Path>, on_step: impl FnMut(u64, f64)) -> Result<TrainOutcome> {
    let fresh = build_moe(run, data)?;
    let (mut model, state) = match resume {
        None => (fresh, None),
        Some(path) => {
            let (model, state) = checkpoint::load_moe(path)?;
            let state = state.ok_or_else(|| Error::Checkpoint {
                path: path.to_path_buf(),
                msg: "no optimizer state to resume from".into(),
            })?;
            if model.config() != fresh.config() || model.registry() != fresh.registry() || model.vocab().tokens() != fresh.vocab().tokens() {
                return Err(Error::Checkpoint {
                    path: path.to_path_buf(),
                    msg: "model, tasks or vocabulary differ from the current config".into(),
                });
            }
            (model, Some(state))
        }
    };
    training::train(&mut model, &data.train, &run.cfg.train, &run.moe_dir(), state, on_step)
}

/// Trains one single-pair dense model per configured baseline pair into
/// `run/bilingual/<pair>`. Shares the routed model's vocabulary.
pub fn train_baselines(run: &Loaded, data: &Data, mut on_step: impl FnMut(&str, u64, f64)) -> Result<Vec<PathBuf>> {
    let Some(b) = &run.cfg.baselines else {
        return Ok(Vec::new());
    };
    let vocab = build_vocab(run, data)?;
    let mut out = Vec::new();
    for key in &b.pairs {
        let (src, tgt) = split_pair_key(key).expect("validated on load");
        let examples = data
            .train
            .get(key)
            .ok_or_else(|| Error::config(format!("baseline pair {key} has no training data")))?;
        let registry = TaskRegistry::build(TaskMode::Lp, &[(src, tgt)])?;
        let mut section = run.cfg.model.clone();
        (section.d_model, section.d_ff, section.n_heads, section.n_layers) = (b.d_model, b.d_ff, b.n_heads, b.n_layers);
        let cfg = section.config(vocab.len(), 1).dense();
        let mut model = MoeModel::init(cfg, registry, vocab.clone(), b.train.seed)?;
        let corpora = BTreeMap::from([(key.clone(), examples.clone())]);
        let outcome = training::train(&mut model, &corpora, &b.train, &run.bilingual_dir(key), None, |s, l| on_step(key, s, l))
            .map_err(|e| e.in_stage(format!("bilingual {key}")))?;
        out.extend(outcome.checkpoints.last().cloned());
    }
    Ok(out)
}

fn load_translator(path: &Path) -> Result<Arc<dyn Translator + Send>> {
    Ok(match checkpoint::load(path)? {
        Checkpoint::Moe { model, .. } => Arc::new(model),
        Checkpoint::Dense(d) => Arc::new(d),
    })
}

fn bilingual_stage(run: &Loaded, src: &str, tgt: &str) -> Result<Stage> {
    let dir = run.bilingual_dir(&pair_key(src, tgt));
    // the message lands in the report, which must not depend on where the run lives
    let path = latest_checkpoint(&dir).map_err(|_| Error::config(format!("no bilingual model trained for {src}-{tgt}")))?;
    Ok(Stage::new(load_translator(&path)?, None))
}

fn columns(run: &Loaded, data: &Data) -> Vec<(String, String)> {
    let keys: Vec<&String> = if run.cfg.eval.pairs.is_empty() {
        data.test.keys().collect()
    } else {
        run.cfg.eval.pairs.iter().collect()
    };
    keys.into_iter()
        .filter_map(|k| split_pair_key(k).map(|(s, t)| (s.to_string(), t.to_string())))
        .collect()
}

fn truncated(run: &Loaded, data: &Data) -> BTreeMap<String, Vec<ParallelExample>> {
    let cap = run.cfg.eval.max_sentences.unwrap_or(usize::MAX);
    data.test.iter().map(|(k, v)| (k.clone(), v.iter().take(cap).cloned().collect())).collect()
}

/// Matrix rows for the configured systems around a routed model.
pub fn system_rows(run: &Loaded, moe: Arc<MoeModel>, strategies: &[InferenceStrategy]) -> Vec<SystemRow> {
    let mut rows = Vec::new();
    for kind in &run.cfg.eval.systems {
        match kind {
            SystemKind::Moe => {
                for &s in strategies {
                    rows.push(SystemRow::single("moe", moe.clone(), Some(s)));
                }
            }
            SystemKind::Dense => {
                for &s in strategies {
                    let moe = moe.clone();
                    rows.push(SystemRow::new("extracted", Some(s), move |src, tgt| {
                        let task = moe.registry().resolve_infer(s, src, tgt)?;
                        Ok(Route::Direct(Stage::new(Arc::new(moe.extract_dense(task)?), None)))
                    }));
                }
            }
            SystemKind::Bilingual => {
                let run = run.clone();
                rows.push(SystemRow::new("bilingual", None, move |src, tgt| {
                    Ok(Route::Direct(bilingual_stage(&run, src, tgt)?))
                }));
            }
            SystemKind::Pivot => {
                let run = run.clone();
                rows.push(SystemRow::new("pivot", None, move |src, tgt| {
                    if src == ENGLISH || tgt == ENGLISH {
                        return Err(Error::config("pivoting through English needs two non-English endpoints"));
                    }
                    Ok(Route::Pivot(bilingual_stage(&run, src, ENGLISH)?, bilingual_stage(&run, ENGLISH, tgt)?))
                }));
            }
            SystemKind::MoePivot => {
                for &s in strategies {
                    let stage = Stage::new(moe.clone(), Some(s));
                    rows.push(SystemRow::new("moe-pivot", Some(s), move |src, tgt| {
                        if src == ENGLISH || tgt == ENGLISH {
                            return Err(Error::config("pivoting through English needs two non-English endpoints"));
                        }
                        Ok(Route::Pivot(stage.clone(), stage.clone()))
                    }));
                }
            }
        }
    }
    rows
}

/// Evaluates the latest (or given) checkpoint and writes the report JSON and
/// a text table next to it. A dense checkpoint becomes a single row.
pub fn evaluate(run: &Loaded, checkpoint: Option<&Path>, strategy: Option<InferenceStrategy>) -> Result<EvalMatrix> {
    let data = load_data(run)?;
    let path = match checkpoint {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(&run.moe_dir())?,
    };
    let strategies = match strategy {
        Some(s) => vec![s],
        None => run.strategies(),
    };
    let rows = match checkpoint::load(&path)? {
        Checkpoint::Moe { model, .. } => {
            let mode = model.registry().mode();
            if let Some(s) = strategies.iter().find(|s| s.mode() != mode) {
                return Err(Error::config(format!("strategy {s} does not apply to a {mode}-mode model")));
            }
            system_rows(run, Arc::new(model), &strategies)
        }
        Checkpoint::Dense(d) => {
            let label = format!("extracted:{}", d.task_key());
            vec![SystemRow::single(label, Arc::new(d), None)]
        }
    };
    let matrix = eval::run_matrix_eval(&rows, &columns(run, &data), &truncated(run, &data))?;
    let report = run.report_path();
    write_file(&report, to_json(&matrix))?;
    write_file(&report.with_extension("txt"), matrix.to_table())?;
    Ok(matrix)
}

/// Which task to extract: a registry key, or a pair under a strategy.
pub enum TaskSelector {
    Key(String),
    Pair { src: String, tgt: String, strategy: InferenceStrategy },
}

pub fn extract(checkpoint: &Path, selector: &TaskSelector, out: &Path) -> Result<String> {
    let (model, _) = checkpoint::load_moe(checkpoint)?;
    let task = match selector {
        TaskSelector::Key(k) => model.registry().id(k).ok_or_else(|| Error::UnresolvedTask {
            key: k.clone(),
            reason: format!("not one of the trained tasks {:?}", model.registry().keys()),
        })?,
        TaskSelector::Pair { src, tgt, strategy } => model.registry().resolve_infer(*strategy, src, tgt)?,
    };
    let dense = model.extract_dense(task)?;
    checkpoint::save_dense(out, &dense)?;
    Ok(dense.task_key().to_string())
}

pub struct RouteDumpOptions {
    pub checkpoint: PathBuf,
    pub layer: Option<usize>,
    pub side: Option<Side>,
    pub out: PathBuf,
    /// Label rows by pair, resolved through `strategy`, instead of by task.
    pub pairs: Vec<String>,
    pub strategy: Option<InferenceStrategy>,
    /// Also trace routing across every checkpoint next to `checkpoint`.
    pub series: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct LayerOverlap {
    pub layer: usize,
    pub stats: OverlapStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct RouteDump {
    pub matrices: Vec<UtilizationMatrix>,
    pub overlap: Vec<LayerOverlap>,
    /// Per matrix, groups of rows whose gates are bit-identical.
    pub identical_rows: Vec<Vec<Vec<String>>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub series: Vec<SnapshotSeries>,
}

fn identical_groups(m: &UtilizationMatrix) -> Vec<Vec<String>> {
    let mut groups: Vec<(Vec<u64>, Vec<String>)> = Vec::new();
    for (label, row) in m.rows.iter().zip(&m.cells) {
        let bits: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        match groups.iter_mut().find(|(b, _)| *b == bits) {
            Some((_, g)) => g.push(label.clone()),
            None => groups.push((bits, vec![label.clone()])),
        }
    }
    groups.into_iter().map(|(_, g)| g).filter(|g| g.len() > 1).collect()
}

fn stem(side: Side, layer: usize) -> String {
    format!("{side}-layer{layer}")
}

/// Utilization heatmaps (CSV + SVG), encoder/decoder overlap per layer and,
/// optionally, the routing history over saved checkpoints.
pub fn route_dump(opts: &RouteDumpOptions) -> Result<RouteDump> {
    let (model, _) = checkpoint::load_moe(&opts.checkpoint)?;
    let moe_layers = model.moe_layers();
    if moe_layers.is_empty() {
        return Err(Error::config("the checkpoint has no expert layers to dump"));
    }
    let layers = match opts.layer {
        Some(l) if moe_layers.contains(&l) => vec![l],
        Some(l) => return Err(Error::config(format!("layer {l} is not an expert layer; expert layers are {moe_layers:?}"))),
        None => moe_layers,
    };
    let sides: Vec<Side> = opts.side.map_or(Side::BOTH.to_vec(), |s| vec![s]);
    let rows: Vec<(String, TaskId)> = if opts.pairs.is_empty() {
        analysis::all_tasks(&model)
    } else {
        let strategy = opts
            .strategy
            .ok_or_else(|| Error::config("--pairs needs --strategy to map pairs onto tasks"))?;
        opts.pairs
            .iter()
            .map(|k| {
                let (s, t) = split_pair_key(k).ok_or_else(|| Error::config(format!("{k:?} is not of the form src-tgt")))?;
                Ok((k.clone(), model.registry().resolve_infer(strategy, s, t)?))
            })
            .collect::<Result<_>>()?
    };

    let mut dump = RouteDump {
        matrices: Vec::new(),
        overlap: Vec::new(),
        identical_rows: Vec::new(),
        series: Vec::new(),
    };
    for &layer in &layers {
        let mut by_side = BTreeMap::new();
        for &side in &sides {
            let m = analysis::utilization(&model, layer, side, &rows)?;
            analysis::export_heatmap(&m, &opts.out, &stem(side, layer))?;
            dump.identical_rows.push(identical_groups(&m));
            by_side.insert(side, m.clone());
            dump.matrices.push(m);
        }
        if let (Some(enc), Some(dec)) = (by_side.get(&Side::Encoder), by_side.get(&Side::Decoder)) {
            dump.overlap.push(LayerOverlap {
                layer,
                stats: analysis::overlap_stats(enc, dec)?,
            });
        }
    }
    if opts.series {
        let dir = opts.checkpoint.parent().unwrap_or(Path::new("."));
        let paths: Vec<PathBuf> = step_checkpoints(dir)?.into_iter().map(|(_, p)| p).collect();
        let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
        let keys = model.registry().keys().to_vec();
        for &layer in &layers {
            for &side in &sides {
                dump.series.push(analysis::snapshot_series(&refs, layer, side, &keys)?);
            }
        }
        write_file(&opts.out.join("series.json"), to_json(&dump.series))?;
    }
    write_file(&opts.out.join("overlap.json"), to_json(&dump.overlap))?;
    Ok(dump)
}

impl RouteDump {
    /// Human-readable digest printed by the CLI.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        for (m, groups) in self.matrices.iter().zip(&self.identical_rows) {
            out.push_str(&format!("{} layer {}:\n", m.side, m.layer));
            for (i, label) in m.rows.iter().enumerate() {
                let picks: Vec<String> = m
                    .selected(i)
                    .into_iter()
                    .map(|e| format!("{e}:{:.4}", m.cells[i][e]))
                    .collect();
                out.push_str(&format!("  {label:<10} {}\n", picks.join(" ")));
            }
            for g in groups {
                out.push_str(&format!("  identical: {}\n", g.join(", ")));
            }
        }
        for o in &self.overlap {
            let s = &o.stats;
            out.push_str(&format!(
                "layer {} overlap: encoder experts {:?}, decoder experts {:?}, shared {}, jaccard {:.3}\n",
                o.layer, s.encoder_experts, s.decoder_experts, s.intersection, s.jaccard
            ));
        }
        for s in &self.series {
            if let Some(m) = s.matrices.first() {
                out.push_str(&format!(
                    "{} layer {} series over steps {:?}: rows changing {:?}\n",
                    m.side, m.layer, s.steps, s.changes
                ));
            }
        }
        out
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Corpus BLEU of two line-aligned files.
pub fn bleu_files(hyp: &Path, reference: &Path) -> Result<eval::BleuReport> {
    eval::corpus_bleu(&read_lines(hyp)?, &read_lines(reference)?)
}
