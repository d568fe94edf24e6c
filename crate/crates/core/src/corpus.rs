//! Synthetic permutation-cipher languages and TSV corpus I/O.
//!
//! Every toy language renders a shared base alphabet of `B` symbols through
//! its own fixed permutation; `en` is the identity. A parallel example is one
//! uniformly random base sequence rendered on both sides, so the reference
//! for any direction is known exactly.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::validate_code;

/// The pivot language; always rendered with the identity permutation.
pub const ENGLISH: &str = "en";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParallelExample {
    pub src_lang: String,
    pub tgt_lang: String,
    pub src: String,
    pub tgt: String,
}

impl ParallelExample {
    pub fn new(src_lang: &str, tgt_lang: &str, src: &str, tgt: &str) -> Self {
        ParallelExample {
            src_lang: src_lang.to_string(),
            tgt_lang: tgt_lang.to_string(),
            src: src.to_string(),
            tgt: tgt.to_string(),
        }
    }

    pub fn pair_key(&self) -> String {
        pair_key(&self.src_lang, &self.tgt_lang)
    }

    fn to_tsv_line(&self) -> String {
        format!("{}\t{}\t{}\t{}\n", self.src_lang, self.tgt_lang, self.src, self.tgt)
    }
}

pub fn pair_key(src: &str, tgt: &str) -> String {
    format!("{src}-{tgt}")
}

/// Splits `"xx-yy"` into its two codes.
pub fn split_pair_key(key: &str) -> Option<(&str, &str)> {
    let (a, b) = key.split_once('-')?;
    (!a.is_empty() && !b.is_empty() && !b.contains('-')).then_some((a, b))
}

/// 64-bit FNV-1a, used to derive stable seeds from language codes.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyLanguage {
    code: String,
    perm: Vec<usize>,
    inverse: Vec<usize>,
}

impl ToyLanguage {
    /// The permutation depends only on `code` and `base_vocab`.
    pub fn new(code: &str, base_vocab: usize) -> Self {
        let mut perm: Vec<usize> = (0..base_vocab).collect();
        if code != ENGLISH {
            let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(code.as_bytes()));
            perm.shuffle(&mut rng);
        }
        let mut inverse = vec![0; base_vocab];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        ToyLanguage {
            code: code.to_string(),
            perm,
            inverse,
        }
    }

    pub fn code(&self) -> &str {
        &self.code
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    pub fn render(&self, base: &[usize]) -> String {
        base.iter().map(|&s| format!("s{}", self.perm[s])).collect::<Vec<_>>().join(" ")
    }

    /// Inverse of [`ToyLanguage::render`]; `None` on foreign tokens.
    pub fn parse(&self, text: &str) -> Option<Vec<usize>> {
        text.split_whitespace()
            .map(|tok| {
                let k: usize = tok.strip_prefix('s')?.parse().ok()?;
                self.inverse.get(k).copied()
            })
            .collect()
    }

    /// Renders text written in `self` into `other` symbol by symbol.
    pub fn translate(&self, text: &str, other: &ToyLanguage) -> Option<String> {
        self.parse(text).map(|base| other.render(&base))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub src: String,
    pub tgt: String,
    /// Training sentences.
    pub count: usize,
    /// Held-out sentences for this direction.
    #[serde(default)]
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalPairSpec {
    pub src: String,
    pub tgt: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub languages: Vec<String>,
    pub pairs: Vec<PairSpec>,
    /// Held-out sets for directions with no training data.
    #[serde(default)]
    pub eval_only: Vec<EvalPairSpec>,
    pub min_len: usize,
    pub max_len: usize,
    pub base_vocab: usize,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        for code in &self.languages {
            validate_code(code)?;
        }
        if !self.languages.iter().any(|l| l == ENGLISH) {
            return Err(Error::config("corpus languages must include \"en\""));
        }
        if self.pairs.is_empty() {
            return Err(Error::config("corpus has no pairs"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "invalid sentence length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.base_vocab < 2 {
            return Err(Error::config("base vocabulary needs at least 2 symbols"));
        }
        let mut keys = HashSet::new();
        let all = self
            .pairs
            .iter()
            .map(|p| (&p.src, &p.tgt, p.count, "pair"))
            .chain(self.eval_only.iter().map(|p| (&p.src, &p.tgt, p.count, "eval pair")));
        for (src, tgt, count, what) in all {
            for code in [src, tgt] {
                if !self.languages.contains(code) {
                    return Err(Error::UnknownLanguage(code.clone()));
                }
            }
            if count == 0 {
                return Err(Error::config(format!("{what} {src}-{tgt} has zero sentences")));
            }
            if !keys.insert((what, src, tgt)) {
                return Err(Error::config(format!("duplicate {what} {src}-{tgt}")));
            }
        }
        Ok(())
    }

    pub fn language(&self, code: &str) -> ToyLanguage {
        ToyLanguage::new(code, self.base_vocab)
    }
}

/// Generated corpus, keyed by `"src-tgt"`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthCorpus {
    pub train: BTreeMap<String, Vec<ParallelExample>>,
    pub test: BTreeMap<String, Vec<ParallelExample>>,
}

impl SynthCorpus {
    pub fn train_examples(&self) -> impl Iterator<Item = &ParallelExample> {
        self.train.values().flatten()
    }
}

fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(label.as_bytes()));
    rng
}

fn random_sentence(rng: &mut ChaCha8Rng, spec: &CorpusSpec) -> Vec<usize> {
    let len = rng.random_range(spec.min_len..=spec.max_len);
    (0..len).map(|_| rng.random_range(0..spec.base_vocab)).collect()
}

/// Generates training and held-out sets. Pure in `spec`.
///
/// Held-out base sequences never occur in any training pair.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut out = SynthCorpus::default();
    let mut train_seqs: HashSet<Vec<usize>> = HashSet::new();
    for p in &spec.pairs {
        let (sl, tl) = (spec.language(&p.src), spec.language(&p.tgt));
        let mut rng = stream_rng(spec.seed, &format!("train:{}-{}", p.src, p.tgt));
        let examples = (0..p.count)
            .map(|_| {
                let base = random_sentence(&mut rng, spec);
                let ex = ParallelExample::new(&p.src, &p.tgt, &sl.render(&base), &tl.render(&base));
                train_seqs.insert(base);
                ex
            })
            .collect();
        out.train.insert(pair_key(&p.src, &p.tgt), examples);
    }

    let tests = spec
        .pairs
        .iter()
        .filter(|p| p.test > 0)
        .map(|p| (&p.src, &p.tgt, p.test))
        .chain(spec.eval_only.iter().map(|p| (&p.src, &p.tgt, p.count)));
    for (src, tgt, count) in tests {
        let (sl, tl) = (spec.language(src), spec.language(tgt));
        let mut rng = stream_rng(spec.seed, &format!("test:{src}-{tgt}"));
        let mut examples = Vec::with_capacity(count);
        let mut attempts = 0usize;
        while examples.len() < count {
            attempts += 1;
            if attempts > 1000 * count + 1000 {
                return Err(Error::config(format!(
                    "cannot draw {count} held-out sentences for {src}-{tgt} disjoint from training data"
                )));
            }
            let base = random_sentence(&mut rng, spec);
            if !train_seqs.contains(&base) {
                examples.push(ParallelExample::new(src, tgt, &sl.render(&base), &tl.render(&base)));
            }
        }
        out.test.insert(pair_key(src, tgt), examples);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusFile {
    pub split: String,
    pub src: String,
    pub tgt: String,
    pub path: String,
    pub lines: usize,
}

/// Written next to the TSV files by [`write_corpus`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: CorpusSpec,
    pub files: Vec<CorpusFile>,
}

impl CorpusManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn file(&self, split: &str, src: &str, tgt: &str) -> Option<&CorpusFile> {
        self.files.iter().find(|f| f.split == split && f.src == src && f.tgt == tgt)
    }
}

pub fn tsv_name(split: &str, key: &str) -> String {
    format!("{split}.{key}.tsv")
}

pub fn write_tsv(path: &Path, examples: &[ParallelExample]) -> Result<()> {
    let text: String = examples.iter().map(ParallelExample::to_tsv_line).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `train.*.tsv`, `test.*.tsv` and `manifest.json` under `dir`.
pub fn write_corpus(spec: &CorpusSpec, corpus: &SynthCorpus, dir: &Path) -> Result<CorpusManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (split, sets) in [("train", &corpus.train), ("test", &corpus.test)] {
        for (key, examples) in sets {
            let name = tsv_name(split, key);
            write_tsv(&dir.join(&name), examples)?;
            let (src, tgt) = split_pair_key(key).expect("generated keys are well formed");
            files.push(CorpusFile {
                split: split.to_string(),
                src: src.to_string(),
                tgt: tgt.to_string(),
                path: name,
                lines: examples.len(),
            });
        }
    }
    let manifest = CorpusManifest {
        spec: spec.clone(),
        files,
    };
    let path = dir.join(CorpusManifest::FILE_NAME);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Parses `src_lang<TAB>tgt_lang<TAB>src<TAB>tgt` lines.
pub fn load_tsv(path: &Path) -> Result<Vec<ParallelExample>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, path)
}

pub fn parse_tsv(text: &str, path: &Path) -> Result<Vec<ParallelExample>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(err(n, format!("expected 4 tab-separated columns, found {}", cols.len())));
        }
        for (what, v) in [("source language", cols[0]), ("target language", cols[1])] {
            if v.trim().is_empty() {
                return Err(err(n, format!("empty {what}")));
            }
            validate_code(v.trim()).map_err(|_| err(n, format!("invalid {what} {v:?}")))?;
        }
        for (what, v) in [("source", cols[2]), ("target", cols[3])] {
            if v.trim().is_empty() {
                return Err(err(n, format!("empty {what} sentence")));
            }
        }
        out.push(ParallelExample::new(cols[0].trim(), cols[1].trim(), cols[2].trim(), cols[3].trim()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec() -> CorpusSpec {
        CorpusSpec {
            languages: vec!["en".into(), "xx".into(), "yy".into()],
            pairs: vec![
                PairSpec { src: "en".into(), tgt: "xx".into(), count: 100, test: 5 },
                PairSpec { src: "xx".into(), tgt: "yy".into(), count: 40, test: 0 },
            ],
            eval_only: vec![EvalPairSpec { src: "yy".into(), tgt: "en".into(), count: 7 }],
            min_len: 2,
            max_len: 5,
            base_vocab: 12,
            seed: 9,
        }
    }

    #[test]
    fn english_is_identity_and_render_matches_definition() {
        let en = ToyLanguage::new("en", 10);
        assert_eq!(en.render(&[3, 1]), "s3 s1");
        let xx = ToyLanguage::new("xx", 10);
        let p = xx.permutation();
        assert_eq!(xx.render(&[3, 1]), format!("s{} s{}", p[3], p[1]));
        assert_eq!(ToyLanguage::new("xx", 10), xx);
        assert_ne!(ToyLanguage::new("yy", 10).permutation(), p);
    }

    #[test]
    fn permutation_is_bijection() {
        let l = ToyLanguage::new("ja", 50);
        let mut seen = l.permutation().to_vec();
        seen.sort_unstable();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn counts_and_determinism() {
        let s = spec();
        let a = gen_corpus(&s).unwrap();
        assert_eq!(a.train["en-xx"].len(), 100);
        assert_eq!(a.train["xx-yy"].len(), 40);
        assert_eq!(a.test["en-xx"].len(), 5);
        assert_eq!(a.test["yy-en"].len(), 7);
        assert!(!a.test.contains_key("xx-yy"));
        assert_eq!(a, gen_corpus(&s).unwrap());
    }

    #[test]
    fn held_out_disjoint_from_training() {
        let s = spec();
        let c = gen_corpus(&s).unwrap();
        let en = s.language("en");
        let xx = s.language("xx");
        let train: HashSet<_> = c.train["en-xx"].iter().map(|e| en.parse(&e.src).unwrap()).collect();
        for e in &c.test["en-xx"] {
            assert!(!train.contains(&en.parse(&e.src).unwrap()));
            assert_eq!(en.translate(&e.src, &xx).unwrap(), e.tgt);
        }
    }

    #[test]
    fn unknown_language_in_pair() {
        let mut s = spec();
        s.pairs[0].tgt = "zz".into();
        assert!(matches!(gen_corpus(&s), Err(Error::UnknownLanguage(c)) if c == "zz"));
        let mut s = spec();
        s.languages.retain(|l| l != "en");
        s.pairs.clear();
        assert!(gen_corpus(&s).is_err());
    }

    #[test]
    fn tsv_parsing() {
        let p = Path::new("mem.tsv");
        let ex = parse_tsv("ja\tko\tx y\tz w\n", p).unwrap();
        assert_eq!(ex, vec![ParallelExample::new("ja", "ko", "x y", "z w")]);
        let err = parse_tsv("ja\tko\tx y\tz\nja\tko\tx\n", p).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(matches!(parse_tsv("\tko\ta\tb\n", p), Err(Error::Parse { line: 1, .. })));
        assert!(parse_tsv("", p).unwrap().is_empty());
        assert!(matches!(load_tsv(Path::new("/definitely/missing.tsv")), Err(Error::Io { .. })));
    }

    #[test]
    fn written_files_are_byte_identical() {
        let s = spec();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = write_corpus(&s, &gen_corpus(&s).unwrap(), d1.path()).unwrap();
        write_corpus(&s, &gen_corpus(&s).unwrap(), d2.path()).unwrap();
        for f in &m.files {
            let a = fs::read(d1.path().join(&f.path)).unwrap();
            let b = fs::read(d2.path().join(&f.path)).unwrap();
            assert_eq!(a, b);
            assert_eq!(load_tsv(&d1.path().join(&f.path)).unwrap().len(), f.lines);
        }
        assert_eq!(CorpusManifest::load(d1.path()).unwrap(), m);
        let f = m.file("train", "en", "xx").unwrap();
        assert_eq!(fs::read_to_string(d1.path().join(&f.path)).unwrap().lines().count(), 100);
    }
}
