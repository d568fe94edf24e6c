//! Shared source/target vocabulary with `<4xx>` / `<2yy>` language tags.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::corpus::ParallelExample;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Vocabulary size used by the large preset.
pub const FULL_VOCAB_SIZE: usize = 32_000;

pub fn source_tag(code: &str) -> String {
    format!("<4{code}>")
}

pub fn target_tag(code: &str) -> String {
    format!("<2{code}>")
}

/// Language codes become parts of task keys like `ja-ko`, so they must not
/// contain separators or whitespace.
pub fn validate_code(code: &str) -> Result<()> {
    if code.is_empty() || !code.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
        return Err(Error::UnknownLanguage(code.to_string()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    languages: BTreeSet<String>,
}

impl Vocab {
    /// Builds a vocabulary from whitespace tokens of both sides of `corpus`.
    ///
    /// Layout: the four reserved ids, then `<4xx>`, `<2xx>` per language in
    /// code order, then corpus tokens by descending count (ties broken
    /// lexicographically) until `max_size` entries exist.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ParallelExample>,
    {
        Self::build_with_languages(corpus, std::iter::empty::<&str>(), max_size)
    }

    /// Like [`Vocab::build`], also reserving tags for `extra_languages`.
    pub fn build_with_languages<'a, 'b, I, L>(corpus: I, extra_languages: L, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a ParallelExample>,
        L: IntoIterator<Item = &'b str>,
    {
        let mut languages = BTreeSet::new();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let mut seen = 0usize;
        for ex in corpus {
            seen += 1;
            languages.insert(ex.src_lang.clone());
            languages.insert(ex.tgt_lang.clone());
            for tok in ex.src.split_whitespace().chain(ex.tgt.split_whitespace()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if seen == 0 {
            return Err(Error::config("cannot build a vocabulary from an empty corpus"));
        }
        languages.extend(extra_languages.into_iter().map(str::to_string));
        for code in &languages {
            validate_code(code)?;
        }
        let fixed = RESERVED.len() + 2 * languages.len();
        if max_size < fixed {
            return Err(Error::config(format!(
                "vocabulary size {max_size} is smaller than the {fixed} reserved and language tokens"
            )));
        }

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for code in &languages {
            tokens.push(source_tag(code));
            tokens.push(target_tag(code));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let taken: BTreeSet<String> = tokens.iter().cloned().collect();
        tokens.extend(
            ranked
                .into_iter()
                .map(|(t, _)| t)
                .filter(|t| !taken.contains(*t))
                .take(max_size - fixed)
                .map(str::to_string),
        );
        Ok(Self::from_parts(tokens, languages))
    }

    fn from_parts(tokens: Vec<String>, languages: BTreeSet<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocab {
            tokens,
            index,
            languages,
        }
    }

    /// Rebuilds a vocabulary from its token list (line order = id).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::config("vocabulary does not start with the reserved tokens"));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = tokens.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(Error::config(format!("duplicate vocabulary token {dup:?}")));
        }
        let mut languages = BTreeSet::new();
        for t in &tokens {
            if let Some(code) = t.strip_prefix("<4").and_then(|s| s.strip_suffix('>')) {
                if !seen.contains(target_tag(code).as_str()) {
                    return Err(Error::config(format!("language {code:?} has no target tag")));
                }
                languages.insert(code.to_string());
            }
        }
        Ok(Self::from_parts(tokens, languages))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.languages.iter().map(String::as_str)
    }

    pub fn has_language(&self, code: &str) -> bool {
        self.languages.contains(code)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    fn tag_id(&self, tag: String, code: &str) -> Result<TokenId> {
        self.id(&tag).ok_or_else(|| Error::UnknownLanguage(code.to_string()))
    }

    fn word_ids<'a>(&'a self, text: &'a str) -> impl Iterator<Item = TokenId> + 'a {
        text.split_whitespace().map(|w| self.id(w).unwrap_or(UNK))
    }

    /// `[<4src>, <2tgt>, tokens.., </s>]`
    pub fn encode_source(&self, src_lang: &str, tgt_lang: &str, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = vec![
            self.tag_id(source_tag(src_lang), src_lang)?,
            self.tag_id(target_tag(tgt_lang), tgt_lang)?,
        ];
        ids.extend(self.word_ids(text));
        ids.push(EOS);
        Ok(ids)
    }

    /// `[<s>, tokens.., </s>]`
    pub fn encode_target(&self, text: &str) -> Vec<TokenId> {
        let mut ids = vec![BOS];
        ids.extend(self.word_ids(text));
        ids.push(EOS);
        ids
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < RESERVED.len() + 2 * self.languages.len()
    }

    /// Joins non-reserved, non-language tokens with single spaces.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            let tok = self.token(id).ok_or(Error::Index {
                what: "vocabulary",
                index: id as usize,
                size: self.len(),
            })?;
            if !self.is_special(id) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }
}
