//! Parallel corpus ingestion, length filtering, sampling and prefix generation.

pub mod bpe;
pub mod toy;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Rng;
pub use bpe::Vocabulary;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("corpus contains no sentence pairs")]
    Empty,
    #[error("invalid corpus configuration: {0}")]
    Config(String),
    #[error("only {survivors} pairs survive the length filter but {requested} were requested")]
    InsufficientData { survivors: usize, requested: usize },
    #[error("vocabulary file: {0}")]
    Vocab(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Language {
    LangA,
    LangB,
}

impl Language {
    pub fn code(self) -> u8 {
        match self {
            Language::LangA => 0,
            Language::LangB => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Language::LangA),
            1 => Some(Language::LangB),
            _ => None,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Language::LangA => Language::LangB,
            Language::LangB => Language::LangA,
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Language::LangA => "a",
            Language::LangB => "b",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelPair {
    pub lang_a_text: String,
    pub lang_b_text: String,
    pub pair_id: u64,
}

impl ParallelPair {
    pub fn text(&self, lang: Language) -> &str {
        match lang {
            Language::LangA => &self.lang_a_text,
            Language::LangB => &self.lang_b_text,
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            lang_a_text: self.lang_b_text.clone(),
            lang_b_text: self.lang_a_text.clone(),
            pair_id: self.pair_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    #[default]
    Tsv,
}

/// One incremental prefix of one side of a pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixRecord {
    pub pair_id: u64,
    pub language: Language,
    /// Number of subwords, excluding BOS.
    pub prefix_len: usize,
    pub token_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    /// Inclusive bounds on subword count per side.
    pub min_len: usize,
    pub max_len: usize,
    pub sample_size: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            min_len: 20,
            max_len: 50,
            sample_size: 500,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(CorpusError::Config(format!(
                "need 1 <= min_len <= max_len, got {}..={}",
                self.min_len, self.max_len
            )));
        }
        if self.sample_size == 0 {
            return Err(CorpusError::Config("sample_size must be positive".into()));
        }
        Ok(())
    }
}

/// Parses `lang_a<TAB>lang_b` lines. CRLF and LF endings are equivalent.
pub fn parse_corpus(text: &str) -> Result<Vec<ParallelPair>, CorpusError> {
    let mut pairs = Vec::new();
    let body = text.strip_suffix('\n').unwrap_or(text);
    if body.is_empty() {
        return Err(CorpusError::Empty);
    }
    for (i, raw) in body.split('\n').enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        let parse = |reason: &str| CorpusError::Parse {
            line: i + 1,
            reason: reason.to_string(),
        };
        let mut cols = line.split('\t');
        let (Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(parse("expected exactly one tab"));
        };
        if a.is_empty() || b.is_empty() {
            return Err(parse("empty side"));
        }
        pairs.push(ParallelPair {
            lang_a_text: a.to_string(),
            lang_b_text: b.to_string(),
            pair_id: pairs.len() as u64,
        });
    }
    Ok(pairs)
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<ParallelPair>, CorpusError> {
    match format {
        CorpusFormat::Tsv => {
            let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
                path: path.to_path_buf(),
                source,
            })?;
            parse_corpus(&text)
        }
    }
}

/// Writes sampled pairs as `pair_id<TAB>lang_a<TAB>lang_b` lines.
pub fn write_sample_tsv(pairs: &[ParallelPair], mut w: impl Write) -> std::io::Result<()> {
    for p in pairs {
        writeln!(w, "{}\t{}\t{}", p.pair_id, p.lang_a_text, p.lang_b_text)?;
    }
    Ok(())
}

pub fn read_sample_tsv(text: &str) -> Result<Vec<ParallelPair>, CorpusError> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let parse = |reason: &str| CorpusError::Parse {
                line: i + 1,
                reason: reason.to_string(),
            };
            let mut cols = line.split('\t');
            let (Some(id), Some(a), Some(b), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
                return Err(parse("expected id<TAB>lang_a<TAB>lang_b"));
            };
            Ok(ParallelPair {
                pair_id: id.parse().map_err(|_| parse("bad pair id"))?,
                lang_a_text: a.to_string(),
                lang_b_text: b.to_string(),
            })
        })
        .collect()
}

/// Keeps pairs whose two sides both tokenise to `[min_len, max_len]` subwords,
/// then draws `sample_size` of them uniformly without replacement. Output is
/// ordered by `pair_id`.
pub fn filter_and_sample(
    pairs: &[ParallelPair],
    vocab: &Vocabulary,
    config: &CorpusConfig,
) -> Result<Vec<ParallelPair>, CorpusError> {
    config.validate()?;
    let range = config.min_len..=config.max_len;
    let survivors: Vec<&ParallelPair> = pairs
        .iter()
        .filter(|p| {
            range.contains(&vocab.encode(&p.lang_a_text).len())
                && range.contains(&vocab.encode(&p.lang_b_text).len())
        })
        .collect();
    if survivors.len() < config.sample_size {
        return Err(CorpusError::InsufficientData {
            survivors: survivors.len(),
            requested: config.sample_size,
        });
    }
    let mut rng = Rng::new(config.seed);
    let mut picked = index::sample(rng.inner_mut(), survivors.len(), config.sample_size).into_vec();
    picked.sort_unstable();
    let mut out: Vec<ParallelPair> = picked.into_iter().map(|i| survivors[i].clone()).collect();
    out.sort_by_key(|p| p.pair_id);
    Ok(out)
}

/// All prefixes of both sides, language A first, shortest first.
pub fn make_prefixes(pair: &ParallelPair, vocab: &Vocabulary, with_bos: bool) -> Vec<PrefixRecord> {
    let mut out = Vec::new();
    for lang in [Language::LangA, Language::LangB] {
        let ids = vocab.encode(pair.text(lang));
        for n in 1..=ids.len() {
            let mut token_ids = Vec::with_capacity(n + 1);
            if with_bos {
                token_ids.push(bpe::BOS);
            }
            token_ids.extend_from_slice(&ids[..n]);
            out.push(PrefixRecord {
                pair_id: pair.pair_id,
                language: lang,
                prefix_len: n,
                token_ids,
            });
        }
    }
    out
}
