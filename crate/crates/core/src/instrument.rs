//! Selection-coefficient capture and the activation dump format.
//!
//! A dump holds, for every layer, a matrix with one row per prefix and one
//! column per detector. The row for a prefix is the post-GeLU detector vector
//! at the prefix's final token position.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! offset size  field
//! 0      8     magic "FFNDUMP\0"
//! 8      4     format version (u32) = 1
//! 12     32    model hash (SHA-256 of the checkpoint bytes)
//! 44     32    vocabulary hash (SHA-256 of the vocabulary file)
//! 76     4     n_layers (u32)
//! 80     4     n_detectors (u32)
//! 84     8     n_prefixes (u64)
//! 92     1     position policy: 0 = final token
//! 93     1     BOS policy: 0 = none, 1 = BOS prepended
//! 94     2     reserved, zero
//! 96     13*n  row index: pair_id (u64), language (u8: 0 = A, 1 = B), prefix_len (u32)
//! ...    4*L*n*m  coefficients as f32, layer-major, then row-major
//! ```
//!
//! External extractors can write this format directly with all-zero hashes;
//! readers only enforce hashes when asked to.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use thiserror::Error;

use crate::corpus::{Language, PrefixRecord};
use crate::model::{ModelError, TransformerModel};
use crate::par::{self, Execution};

pub const DUMP_MAGIC: &[u8; 8] = b"FFNDUMP\0";
pub const DUMP_VERSION: u32 = 1;
const HEADER_LEN: usize = 96;
const ROW_LEN: usize = 13;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt dump: {0}")]
    Corrupt(String),
    #[error("unsupported dump version {found} (reader supports {DUMP_VERSION})")]
    Version { found: u32 },
    #[error("dump refused: {0}")]
    Binding(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionPolicy {
    /// Activations at the final token of each prefix.
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BosPolicy {
    None,
    Prepended,
}

/// How rows are produced: one forward per prefix, or one per sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptureMode {
    PerPrefix,
    PerSentence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DumpHeader {
    pub version: u32,
    pub model_hash: [u8; 32],
    pub vocab_hash: [u8; 32],
    pub n_layers: usize,
    pub n_detectors: usize,
    pub n_prefixes: usize,
    pub position_policy: PositionPolicy,
    pub bos_policy: BosPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RowKey {
    pub pair_id: u64,
    pub language: Language,
    pub prefix_len: usize,
}

/// Coefficients of one layer: `n_prefixes x n_detectors`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionMatrix {
    pub layer: usize,
    pub n_detectors: usize,
    pub row_index: Arc<Vec<RowKey>>,
    pub values: Vec<f32>,
}

impl SelectionMatrix {
    pub fn n_prefixes(&self) -> usize {
        self.row_index.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.n_detectors..(i + 1) * self.n_detectors]
    }

    pub fn rows(&self) -> impl Iterator<Item = (&RowKey, &[f32])> {
        self.row_index.iter().zip(self.values.chunks(self.n_detectors))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dump {
    pub header: DumpHeader,
    pub layers: Vec<SelectionMatrix>,
}

/// Hashes a reader checks before accepting a dump.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Binding {
    pub model_hash: [u8; 32],
    pub vocab_hash: [u8; 32],
}

impl Dump {
    /// Assembles a dump from per-layer row vectors sharing one row index.
    pub fn from_rows(
        header: DumpHeader,
        row_index: Vec<RowKey>,
        layers: Vec<Vec<f32>>,
    ) -> Result<Self, DumpError> {
        let rows = Arc::new(row_index);
        if layers.len() != header.n_layers || rows.len() != header.n_prefixes {
            return Err(DumpError::Argument("header counts differ from data".into()));
        }
        let layers = layers
            .into_iter()
            .enumerate()
            .map(|(layer, values)| {
                if values.len() != rows.len() * header.n_detectors {
                    return Err(DumpError::Argument(format!("layer {layer} has the wrong size")));
                }
                Ok(SelectionMatrix {
                    layer,
                    n_detectors: header.n_detectors,
                    row_index: Arc::clone(&rows),
                    values,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { header, layers })
    }

    pub fn row_index(&self) -> &[RowKey] {
        self.layers.first().map_or(&[], |l| l.row_index.as_slice())
    }

    pub fn has_language(&self, lang: Language) -> bool {
        self.row_index().iter().any(|r| r.language == lang)
    }

    /// Same coefficients with the two language labels exchanged.
    pub fn with_languages_swapped(&self) -> Self {
        let rows: Vec<RowKey> = self
            .row_index()
            .iter()
            .map(|r| RowKey {
                language: r.language.other(),
                ..*r
            })
            .collect();
        let rows = Arc::new(rows);
        Self {
            header: self.header.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| SelectionMatrix {
                    row_index: Arc::clone(&rows),
                    ..l.clone()
                })
                .collect(),
        }
    }
}

/// Indices of the `k` largest values, descending; ties go to the lower index.
pub fn top_k(row: &[f32], k: usize) -> Result<Vec<usize>, DumpError> {
    if k == 0 || k > row.len() {
        return Err(DumpError::Argument(format!("k = {k} outside 1..={}", row.len())));
    }
    let cmp = |a: &usize, b: &usize| {
        row[*b]
            .partial_cmp(&row[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    Ok(idx)
}

fn row_position(bos: bool, prefix_len: usize) -> usize {
    if bos {
        prefix_len
    } else {
        prefix_len - 1
    }
}

/// Runs the prefix protocol over `prefixes` and returns one matrix per layer.
///
/// Rows are ordered by `(pair_id, language, prefix_len)`. Prefixes longer than
/// the model context are skipped with a warning.
pub fn capture(
    model: &TransformerModel,
    prefixes: &[PrefixRecord],
    mode: CaptureMode,
    binding: Binding,
    exec: Execution,
) -> Result<Dump, DumpError> {
    if prefixes.is_empty() {
        return Err(DumpError::Argument("no prefixes to capture".into()));
    }
    let bos = prefixes[0].token_ids.len() == prefixes[0].prefix_len + 1;
    if prefixes.iter().any(|p| (p.token_ids.len() == p.prefix_len + 1) != bos) {
        return Err(DumpError::Argument("mixed BOS policies among prefixes".into()));
    }
    let max = model.config().max_seq_len;
    let mut sentences: BTreeMap<(u64, Language), Vec<&PrefixRecord>> = BTreeMap::new();
    for p in prefixes {
        if p.token_ids.len() > max {
            log::warn!(
                "skipping prefix (pair {}, {}, len {}): {} tokens exceed max_seq_len {max}",
                p.pair_id,
                p.language,
                p.prefix_len,
                p.token_ids.len()
            );
            continue;
        }
        sentences.entry((p.pair_id, p.language)).or_default().push(p);
    }
    for recs in sentences.values_mut() {
        recs.sort_by_key(|r| r.prefix_len);
    }
    let groups: Vec<Vec<&PrefixRecord>> = sentences.into_values().collect();
    let (n_layers, m) = (model.config().n_layers, model.config().d_ff);

    // Each group yields, per layer, its rows concatenated.
    let per_group = par::map(exec, &groups, |recs| -> Result<Vec<Vec<f32>>, ModelError> {
        let mut out = vec![Vec::with_capacity(recs.len() * m); n_layers];
        match mode {
            CaptureMode::PerSentence => {
                let longest = recs.last().expect("group is non-empty");
                let trace = model.selection_trace(&longest.token_ids)?;
                for r in recs {
                    let pos = row_position(bos, r.prefix_len);
                    for (l, sel) in trace.iter().enumerate() {
                        out[l].extend(sel[pos * m..(pos + 1) * m].iter().map(|&v| v as f32));
                    }
                }
            }
            CaptureMode::PerPrefix => {
                for r in recs {
                    let trace = model.selection_trace(&r.token_ids)?;
                    let pos = r.token_ids.len() - 1;
                    for (l, sel) in trace.iter().enumerate() {
                        out[l].extend(sel[pos * m..(pos + 1) * m].iter().map(|&v| v as f32));
                    }
                }
            }
        }
        Ok(out)
    });

    let mut row_index = Vec::new();
    let mut layers: Vec<Vec<f32>> = vec![Vec::new(); n_layers];
    for (recs, rows) in groups.iter().zip(per_group) {
        let rows = rows?;
        row_index.extend(recs.iter().map(|r| RowKey {
            pair_id: r.pair_id,
            language: r.language,
            prefix_len: r.prefix_len,
        }));
        for (dst, src) in layers.iter_mut().zip(rows) {
            dst.extend(src);
        }
    }
    let header = DumpHeader {
        version: DUMP_VERSION,
        model_hash: binding.model_hash,
        vocab_hash: binding.vocab_hash,
        n_layers,
        n_detectors: m,
        n_prefixes: row_index.len(),
        position_policy: PositionPolicy::Last,
        bos_policy: if bos { BosPolicy::Prepended } else { BosPolicy::None },
    };
    Dump::from_rows(header, row_index, layers)
}

pub fn dump_bytes(dump: &Dump) -> Vec<u8> {
    let h = &dump.header;
    let mut out = Vec::with_capacity(HEADER_LEN + ROW_LEN * h.n_prefixes + 4 * h.n_layers * h.n_prefixes * h.n_detectors);
    out.extend_from_slice(DUMP_MAGIC);
    out.extend_from_slice(&h.version.to_le_bytes());
    out.extend_from_slice(&h.model_hash);
    out.extend_from_slice(&h.vocab_hash);
    out.extend_from_slice(&(h.n_layers as u32).to_le_bytes());
    out.extend_from_slice(&(h.n_detectors as u32).to_le_bytes());
    out.extend_from_slice(&(h.n_prefixes as u64).to_le_bytes());
    out.push(match h.position_policy {
        PositionPolicy::Last => 0,
    });
    out.push(match h.bos_policy {
        BosPolicy::None => 0,
        BosPolicy::Prepended => 1,
    });
    out.extend_from_slice(&[0, 0]);
    for r in dump.row_index() {
        out.extend_from_slice(&r.pair_id.to_le_bytes());
        out.push(r.language.code());
        out.extend_from_slice(&(r.prefix_len as u32).to_le_bytes());
    }
    for layer in &dump.layers {
        for v in &layer.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_dump(dump: &Dump, path: &Path) -> Result<(), DumpError> {
    let io = |source| DumpError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, dump_bytes(dump)).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn parse_dump(bytes: &[u8], expect: Option<&Binding>) -> Result<Dump, DumpError> {
    let corrupt = |m: String| DumpError::Corrupt(m);
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..8] != DUMP_MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != DUMP_VERSION {
        return Err(DumpError::Version { found: version });
    }
    let model_hash: [u8; 32] = bytes[12..44].try_into().unwrap();
    let vocab_hash: [u8; 32] = bytes[44..76].try_into().unwrap();
    if let Some(b) = expect {
        if b.model_hash != model_hash {
            return Err(DumpError::Binding(format!(
                "model hash {} differs from the checkpoint in use ({})",
                hex(&model_hash),
                hex(&b.model_hash)
            )));
        }
        if b.vocab_hash != vocab_hash {
            return Err(DumpError::Binding(format!(
                "vocabulary hash {} differs from the vocabulary in use ({})",
                hex(&vocab_hash),
                hex(&b.vocab_hash)
            )));
        }
    }
    let n_layers = u32_at(76) as usize;
    let n_detectors = u32_at(80) as usize;
    let n_prefixes = u64::from_le_bytes(bytes[84..92].try_into().unwrap()) as usize;
    let position_policy = match bytes[92] {
        0 => PositionPolicy::Last,
        p => return Err(corrupt(format!("unknown position policy {p}"))),
    };
    let bos_policy = match bytes[93] {
        0 => BosPolicy::None,
        1 => BosPolicy::Prepended,
        p => return Err(corrupt(format!("unknown BOS policy {p}"))),
    };
    if n_layers == 0 || n_detectors == 0 {
        return Err(corrupt("zero layers or detectors".into()));
    }
    let expected_len = n_prefixes
        .checked_mul(ROW_LEN + 4 * n_layers * n_detectors)
        .and_then(|v| v.checked_add(HEADER_LEN));
    if expected_len != Some(bytes.len()) {
        return Err(corrupt(format!(
            "header promises {n_layers} layers x {n_prefixes} prefixes x {n_detectors} detectors, file has {} bytes",
            bytes.len()
        )));
    }
    let mut row_index = Vec::with_capacity(n_prefixes);
    for i in 0..n_prefixes {
        let o = HEADER_LEN + i * ROW_LEN;
        let language = Language::from_code(bytes[o + 8])
            .ok_or_else(|| corrupt(format!("row {i}: unknown language code {}", bytes[o + 8])))?;
        row_index.push(RowKey {
            pair_id: u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()),
            language,
            prefix_len: u32_at(o + 9) as usize,
        });
    }
    let body = &bytes[HEADER_LEN + n_prefixes * ROW_LEN..];
    let per_layer = n_prefixes * n_detectors;
    let layers: Vec<Vec<f32>> = (0..n_layers)
        .map(|l| {
            body[l * per_layer * 4..(l + 1) * per_layer * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        })
        .collect();
    if layers.iter().flatten().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite coefficient".into()));
    }
    let header = DumpHeader {
        version,
        model_hash,
        vocab_hash,
        n_layers,
        n_detectors,
        n_prefixes,
        position_policy,
        bos_policy,
    };
    Dump::from_rows(header, row_index, layers)
}

pub fn read_dump(path: &Path, expect: Option<&Binding>) -> Result<Dump, DumpError> {
    let bytes = std::fs::read(path).map_err(|source| DumpError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dump(&bytes, expect)
}

/// One layer in the table layout: `language,pair_id,prefix_len,d0,d1,...`.
pub fn write_layer_csv(matrix: &SelectionMatrix, mut w: impl Write) -> std::io::Result<()> {
    let mut header = String::from("language,pair_id,prefix_len");
    for d in 0..matrix.n_detectors {
        let _ = write!(header, ",d{d}");
    }
    writeln!(w, "{header}")?;
    for (key, row) in matrix.rows() {
        let mut line = format!("{},{},{}", key.language, key.pair_id, key.prefix_len);
        for v in row {
            let _ = write!(line, ",{v}");
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}
