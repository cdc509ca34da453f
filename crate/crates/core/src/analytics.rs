//! Per-layer top-k detector sets and their cross-language algebra.

use std::collections::BTreeSet;
use std::io::Write;

use thiserror::Error;

use crate::corpus::Language;
use crate::instrument::{top_k, Dump, DumpError, SelectionMatrix};
use crate::par::{self, Execution};

pub const DEFAULT_K_VALUES: [usize; 2] = [10, 100];

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("no {0} prefixes in the dump")]
    MissingLanguage(Language),
    #[error(transparent)]
    Dump(#[from] DumpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LanguageFilter {
    LangA,
    LangB,
    Both,
}

impl LanguageFilter {
    fn admits(self, lang: Language) -> bool {
        match self {
            Self::LangA => lang == Language::LangA,
            Self::LangB => lang == Language::LangB,
            Self::Both => true,
        }
    }
}

impl From<Language> for LanguageFilter {
    fn from(l: Language) -> Self {
        match l {
            Language::LangA => Self::LangA,
            Language::LangB => Self::LangB,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectorSet {
    pub layer: usize,
    pub language: LanguageFilter,
    pub k: usize,
    pub ids: BTreeSet<usize>,
}

impl DetectorSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn contains(&self, id: usize) -> bool {
        self.ids.contains(&id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSetProfile {
    pub layer: usize,
    pub k: usize,
    pub size_lang_a: usize,
    pub size_lang_b: usize,
    pub size_intersection: usize,
    pub size_a_specific: usize,
    pub size_b_specific: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityStats {
    pub layer: usize,
    /// Mean over rows of the fraction of coefficients above zero.
    pub active_fraction: f64,
    /// Mean over rows of the share of positive mass held by the ten largest coefficients.
    pub top10_mass: f64,
}

/// Union of `top_k` over every row of `matrix` whose language passes `language`.
pub fn union_of_rows(
    matrix: &SelectionMatrix,
    language: LanguageFilter,
    k: usize,
) -> Result<DetectorSet, AnalyticsError> {
    let mut ids = BTreeSet::new();
    let mut seen = false;
    for (key, row) in matrix.rows() {
        if language.admits(key.language) {
            seen = true;
            ids.extend(top_k(row, k)?);
        }
    }
    if !seen {
        return Err(match language {
            LanguageFilter::LangA => AnalyticsError::MissingLanguage(Language::LangA),
            LanguageFilter::LangB | LanguageFilter::Both => AnalyticsError::MissingLanguage(Language::LangB),
        });
    }
    Ok(DetectorSet {
        layer: matrix.layer,
        language,
        k,
        ids,
    })
}

pub fn layer_union(
    dump: &Dump,
    layer: usize,
    language: LanguageFilter,
    k: usize,
) -> Result<DetectorSet, AnalyticsError> {
    let matrix = dump
        .layers
        .get(layer)
        .ok_or_else(|| AnalyticsError::Argument(format!("layer {layer} not in dump")))?;
    union_of_rows(matrix, language, k)
}

fn check_compatible(a: &DetectorSet, b: &DetectorSet) -> Result<(), AnalyticsError> {
    if a.layer != b.layer || a.k != b.k {
        return Err(AnalyticsError::Argument(format!(
            "sets from layer {} k {} and layer {} k {} are not comparable",
            a.layer, a.k, b.layer, b.k
        )));
    }
    Ok(())
}

/// Detectors in both sets. The result carries the `Both` filter.
pub fn layer_intersection(a: &DetectorSet, b: &DetectorSet) -> Result<DetectorSet, AnalyticsError> {
    check_compatible(a, b)?;
    Ok(DetectorSet {
        layer: a.layer,
        language: LanguageFilter::Both,
        k: a.k,
        ids: a.ids.intersection(&b.ids).copied().collect(),
    })
}

/// Detectors of `a` absent from `b`. The result keeps `a`'s filter.
pub fn layer_difference(a: &DetectorSet, b: &DetectorSet) -> Result<DetectorSet, AnalyticsError> {
    check_compatible(a, b)?;
    Ok(DetectorSet {
        layer: a.layer,
        language: a.language,
        k: a.k,
        ids: a.ids.difference(&b.ids).copied().collect(),
    })
}

pub fn layer_profile(matrix: &SelectionMatrix, k: usize) -> Result<LayerSetProfile, AnalyticsError> {
    let a = union_of_rows(matrix, LanguageFilter::LangA, k)?;
    let b = union_of_rows(matrix, LanguageFilter::LangB, k)?;
    let both = layer_intersection(&a, &b)?;
    Ok(LayerSetProfile {
        layer: matrix.layer,
        k,
        size_lang_a: a.len(),
        size_lang_b: b.len(),
        size_intersection: both.len(),
        size_a_specific: layer_difference(&a, &b)?.len(),
        size_b_specific: layer_difference(&b, &a)?.len(),
    })
}

/// Profiles every layer for every k, ordered by `(layer, k)`.
pub fn profile_all_layers(
    dump: &Dump,
    k_values: &[usize],
    exec: Execution,
) -> Result<Vec<LayerSetProfile>, AnalyticsError> {
    for lang in [Language::LangA, Language::LangB] {
        if !dump.has_language(lang) {
            return Err(AnalyticsError::MissingLanguage(lang));
        }
    }
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let per_layer = par::map(exec, &dump.layers, |m| {
        ks.iter().map(|&k| layer_profile(m, k)).collect::<Result<Vec<_>, _>>()
    });
    let mut out = Vec::with_capacity(dump.layers.len() * ks.len());
    for layer in per_layer {
        out.extend(layer?);
    }
    Ok(out)
}

pub fn write_profiles_csv(profiles: &[LayerSetProfile], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "layer,k,size_lang_a,size_lang_b,size_intersection,size_a_specific,size_b_specific")?;
    for p in profiles {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            p.layer, p.k, p.size_lang_a, p.size_lang_b, p.size_intersection, p.size_a_specific, p.size_b_specific
        )?;
    }
    Ok(())
}

fn row_sparsity(row: &[f32]) -> Option<(f64, f64)> {
    let active = row.iter().filter(|&&v| v > 0.0).count() as f64 / row.len() as f64;
    let mut pos: Vec<f64> = row.iter().map(|&v| f64::from(v.max(0.0))).collect();
    let total: f64 = pos.iter().sum();
    if total <= 0.0 {
        return None;
    }
    pos.sort_unstable_by(|a, b| b.total_cmp(a));
    let top: f64 = pos.iter().take(10).sum();
    Some((active, top / total))
}

/// Rows without any positive coefficient have no mass to distribute and are
/// left out of both averages.
pub fn sparsity_stats(dump: &Dump, exec: Execution) -> Vec<SparsityStats> {
    par::map(exec, &dump.layers, |m| {
        let (mut active, mut mass, mut n) = (0.0, 0.0, 0usize);
        for (_, row) in m.rows() {
            if let Some((a, t)) = row_sparsity(row) {
                active += a;
                mass += t;
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        SparsityStats {
            layer: m.layer,
            active_fraction: active / n,
            top10_mass: mass / n,
        }
    })
}

pub fn write_sparsity_csv(stats: &[SparsityStats], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "layer,active_fraction,top10_mass")?;
    for s in stats {
        writeln!(w, "{},{:.6},{:.6}", s.layer, s.active_fraction, s.top10_mass)?;
    }
    Ok(())
}
