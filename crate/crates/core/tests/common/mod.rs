#![allow(dead_code)]

use std::collections::BTreeSet;

use ffn_lens::corpus::Language;
use ffn_lens::instrument::{BosPolicy, Dump, DumpHeader, PositionPolicy, RowKey, DUMP_VERSION};
use ffn_lens::model::{ModelConfig, TransformerModel};
use ffn_lens::pipeline::RunConfig;
use ffn_lens::tensor::Rng;

pub const EXAMPLE_DETECTORS: usize = 4096;
pub const EXAMPLE_CS: [usize; 5] = [2149, 2149, 3942, 200, 200];
pub const EXAMPLE_EN: [usize; 5] = [2149, 2149, 2149, 3424, 2149];

pub fn header(n_layers: usize, n_detectors: usize, n_prefixes: usize) -> DumpHeader {
    DumpHeader {
        version: DUMP_VERSION,
        model_hash: [0; 32],
        vocab_hash: [0; 32],
        n_layers,
        n_detectors,
        n_prefixes,
        position_policy: PositionPolicy::Last,
        bos_policy: BosPolicy::Prepended,
    }
}

/// One-layer dump whose rows put a single 1.0 at the given detector.
pub fn one_hot_dump(rows: &[(u64, Language, usize)], n_detectors: usize) -> Dump {
    let index: Vec<RowKey> = rows
        .iter()
        .enumerate()
        .map(|(i, &(pair_id, language, _))| RowKey {
            pair_id,
            language,
            prefix_len: i + 1,
        })
        .collect();
    let mut values = vec![0.0f32; rows.len() * n_detectors];
    for (i, &(_, _, d)) in rows.iter().enumerate() {
        values[i * n_detectors + d] = 1.0;
    }
    Dump::from_rows(header(1, n_detectors, rows.len()), index, vec![values]).unwrap()
}

/// Layer-1 top-1 detectors of the worked Czech/English example.
pub fn worked_example_dump() -> Dump {
    let rows: Vec<(u64, Language, usize)> = EXAMPLE_CS
        .iter()
        .map(|&d| (0, Language::LangA, d))
        .chain(EXAMPLE_EN.iter().map(|&d| (0, Language::LangB, d)))
        .collect();
    one_hot_dump(&rows, EXAMPLE_DETECTORS)
}

/// Random dump with coefficients drawn from a coarse grid so that ties occur.
pub fn random_dump(rng: &mut Rng, n_layers: usize, n_detectors: usize, n_rows: usize) -> Dump {
    let index: Vec<RowKey> = (0..n_rows)
        .map(|i| RowKey {
            pair_id: (i / 2) as u64,
            language: if rng.uniform() < 0.5 { Language::LangA } else { Language::LangB },
            prefix_len: i + 1,
        })
        .collect();
    let layers = (0..n_layers)
        .map(|_| {
            (0..n_rows * n_detectors)
                .map(|_| (rng.below(9) as f32 - 3.0) * 0.25)
                .collect()
        })
        .collect();
    Dump::from_rows(header(n_layers, n_detectors, n_rows), index, layers).unwrap()
}

/// Top-k by full sort: value descending, index ascending.
pub fn top_k_oracle(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn union_oracle(dump: &Dump, layer: usize, lang: Language, k: usize) -> BTreeSet<usize> {
    let m = &dump.layers[layer];
    let mut out = BTreeSet::new();
    for i in 0..m.n_prefixes() {
        if m.row_index[i].language == lang {
            for d in top_k_oracle(m.row(i), k) {
                out.insert(d);
            }
        }
    }
    out
}

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 17,
        max_seq_len: 12,
        seed: 11,
    }
}

/// Micro model with parameters scaled up so every path carries gradient.
pub fn micro_model() -> TransformerModel {
    let mut m = TransformerModel::init(micro_config()).unwrap();
    let mut rng = Rng::new(99);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    m
}

/// Largest |gelu(x) - x * Phi(x)| over `n` points in [-10, 10], with Phi
/// taken from statrs' erf.
pub fn gelu_max_error(n: usize) -> f64 {
    let mut rng = Rng::new(2024);
    (0..n)
        .map(|_| {
            let x = rng.uniform() * 20.0 - 10.0;
            let phi = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
            (ffn_lens::tensor::gelu_scalar(x) - x * phi).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest relative error between the analytic gradient of the micro model's
/// loss and a central finite difference, over every parameter element.
pub fn model_gradcheck_max_rel() -> f64 {
    let model = micro_model();
    let ids: Vec<u32> = vec![3, 7, 1, 16, 4, 4, 9, 0, 12];
    let (_, grads) = model.loss_and_grads(&ids).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (pi, g) in grads.iter().enumerate() {
        let g = g.as_ref().expect("every parameter reaches the loss");
        for (ei, &analytic) in g.iter().enumerate() {
            let mut plus = model.clone();
            plus.params_mut()[pi].data_mut()[ei] += h;
            let mut minus = model.clone();
            minus.params_mut()[pi].data_mut()[ei] -= h;
            let numeric = (plus.loss(&ids).unwrap() - minus.loss(&ids).unwrap()) / (2.0 * h);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Whether two coefficient sets agree up to the rounding of f64 results to f32.
pub fn equal_within_f32(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| (x - y).abs() <= f32::EPSILON * x.abs().max(y.abs()) + 1e-12)
}

pub fn capture_model() -> TransformerModel {
    TransformerModel::init(ModelConfig {
        n_layers: 3,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 400,
        max_seq_len: 64,
        seed: 8,
    })
    .unwrap()
}

/// Slow (per-prefix) and fast (per-sentence) captures of `n_pairs` toy pairs,
/// i.e. `2 * n_pairs` sentences.
pub fn slow_and_fast_dumps(n_pairs: usize) -> (Dump, Dump) {
    use ffn_lens::corpus::{make_prefixes, toy, Vocabulary};
    use ffn_lens::instrument::{capture, Binding, CaptureMode};
    use ffn_lens::par::Execution;

    let pairs = toy::generate(n_pairs, 13);
    let vocab = Vocabulary::train(&pairs, 400).unwrap();
    let model = capture_model();
    let prefixes: Vec<_> = pairs.iter().flat_map(|p| make_prefixes(p, &vocab, true)).collect();
    let b = Binding {
        model_hash: model.sha256(),
        vocab_hash: vocab.sha256(),
    };
    let slow = capture(&model, &prefixes, CaptureMode::PerPrefix, b.clone(), Execution::default()).unwrap();
    let fast = capture(&model, &prefixes, CaptureMode::PerSentence, b, Execution::default()).unwrap();
    (slow, fast)
}

/// Checks the worked Czech/English example, returning the first mismatch.
pub fn worked_example_check() -> Result<(), String> {
    use ffn_lens::analytics::{layer_difference, layer_intersection, layer_union, LanguageFilter};

    let dump = worked_example_dump();
    let err = |e: ffn_lens::analytics::AnalyticsError| e.to_string();
    let cs = layer_union(&dump, 0, LanguageFilter::LangA, 1).map_err(err)?;
    let en = layer_union(&dump, 0, LanguageFilter::LangB, 1).map_err(err)?;
    let both = layer_intersection(&cs, &en).map_err(err)?;
    let cs_only = layer_difference(&cs, &en).map_err(err)?;
    let en_only = layer_difference(&en, &cs).map_err(err)?;
    let expect = |name: &str, got: &BTreeSet<usize>, want: &[usize]| {
        let want: BTreeSet<usize> = want.iter().copied().collect();
        if *got == want {
            Ok(())
        } else {
            Err(format!("{name}: got {got:?}, want {want:?}"))
        }
    };
    expect("cs", &cs.ids, &[2149, 3942, 200])?;
    expect("en", &en.ids, &[2149, 3424])?;
    expect("intersection", &both.ids, &[2149])?;
    expect("cs-specific", &cs_only.ids, &[3942, 200])?;
    expect("en-specific", &en_only.ids, &[3424])
}

/// Compares union, intersection, difference and top-k against brute force on
/// `n` random dumps. Returns the first mismatch.
pub fn set_algebra_cases(n: usize, seed: u64) -> Result<(), String> {
    use ffn_lens::analytics::{layer_difference, layer_intersection, layer_union, LanguageFilter};
    use ffn_lens::instrument::top_k;

    let mut rng = Rng::new(seed);
    for case in 0..n {
        let n_det = 2 + rng.below(40);
        let n_rows = 2 + rng.below(30);
        let mut dump = random_dump(&mut rng, 1, n_det, n_rows);
        // Both languages must be present.
        let mut idx = dump.row_index().to_vec();
        idx[0].language = Language::LangA;
        idx[1].language = Language::LangB;
        dump = Dump::from_rows(dump.header.clone(), idx, vec![dump.layers[0].values.clone()]).unwrap();
        let k = 1 + rng.below(n_det);
        let m = &dump.layers[0];
        for i in 0..m.n_prefixes() {
            let got = top_k(m.row(i), k).map_err(|e| e.to_string())?;
            if got != top_k_oracle(m.row(i), k) {
                return Err(format!("case {case}: top-k of row {i}"));
            }
        }
        let ua = union_oracle(&dump, 0, Language::LangA, k);
        let ub = union_oracle(&dump, 0, Language::LangB, k);
        let a = layer_union(&dump, 0, Language::LangA.into(), k).map_err(|e| e.to_string())?;
        let b = layer_union(&dump, 0, Language::LangB.into(), k).map_err(|e| e.to_string())?;
        if a.ids != ua || b.ids != ub {
            return Err(format!("case {case}: union"));
        }
        let inter: BTreeSet<usize> = ua.iter().filter(|d| ub.contains(d)).copied().collect();
        let a_only: BTreeSet<usize> = ua.iter().filter(|d| !ub.contains(d)).copied().collect();
        let b_only: BTreeSet<usize> = ub.iter().filter(|d| !ua.contains(d)).copied().collect();
        if layer_intersection(&a, &b).unwrap().ids != inter {
            return Err(format!("case {case}: intersection"));
        }
        if layer_difference(&a, &b).unwrap().ids != a_only || layer_difference(&b, &a).unwrap().ids != b_only {
            return Err(format!("case {case}: difference"));
        }
        let all = layer_union(&dump, 0, LanguageFilter::Both, k).map_err(|e| e.to_string())?;
        if all.len() != ua.len() + ub.len() - inter.len() {
            return Err(format!("case {case}: inclusion-exclusion"));
        }
        let swapped = dump.with_languages_swapped();
        let sa = layer_union(&swapped, 0, Language::LangA.into(), k).map_err(|e| e.to_string())?;
        let sb = layer_union(&swapped, 0, Language::LangB.into(), k).map_err(|e| e.to_string())?;
        if sa.ids != ub || sb.ids != ua {
            return Err(format!("case {case}: label swap"));
        }
    }
    Ok(())
}

/// 1,000 pairs, one row per language each, over 20 detectors. Detector
/// `PERFECT` reads 1 on LangA rows and 0 on LangB rows; the rest are noise.
pub const PERFECT: usize = 7;

pub fn separable_probe_dataset() -> ffn_lens::probe::ProbeDataset {
    let (n_pairs, m) = (1000, 20);
    let mut rng = Rng::new(31);
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    let mut pair_ids = Vec::new();
    for p in 0..n_pairs {
        for lang in [Language::LangA, Language::LangB] {
            for d in 0..m {
                raw.push(if d == PERFECT {
                    if lang == Language::LangA { 1.0 } else { 0.0 }
                } else {
                    rng.normal()
                });
            }
            labels.push(lang);
            pair_ids.push(p as u64);
        }
    }
    ffn_lens::probe::ProbeDataset::from_raw(0, m, &raw, labels, pair_ids, 5).unwrap()
}

/// Perfect-detector and shuffled-label checks; returns the first violation.
pub fn probe_sanity() -> Result<(), String> {
    use ffn_lens::par::Execution;
    use ffn_lens::probe::{probe_layer, train_layer_probe, ProbeConfig, DEFAULT_THRESHOLDS};

    let ds = separable_probe_dataset();
    let cfg = ProbeConfig::default();
    let r = probe_layer(&ds, &cfg, &DEFAULT_THRESHOLDS, Execution::default()).map_err(|e| e.to_string())?;
    if r.full_probe_accuracy != 1.0 {
        return Err(format!("probe accuracy {}", r.full_probe_accuracy));
    }
    let top = r.bracket_counts.last().unwrap();
    if top.1 != 1 || r.detector_accuracies[PERFECT] != 1.0 {
        return Err(format!("{} detectors at >= {}", top.1, top.0));
    }
    for seed in 0..20 {
        let acc = train_layer_probe(&ds.shuffle_labels(seed), &cfg, Execution::default())
            .map_err(|e| e.to_string())?
            .test_accuracy;
        if !(0.4..=0.6).contains(&acc) {
            return Err(format!("shuffled seed {seed}: accuracy {acc}"));
        }
    }
    Ok(())
}

pub fn write_toy_corpus(dir: &std::path::Path, n_pairs: usize) -> std::path::PathBuf {
    let path = dir.join("corpus.tsv");
    let pairs = ffn_lens::corpus::toy::generate(n_pairs, 1);
    std::fs::write(&path, ffn_lens::corpus::toy::to_tsv(&pairs)).unwrap();
    path
}

/// A pipeline configuration that finishes in a few seconds.
pub fn quick_config(dir: &std::path::Path, corpus: &std::path::Path) -> RunConfig {
    let mut c = RunConfig {
        seed: 3,
        output_dir: dir.to_path_buf(),
        ..RunConfig::default()
    };
    c.corpus.path = corpus.to_path_buf();
    c.corpus.sample_size = 30;
    c.model.n_layers = 3;
    c.model.d_model = 16;
    c.model.n_heads = 2;
    c.model.d_ff = 32;
    c.train.steps = 12;
    c.train.batch_size = 8;
    c.analysis.k_values = vec![2, 5];
    c.probe.epochs = 30;
    c
}
