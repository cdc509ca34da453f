mod common;

use ffn_lens::corpus::Language;
use ffn_lens::par::Execution;
use ffn_lens::probe::{
    bracket_counts, build_probe_dataset, fit_threshold, per_detector_accuracy, probe_all_layers, write_accuracy_csv,
    write_brackets_csv, Polarity, ProbeConfig, ProbeDataset, ThresholdClassifier, DEFAULT_THRESHOLDS,
};
use ffn_lens::tensor::Rng;

#[test]
fn perfect_detector_and_shuffled_labels() {
    common::probe_sanity().unwrap();
}

fn correct(c: &ThresholdClassifier, data: &[(f64, Language)]) -> usize {
    data.iter().filter(|(v, l)| c.predict(*v) == *l).count()
}

/// Scans every candidate threshold and polarity, counting each from scratch.
fn threshold_oracle(data: &[(f64, Language)]) -> ThresholdClassifier {
    let mut values: Vec<f64> = data.iter().map(|p| p.0).collect();
    values.sort_by(f64::total_cmp);
    values.dedup();
    let mut candidates = vec![f64::NEG_INFINITY];
    candidates.extend(values.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    let mut best: Option<(usize, ThresholdClassifier)> = None;
    for &threshold in &candidates {
        for polarity in [Polarity::Above, Polarity::Below] {
            let c = ThresholdClassifier { threshold, polarity };
            let n = correct(&c, data);
            if best.is_none_or(|(b, _)| n > b) {
                best = Some((n, c));
            }
        }
    }
    best.unwrap().1
}

fn noisy_dataset(seed: u64, n_pairs: usize, m: usize) -> ProbeDataset {
    let mut rng = Rng::new(seed);
    let shift: Vec<f64> = (0..m).map(|_| rng.normal() * 0.5).collect();
    let mut raw = Vec::new();
    let mut labels = Vec::new();
    let mut pair_ids = Vec::new();
    for p in 0..n_pairs {
        for lang in [Language::LangA, Language::LangB] {
            let s = if lang == Language::LangA { 1.0 } else { -1.0 };
            for &sh in &shift {
                // Coarse grid so that tied values occur.
                raw.push(((rng.normal() + s * sh) * 4.0).round() / 4.0);
            }
            labels.push(lang);
            pair_ids.push(p as u64);
        }
    }
    ProbeDataset::from_raw(0, m, &raw, labels, pair_ids, seed).unwrap()
}

#[test]
fn per_detector_accuracy_matches_brute_force_scan() {
    let ds = noisy_dataset(12, 120, 50);
    let acc = per_detector_accuracy(&ds, Execution::default());
    for (j, &got) in acc.iter().enumerate() {
        let column = |idx: Vec<usize>| -> Vec<(f64, Language)> {
            idx.into_iter().map(|i| (ds.row(i)[j], ds.labels[i])).collect()
        };
        let train = column(ds.train_indices());
        let test = column(ds.test_indices());
        let fitted = fit_threshold(&train);
        let oracle = threshold_oracle(&train);
        assert_eq!(fitted, oracle, "detector {j}");
        assert_eq!(got, correct(&oracle, &test) as f64 / test.len() as f64);
    }
}

#[test]
fn brackets_follow_accuracies() {
    let ds = noisy_dataset(13, 200, 40);
    let acc = per_detector_accuracy(&ds, Execution::default());
    let counts = bracket_counts(&acc, &DEFAULT_THRESHOLDS).unwrap();
    for (t, n) in &counts {
        assert_eq!(*n, acc.iter().filter(|&&a| a >= *t).count());
    }
    assert!(counts.windows(2).all(|w| w[0].1 >= w[1].1));
}

#[test]
fn full_probe_is_not_worse_than_best_detector() {
    let (_, dump) = common::slow_and_fast_dumps(50);
    let reports = probe_all_layers(&dump, 3, &ProbeConfig::default(), &DEFAULT_THRESHOLDS, Execution::default()).unwrap();
    for r in &reports {
        assert!(
            r.full_probe_accuracy >= r.max_detector_accuracy() - 0.05,
            "layer {}: {} vs {}",
            r.layer,
            r.full_probe_accuracy,
            r.max_detector_accuracy()
        );
    }
}

#[test]
fn probing_is_deterministic() {
    let (_, dump) = common::slow_and_fast_dumps(10);
    let cfg = ProbeConfig {
        epochs: 50,
        ..ProbeConfig::default()
    };
    let run = |exec| {
        let r = probe_all_layers(&dump, 9, &cfg, &DEFAULT_THRESHOLDS, exec).unwrap();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        write_accuracy_csv(&r, &mut a).unwrap();
        write_brackets_csv(&r, &mut b).unwrap();
        (r, a, b)
    };
    let first = run(Execution::default());
    assert_eq!(first, run(Execution::default()));
    assert_eq!(first, run(Execution::Sequential));
}

#[test]
fn split_keeps_pairs_together() {
    let (_, dump) = common::slow_and_fast_dumps(30);
    let ds = build_probe_dataset(&dump, 0, 4).unwrap();
    for i in 0..ds.len() {
        for j in 0..ds.len() {
            if ds.pair_ids[i] == ds.pair_ids[j] {
                assert_eq!(ds.is_train[i], ds.is_train[j]);
            }
        }
    }
    let other = build_probe_dataset(&dump, 0, 5).unwrap();
    assert_ne!(ds.is_train, other.is_train);
}
