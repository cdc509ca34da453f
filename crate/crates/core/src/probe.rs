//! Language-identification probes over selection coefficients.
//!
//! Per layer, a logistic-regression probe is trained over all detectors. Each
//! detector then gets two accuracies, both binned into cumulative brackets:
//! that of its own best threshold classifier, and that of its signed
//! contribution to the layer probe's logit.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Language;
use crate::instrument::Dump;
use crate::par::{self, Execution};
use crate::tensor::{dot, splitmix64, Rng};

pub const DEFAULT_THRESHOLDS: [f64; 6] = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95];
/// Share of pairs (in percent) assigned to the train split.
pub const TRAIN_PERCENT: u64 = 80;
const CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("layer {layer}: split with seed {seed} leaves a class missing from the {side} side; try another probe seed")]
    Split { layer: usize, seed: u64, side: &'static str },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("probe training diverged at epoch {epoch}: loss is {loss}")]
    Training { epoch: usize, loss: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub l2: f64,
    pub epochs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { l2: 1e-3, epochs: 500 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub layer: usize,
    pub n_detectors: usize,
    /// Standardized features, row-major.
    pub features: Vec<f64>,
    pub labels: Vec<Language>,
    pub pair_ids: Vec<u64>,
    pub is_train: Vec<bool>,
}

/// Whether `pair_id` lands on the train side for `seed`.
pub fn in_train_split(pair_id: u64, seed: u64) -> bool {
    splitmix64(seed ^ splitmix64(pair_id)) % 100 < TRAIN_PERCENT
}

impl ProbeDataset {
    /// Builds a dataset from raw rows, standardizing with train statistics.
    pub fn from_raw(
        layer: usize,
        n_detectors: usize,
        raw: &[f64],
        labels: Vec<Language>,
        pair_ids: Vec<u64>,
        seed: u64,
    ) -> Result<Self, ProbeError> {
        let n = labels.len();
        if n_detectors == 0 || raw.len() != n * n_detectors || pair_ids.len() != n {
            return Err(ProbeError::Argument("feature matrix does not match labels".into()));
        }
        let is_train: Vec<bool> = pair_ids.iter().map(|&p| in_train_split(p, seed)).collect();
        for (side, want) in [("train", true), ("test", false)] {
            for lang in [Language::LangA, Language::LangB] {
                if !labels.iter().zip(&is_train).any(|(&l, &t)| l == lang && t == want) {
                    return Err(ProbeError::Split { layer, seed, side });
                }
            }
        }
        let n_train = is_train.iter().filter(|&&t| t).count() as f64;
        let mut mean = vec![0.0; n_detectors];
        for (row, _) in raw.chunks(n_detectors).zip(&is_train).filter(|(_, &t)| t) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n_train);
        let mut var = vec![0.0; n_detectors];
        for (row, _) in raw.chunks(n_detectors).zip(&is_train).filter(|(_, &t)| t) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale: Vec<f64> = var
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / n_train).sqrt();
                if sd > 1e-12 * (1.0 + m.abs()) {
                    1.0 / sd
                } else {
                    0.0
                }
            })
            .collect();
        let features = raw
            .chunks(n_detectors)
            .flat_map(|row| {
                row.iter()
                    .zip(&mean)
                    .zip(&scale)
                    .map(|((v, m), s)| if *s == 0.0 { 0.0 } else { (v - m) * s })
                    .collect::<Vec<_>>()
            })
            .collect();
        Ok(Self {
            layer,
            n_detectors,
            features,
            labels,
            pair_ids,
            is_train,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_detectors..(i + 1) * self.n_detectors]
    }

    pub fn train_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_train[i]).collect()
    }

    pub fn test_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_train[i]).collect()
    }

    /// Same features and split with the labels randomly permuted.
    pub fn shuffle_labels(&self, seed: u64) -> Self {
        let mut labels = self.labels.clone();
        Rng::new(seed).shuffle(&mut labels);
        Self { labels, ..self.clone() }
    }

    pub fn with_labels_swapped(&self) -> Self {
        Self {
            labels: self.labels.iter().map(|l| l.other()).collect(),
            ..self.clone()
        }
    }
}

pub fn build_probe_dataset(dump: &Dump, layer: usize, seed: u64) -> Result<ProbeDataset, ProbeError> {
    let m = dump
        .layers
        .get(layer)
        .ok_or_else(|| ProbeError::Argument(format!("layer {layer} not in dump")))?;
    let raw: Vec<f64> = m.values.iter().map(|&v| f64::from(v)).collect();
    let labels = m.row_index.iter().map(|r| r.language).collect();
    let pair_ids = m.row_index.iter().map(|r| r.pair_id).collect();
    ProbeDataset::from_raw(layer, m.n_detectors, &raw, labels, pair_ids, seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub test_accuracy: f64,
}

impl LayerProbe {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias + dot(x, &self.weights)
    }

    pub fn predict(&self, x: &[f64]) -> Language {
        if self.logit(x) > 0.0 {
            Language::LangA
        } else {
            Language::LangB
        }
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn target(l: Language) -> f64 {
    match l {
        Language::LangA => 1.0,
        Language::LangB => 0.0,
    }
}

/// Full-batch gradient descent on the L2-penalized mean logistic loss.
///
/// The step is `1 / L` with `L = 0.25 * c + l2`, where `c` counts the
/// non-constant feature columns; this bounds the curvature of the loss on
/// standardized features.
pub fn train_layer_probe(
    ds: &ProbeDataset,
    config: &ProbeConfig,
    exec: Execution,
) -> Result<LayerProbe, ProbeError> {
    let m = ds.n_detectors;
    let train = ds.train_indices();
    let n = train.len() as f64;
    let live = (0..m)
        .filter(|&j| train.iter().any(|&i| ds.row(i)[j] != 0.0))
        .count()
        .max(1);
    let step = 1.0 / (0.25 * live as f64 + config.l2);
    let chunks: Vec<&[usize]> = train.chunks(CHUNK).collect();
    let mut w = vec![0.0; m];
    let mut b = 0.0;
    for epoch in 0..config.epochs {
        let partial = par::map(exec, &chunks, |rows| {
            let mut g = vec![0.0; m];
            let (mut gb, mut loss) = (0.0, 0.0);
            for &i in *rows {
                let x = ds.row(i);
                let z = b + dot(x, &w);
                let y = target(ds.labels[i]);
                loss += softplus(z) - y * z;
                let r = sigmoid(z) - y;
                gb += r;
                for (gj, xj) in g.iter_mut().zip(x) {
                    *gj += r * xj;
                }
            }
            (g, gb, loss)
        });
        let mut g = vec![0.0; m];
        let (mut gb, mut loss) = (0.0, 0.0);
        for (pg, pb, pl) in partial {
            for (a, c) in g.iter_mut().zip(&pg) {
                *a += c;
            }
            gb += pb;
            loss += pl;
        }
        let loss = loss / n + 0.5 * config.l2 * w.iter().map(|v| v * v).sum::<f64>();
        if !loss.is_finite() {
            return Err(ProbeError::Training { epoch, loss });
        }
        for (wj, gj) in w.iter_mut().zip(&g) {
            *wj -= step * (gj / n + config.l2 * *wj);
        }
        b -= step * gb / n;
    }
    let mut probe = LayerProbe {
        weights: w,
        bias: b,
        test_accuracy: 0.0,
    };
    let test = ds.test_indices();
    let correct = test.iter().filter(|&&i| probe.predict(ds.row(i)) == ds.labels[i]).count();
    probe.test_accuracy = correct as f64 / test.len() as f64;
    Ok(probe)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    /// `value > threshold` predicts language A.
    Above,
    /// `value < threshold` predicts language A.
    Below,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdClassifier {
    pub threshold: f64,
    pub polarity: Polarity,
}

impl ThresholdClassifier {
    pub fn predict(&self, v: f64) -> Language {
        let a = match self.polarity {
            Polarity::Above => v > self.threshold,
            Polarity::Below => v < self.threshold,
        };
        if a {
            Language::LangA
        } else {
            Language::LangB
        }
    }
}

/// Best threshold classifier on `(value, label)` training pairs.
///
/// Candidates are `-inf` and the midpoints between consecutive distinct
/// sorted values, each with both polarities. Ties go to the smaller
/// threshold, then to `Above`.
pub fn fit_threshold(train: &[(f64, Language)]) -> ThresholdClassifier {
    let mut sorted = train.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total_a = sorted.iter().filter(|(_, l)| *l == Language::LangA).count();
    let total_b = sorted.len() - total_a;
    // Everything at or below the candidate threshold is the "prefix".
    let (mut pre_a, mut pre_b) = (0usize, 0usize);
    let mut best = ThresholdClassifier {
        threshold: f64::NEG_INFINITY,
        polarity: Polarity::Above,
    };
    let mut best_correct = total_a;
    if total_b > best_correct {
        best_correct = total_b;
        best.polarity = Polarity::Below;
    }
    for i in 0..sorted.len() {
        match sorted[i].1 {
            Language::LangA => pre_a += 1,
            Language::LangB => pre_b += 1,
        }
        let Some(next) = sorted.get(i + 1) else { break };
        if next.0 == sorted[i].0 {
            continue;
        }
        let t = 0.5 * (sorted[i].0 + next.0);
        let above = (total_a - pre_a) + pre_b;
        let below = pre_a + (total_b - pre_b);
        if above > best_correct {
            best_correct = above;
            best = ThresholdClassifier { threshold: t, polarity: Polarity::Above };
        }
        if below > best_correct {
            best_correct = below;
            best = ThresholdClassifier { threshold: t, polarity: Polarity::Below };
        }
    }
    best
}

/// Test accuracy of the best train-split threshold classifier per detector.
pub fn per_detector_accuracy(ds: &ProbeDataset, exec: Execution) -> Vec<f64> {
    let train = ds.train_indices();
    let test = ds.test_indices();
    par::map_range(exec, ds.n_detectors, |j| {
        let pairs: Vec<(f64, Language)> = train.iter().map(|&i| (ds.row(i)[j], ds.labels[i])).collect();
        let clf = fit_threshold(&pairs);
        let correct = test
            .iter()
            .filter(|&&i| clf.predict(ds.row(i)[j]) == ds.labels[i])
            .count();
        correct as f64 / test.len() as f64
    })
}

/// Test accuracy per detector of the rule "language A iff `w_j * x_j > 0`",
/// i.e. the sign of the detector's term in the layer probe's logit.
pub fn attribution_accuracy(probe: &LayerProbe, ds: &ProbeDataset) -> Vec<f64> {
    let test = ds.test_indices();
    (0..ds.n_detectors)
        .map(|j| {
            let w = probe.weights[j];
            let correct = test
                .iter()
                .filter(|&&i| (w * ds.row(i)[j] > 0.0) == (ds.labels[i] == Language::LangA))
                .count();
            correct as f64 / test.len() as f64
        })
        .collect()
}

/// Number of accuracies at or above each threshold.
pub fn bracket_counts(accuracies: &[f64], thresholds: &[f64]) -> Result<Vec<(f64, usize)>, ProbeError> {
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ProbeError::Argument(
            "thresholds must be strictly increasing".into(),
        ));
    }
    Ok(thresholds
        .iter()
        .map(|&t| (t, accuracies.iter().filter(|&&a| a >= t).count()))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub layer: usize,
    pub full_probe_accuracy: f64,
    /// Threshold-classifier accuracy per detector.
    pub detector_accuracies: Vec<f64>,
    pub bracket_counts: Vec<(f64, usize)>,
    /// Accuracy per detector of its term in the layer probe.
    pub attribution_accuracies: Vec<f64>,
    pub attribution_bracket_counts: Vec<(f64, usize)>,
}

impl ProbeReport {
    pub fn max_detector_accuracy(&self) -> f64 {
        self.detector_accuracies.iter().copied().fold(0.0, f64::max)
    }
}

pub fn probe_layer(
    ds: &ProbeDataset,
    config: &ProbeConfig,
    thresholds: &[f64],
    exec: Execution,
) -> Result<ProbeReport, ProbeError> {
    let probe = train_layer_probe(ds, config, exec)?;
    let detector_accuracies = per_detector_accuracy(ds, exec);
    let attribution_accuracies = attribution_accuracy(&probe, ds);
    Ok(ProbeReport {
        layer: ds.layer,
        full_probe_accuracy: probe.test_accuracy,
        bracket_counts: bracket_counts(&detector_accuracies, thresholds)?,
        attribution_bracket_counts: bracket_counts(&attribution_accuracies, thresholds)?,
        detector_accuracies,
        attribution_accuracies,
    })
}

/// Probes every layer of `dump`, in layer order.
pub fn probe_all_layers(
    dump: &Dump,
    seed: u64,
    config: &ProbeConfig,
    thresholds: &[f64],
    exec: Execution,
) -> Result<Vec<ProbeReport>, ProbeError> {
    bracket_counts(&[], thresholds)?;
    par::map_range(exec, dump.layers.len(), |layer| {
        let ds = build_probe_dataset(dump, layer, seed)?;
        probe_layer(&ds, config, thresholds, exec)
    })
    .into_iter()
    .collect()
}

pub fn write_accuracy_csv(reports: &[ProbeReport], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "layer,full_probe_accuracy,max_detector_accuracy")?;
    for r in reports {
        writeln!(w, "{},{:.6},{:.6}", r.layer, r.full_probe_accuracy, r.max_detector_accuracy())?;
    }
    Ok(())
}

fn write_counts(
    reports: &[ProbeReport],
    counts: impl Fn(&ProbeReport) -> &[(f64, usize)],
    mut w: impl Write,
) -> std::io::Result<()> {
    writeln!(w, "layer,threshold,count")?;
    for r in reports {
        for (t, c) in counts(r) {
            writeln!(w, "{},{t:.2},{c}", r.layer)?;
        }
    }
    Ok(())
}

/// Threshold-classifier bracket counts.
pub fn write_brackets_csv(reports: &[ProbeReport], w: impl Write) -> std::io::Result<()> {
    write_counts(reports, |r| &r.bracket_counts, w)
}

/// Layer-probe attribution bracket counts, in the same layout.
pub fn write_attribution_brackets_csv(reports: &[ProbeReport], w: impl Write) -> std::io::Result<()> {
    write_counts(reports, |r| &r.attribution_bracket_counts, w)
}
