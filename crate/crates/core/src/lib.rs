//! Language specificity of feed-forward detectors in a small bilingual
//! causal language model.
//!
//! The crate trains a decoder-only transformer on a parallel corpus, records
//! the post-GeLU activations of the first feed-forward sub-layer ("detectors")
//! for every prefix of every sampled sentence, and analyses them with top-k
//! set algebra and language-identification probes.

pub mod analytics;
pub mod autodiff;
pub mod corpus;
pub mod instrument;
pub mod model;
pub mod optim;
pub mod par;
pub mod pipeline;
pub mod probe;
pub mod svg;
pub mod tensor;

/// File names inside a run directory.
pub mod paths {
    pub const CONFIG: &str = "config.toml";
    pub const VOCAB: &str = "vocab.txt";
    pub const SAMPLE: &str = "sample.tsv";
    pub const MANIFEST: &str = "manifest.json";
    pub const CHECKPOINT: &str = "model.ckpt";
    pub const TRAIN_STATE: &str = "train_state.bin";
    pub const LOSS_CSV: &str = "loss.csv";
    pub const DUMP: &str = "activations.dump";
    pub const SPARSITY_CSV: &str = "sparsity.csv";
    pub const PROBE_ACCURACY_CSV: &str = "probe_accuracy.csv";
    pub const PROBE_BRACKETS_CSV: &str = "probe_brackets.csv";
    pub const PROBE_ATTRIBUTION_CSV: &str = "probe_attribution_brackets.csv";
    pub const PROBE_SVG: &str = "probe_brackets.svg";
    pub const REPORT: &str = "report.md";
    pub const STAMPS_DIR: &str = "stamps";

    pub fn profile_csv(k: usize) -> String {
        format!("layer_sets_k{k}.csv")
    }

    pub fn profile_svg(k: usize) -> String {
        format!("layer_sets_k{k}.svg")
    }
}
