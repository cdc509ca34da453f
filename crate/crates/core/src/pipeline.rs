//! Run configuration and the pipeline stages.
//!
//! Each stage reads its inputs from the run directory, writes its outputs
//! there, and records a stamp (`stamps/<stage>.json`) with a fingerprint of
//! the configuration it ran under and the SHA-256 of every file it read and
//! wrote. A stage refuses to start unless the stamps of the stages it depends
//! on exist and still describe the files on disk.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::{self, AnalyticsError, LayerSetProfile};
use crate::corpus::{self, CorpusConfig, CorpusError, CorpusFormat, Language, Vocabulary};
use crate::instrument::{self, hex, Binding, CaptureMode, DumpError};
use crate::model::{self, ModelConfig, ModelError, TrainConfig, TransformerModel};
use crate::optim::AdamWConfig;
use crate::paths;
use crate::probe::{self, ProbeConfig, ProbeError, ProbeReport};
use crate::svg::{LineChart, Series};
use crate::tensor::derive_seed;
use crate::par::Execution;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("stage `{stage}` needs `{missing}` to have run first (no stamp in {dir})")]
    MissingStage {
        stage: &'static str,
        missing: &'static str,
        dir: PathBuf,
    },
    #[error("outputs of `{stage}` are stale: {reason}; rerun `{stage}`")]
    Stale { stage: &'static str, reason: String },
    #[error("report needs every stage; missing: {}", .0.join(", "))]
    Incomplete(Vec<&'static str>),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dump(#[from] DumpError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

impl PipelineError {
    /// Whether the failure stems from the user's input or configuration
    /// rather than from a bug or an environment problem.
    pub fn is_user_error(&self) -> bool {
        match self {
            Self::Config(_) | Self::MissingStage { .. } | Self::Stale { .. } | Self::Incomplete(_) => true,
            Self::Corpus(_) => true,
            Self::Model(e) => matches!(e, ModelError::Config(_) | ModelError::ShapeMismatch { .. }),
            Self::Dump(e) => matches!(e, DumpError::Binding(_)),
            Self::Probe(e) => matches!(e, ProbeError::Split { .. } | ProbeError::Argument(_)),
            Self::Analytics(_) | Self::Io { .. } => false,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub path: PathBuf,
    pub format: CorpusFormat,
    pub min_len: usize,
    pub max_len: usize,
    pub sample_size: usize,
    pub vocab_size: usize,
    /// Prepend BOS to every prefix.
    pub bos: bool,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let c = CorpusConfig::default();
        Self {
            path: PathBuf::from("corpus.tsv"),
            format: CorpusFormat::Tsv,
            min_len: c.min_len,
            max_len: c.max_len,
            sample_size: c.sample_size,
            vocab_size: ModelConfig::default().vocab_size,
            bos: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            n_layers: m.n_layers,
            d_model: m.d_model,
            n_heads: m.n_heads,
            d_ff: m.d_ff,
            max_seq_len: m.max_seq_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let o = t.optimizer;
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            grad_clip: t.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub k_values: Vec<usize>,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            k_values: analytics::DEFAULT_K_VALUES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub thresholds: Vec<f64>,
    pub l2: f64,
    pub epochs: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            thresholds: probe::DEFAULT_THRESHOLDS.to_vec(),
            l2: p.l2,
            epochs: p.epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Display names for the two corpus columns.
    pub lang_a: String,
    pub lang_b: String,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub analysis: AnalysisSection,
    pub probe: ProbeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            lang_a: "cs".into(),
            lang_b: "en".into(),
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            analysis: AnalysisSection::default(),
            probe: ProbeSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            PipelineError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn corpus_config(&self) -> CorpusConfig {
        CorpusConfig {
            min_len: self.corpus.min_len,
            max_len: self.corpus.max_len,
            sample_size: self.corpus.sample_size,
            seed: derive_seed(self.seed, "sample"),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.model.n_layers,
            d_model: self.model.d_model,
            n_heads: self.model.n_heads,
            d_ff: self.model.d_ff,
            vocab_size: self.corpus.vocab_size,
            max_seq_len: self.model.max_seq_len,
            seed: derive_seed(self.seed, "init"),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch_size: t.batch_size,
            optimizer: AdamWConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                weight_decay: t.weight_decay,
            },
            grad_clip: t.grad_clip,
            seed: derive_seed(self.seed, "batches"),
        }
    }

    pub fn probe_config(&self) -> ProbeConfig {
        ProbeConfig {
            l2: self.probe.l2,
            epochs: self.probe.epochs,
        }
    }

    pub fn probe_seed(&self) -> u64 {
        derive_seed(self.seed, "probe-split")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        self.corpus_config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.model_config()
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        if self.corpus.vocab_size <= 259 {
            return bad(format!(
                "corpus.vocab_size {} leaves no room for merges (must exceed 259)",
                self.corpus.vocab_size
            ));
        }
        let longest = self.corpus.max_len + usize::from(self.corpus.bos);
        if longest > self.model.max_seq_len {
            return bad(format!(
                "model.max_seq_len {} is shorter than the longest prefix ({longest} tokens)",
                self.model.max_seq_len
            ));
        }
        if self.train.steps == 0 || self.train.batch_size == 0 {
            return bad("train.steps and train.batch_size must be positive".into());
        }
        let t = &self.train;
        let finite = [t.lr, t.beta1, t.beta2, t.eps, t.weight_decay, t.grad_clip];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) || t.beta1 >= 1.0 || t.beta2 >= 1.0 {
            return bad("train hyperparameters must be finite, non-negative, betas below 1".into());
        }
        if self.analysis.k_values.is_empty() {
            return bad("analysis.k_values is empty".into());
        }
        if let Some(k) = self.analysis.k_values.iter().find(|&&k| k == 0 || k > self.model.d_ff) {
            return bad(format!("k = {k} outside 1..={} (model.d_ff)", self.model.d_ff));
        }
        let th = &self.probe.thresholds;
        if th.is_empty() || th.windows(2).any(|w| w[0] >= w[1]) || th.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("probe.thresholds must be strictly increasing values in [0, 1]".into());
        }
        if self.probe.epochs == 0 || !(self.probe.l2 >= 0.0 && self.probe.l2.is_finite()) {
            return bad("probe.epochs must be positive and probe.l2 finite and non-negative".into());
        }
        if self.lang_a.is_empty() || self.lang_b.is_empty() || self.lang_a == self.lang_b {
            return bad("lang_a and lang_b must be distinct non-empty names".into());
        }
        Ok(())
    }

    fn lang_name(&self, l: Language) -> &str {
        match l {
            Language::LangA => &self.lang_a,
            Language::LangB => &self.lang_b,
        }
    }
}

// ---------------------------------------------------------------------------
// Stamps.

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Prepare,
    Train,
    Capture,
    Analyze,
    Probe,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Prepare,
        Stage::Train,
        Stage::Capture,
        Stage::Analyze,
        Stage::Probe,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Train => "train",
            Stage::Capture => "capture",
            Stage::Analyze => "analyze",
            Stage::Probe => "probe",
            Stage::Report => "report",
        }
    }

    fn requires(self) -> &'static [Stage] {
        match self {
            Stage::Prepare => &[],
            Stage::Train => &[Stage::Prepare],
            Stage::Capture => &[Stage::Prepare, Stage::Train],
            Stage::Analyze | Stage::Probe => &[Stage::Capture],
            Stage::Report => &[Stage::Prepare, Stage::Train, Stage::Capture, Stage::Analyze, Stage::Probe],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub config: String,
    /// Files outside the run directory, by path.
    pub external: BTreeMap<String, String>,
    /// Files inside the run directory, by name.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Hash of the configuration fields a stage (and everything upstream of it)
/// depends on.
pub fn stage_fingerprint(config: &RunConfig, stage: Stage) -> String {
    let mut v = serde_json::json!({
        "seed": config.seed,
        "corpus": config.corpus,
    });
    if stage >= Stage::Train {
        v["model"] = serde_json::to_value(&config.model).unwrap();
        v["train"] = serde_json::to_value(&config.train).unwrap();
    }
    if stage == Stage::Analyze || stage == Stage::Report {
        v["analysis"] = serde_json::to_value(&config.analysis).unwrap();
    }
    if stage == Stage::Probe || stage == Stage::Report {
        v["probe"] = serde_json::to_value(&config.probe).unwrap();
    }
    if stage == Stage::Report {
        v["names"] = serde_json::json!([config.lang_a, config.lang_b]);
    }
    hex(&Sha256::digest(v.to_string().as_bytes()))
}

fn file_sha(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

/// Files a stage read or wrote, keyed by the name recorded in its stamp.
struct Files<'a> {
    dir: &'a Path,
    entries: Vec<(String, PathBuf)>,
    external: Vec<PathBuf>,
}

impl<'a> Files<'a> {
    fn new(dir: &'a Path) -> Self {
        Self {
            dir,
            entries: Vec::new(),
            external: Vec::new(),
        }
    }

    fn run_file(mut self, name: impl Into<String>) -> Self {
        let name = name.into();
        let path = self.dir.join(&name);
        self.entries.push((name, path));
        self
    }

    fn external(mut self, path: &Path) -> Self {
        self.external.push(path.to_path_buf());
        self
    }

    fn hashes(&self) -> Result<BTreeMap<String, String>> {
        self.entries
            .iter()
            .map(|(name, path)| Ok((name.clone(), file_sha(path)?)))
            .collect()
    }

    fn external_hashes(&self) -> Result<BTreeMap<String, String>> {
        self.external
            .iter()
            .map(|path| Ok((path.display().to_string(), file_sha(path)?)))
            .collect()
    }
}

fn stamp_path(dir: &Path, stage: Stage) -> PathBuf {
    dir.join(paths::STAMPS_DIR).join(format!("{}.json", stage.name()))
}

fn read_stamp(dir: &Path, stage: Stage) -> Result<Option<Stamp>> {
    let path = stamp_path(dir, stage);
    match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map(Some).map_err(|e| PipelineError::Stale {
            stage: stage.name(),
            reason: format!("unreadable stamp {}: {e}", path.display()),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(&path)(e)),
    }
}

fn write_stamp(config: &RunConfig, stage: Stage, inputs: Files<'_>, outputs: Files<'_>) -> Result<()> {
    let stamp = Stamp {
        stage: stage.name().into(),
        config: stage_fingerprint(config, stage),
        external: inputs.external_hashes()?,
        inputs: inputs.hashes()?,
        outputs: outputs.hashes()?,
    };
    let dir = config.output_dir.join(paths::STAMPS_DIR);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let path = stamp_path(&config.output_dir, stage);
    let text = serde_json::to_string_pretty(&stamp).expect("stamp serializes") + "\n";
    write_file(&path, text.as_bytes())
}

/// Checks that `stage`'s stamp exists and still matches config and files.
fn verify_stamp(config: &RunConfig, stage: Stage) -> Result<Stamp> {
    let dir = &config.output_dir;
    let stamp = read_stamp(dir, stage)?.ok_or(PipelineError::Stale {
        stage: stage.name(),
        reason: "stamp missing".into(),
    })?;
    if stamp.config != stage_fingerprint(config, stage) {
        return Err(PipelineError::Stale {
            stage: stage.name(),
            reason: "configuration changed since it ran".into(),
        });
    }
    let external = stamp.external.iter().map(|(n, h)| (n, h, PathBuf::from(n)));
    let internal = stamp.inputs.iter().chain(&stamp.outputs).map(|(n, h)| (n, h, dir.join(n)));
    for (name, want, path) in external.chain(internal) {
        let got = file_sha(&path).map_err(|_| PipelineError::Stale {
            stage: stage.name(),
            reason: format!("{name} is missing"),
        })?;
        if &got != want {
            return Err(PipelineError::Stale {
                stage: stage.name(),
                reason: format!("{name} changed since it ran"),
            });
        }
    }
    Ok(stamp)
}

fn require(config: &RunConfig, stage: Stage) -> Result<()> {
    for &dep in stage.requires() {
        if read_stamp(&config.output_dir, dep)?.is_none() {
            return Err(PipelineError::MissingStage {
                stage: stage.name(),
                missing: dep.name(),
                dir: config.output_dir.join(paths::STAMPS_DIR),
            });
        }
        verify_stamp(config, dep)?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn begin(config: &RunConfig, stage: Stage) -> Result<()> {
    config.validate()?;
    require(config, stage)?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join(paths::CONFIG), config.to_toml().as_bytes())?;
    log::info!("stage {}", stage.name());
    Ok(())
}

// ---------------------------------------------------------------------------
// Stages.

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub corpus_pairs: usize,
    pub sampled_pairs: usize,
    pub bos: bool,
    pub vocab_size: usize,
    pub prefixes_lang_a: usize,
    pub prefixes_lang_b: usize,
}

fn load_vocab(dir: &Path) -> Result<Vocabulary> {
    let path = dir.join(paths::VOCAB);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(Vocabulary::from_text(&text)?)
}

fn load_sample(dir: &Path) -> Result<Vec<corpus::ParallelPair>> {
    let path = dir.join(paths::SAMPLE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(corpus::read_sample_tsv(&text)?)
}

/// Trains the vocabulary on the whole corpus, samples pairs by length and
/// writes the vocabulary, the sample and a prefix manifest.
pub fn cmd_prepare(config: &RunConfig) -> Result<Manifest> {
    begin(config, Stage::Prepare)?;
    let dir = &config.output_dir;
    let pairs = corpus::load_corpus(&config.corpus.path, config.corpus.format)?;
    let vocab = Vocabulary::train(&pairs, config.corpus.vocab_size)?;
    let sample = corpus::filter_and_sample(&pairs, &vocab, &config.corpus_config())?;
    let (mut a, mut b) = (0, 0);
    for p in &sample {
        a += vocab.encode(&p.lang_a_text).len();
        b += vocab.encode(&p.lang_b_text).len();
    }
    let manifest = Manifest {
        corpus_pairs: pairs.len(),
        sampled_pairs: sample.len(),
        bos: config.corpus.bos,
        vocab_size: vocab.len(),
        prefixes_lang_a: a,
        prefixes_lang_b: b,
    };
    write_file(&dir.join(paths::VOCAB), vocab.to_text().as_bytes())?;
    let mut tsv = Vec::new();
    corpus::write_sample_tsv(&sample, &mut tsv).expect("writing to memory");
    write_file(&dir.join(paths::SAMPLE), &tsv)?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_file(&dir.join(paths::MANIFEST), json.as_bytes())?;
    write_stamp(
        config,
        Stage::Prepare,
        Files::new(dir).external(&config.corpus.path),
        Files::new(dir)
            .run_file(paths::VOCAB)
            .run_file(paths::SAMPLE)
            .run_file(paths::MANIFEST),
    )?;
    Ok(manifest)
}

/// Trains the model on both sides of every corpus pair. With `resume`, picks
/// up from the checkpoint and train state left by an interrupted run.
pub fn cmd_train(config: &RunConfig, resume: bool, exec: Execution) -> Result<model::TrainState> {
    begin(config, Stage::Train)?;
    let dir = &config.output_dir;
    let vocab = load_vocab(dir)?;
    let pairs = corpus::load_corpus(&config.corpus.path, config.corpus.format)?;
    let sentences = model::training_sentences(&pairs, &vocab);
    let model_config = config.model_config();
    let (mut net, state) = if resume {
        let net = model::load_checkpoint_for(&dir.join(paths::CHECKPOINT), &model_config)?;
        let state = model::load_train_state(&dir.join(paths::TRAIN_STATE), &net)?;
        log::info!("resuming at step {}", state.step);
        (net, Some(state))
    } else {
        (TransformerModel::init(model_config)?, None)
    };
    let mut trainer = model::Trainer::new(&mut net, &sentences, config.train_config(), state)?.with_execution(exec);
    trainer.run(Some(dir))?;
    let state = trainer.into_state();
    log::info!(
        "loss {:.4} -> {:.4}",
        state.initial_loss(10),
        state.final_loss(10)
    );
    let mut csv = String::from("step,loss\n");
    for (i, l) in state.loss_history.iter().enumerate() {
        let _ = writeln!(csv, "{},{l:.6}", i + 1);
    }
    write_file(&dir.join(paths::LOSS_CSV), csv.as_bytes())?;
    write_stamp(
        config,
        Stage::Train,
        Files::new(dir).external(&config.corpus.path).run_file(paths::VOCAB),
        Files::new(dir)
            .run_file(paths::CHECKPOINT)
            .run_file(paths::TRAIN_STATE)
            .run_file(paths::LOSS_CSV),
    )?;
    Ok(state)
}

fn binding(config: &RunConfig) -> Result<(TransformerModel, Vocabulary, Binding)> {
    let dir = &config.output_dir;
    let vocab = load_vocab(dir)?;
    let net = model::load_checkpoint_for(&dir.join(paths::CHECKPOINT), &config.model_config())?;
    let b = Binding {
        model_hash: net.sha256(),
        vocab_hash: vocab.sha256(),
    };
    Ok((net, vocab, b))
}

/// Records the detector activations of every prefix of the sample.
pub fn cmd_capture(config: &RunConfig, mode: CaptureMode, exec: Execution) -> Result<instrument::DumpHeader> {
    begin(config, Stage::Capture)?;
    let dir = &config.output_dir;
    let (net, vocab, b) = binding(config)?;
    let sample = load_sample(dir)?;
    let prefixes: Vec<_> = sample
        .iter()
        .flat_map(|p| corpus::make_prefixes(p, &vocab, config.corpus.bos))
        .collect();
    let dump = instrument::capture(&net, &prefixes, mode, b, exec)?;
    instrument::write_dump(&dump, &dir.join(paths::DUMP))?;
    write_stamp(
        config,
        Stage::Capture,
        Files::new(dir)
            .run_file(paths::VOCAB)
            .run_file(paths::SAMPLE)
            .run_file(paths::CHECKPOINT),
        Files::new(dir).run_file(paths::DUMP),
    )?;
    Ok(dump.header)
}

fn load_bound_dump(config: &RunConfig) -> Result<instrument::Dump> {
    let (_, _, b) = binding(config)?;
    Ok(instrument::read_dump(&config.output_dir.join(paths::DUMP), Some(&b))?)
}

fn profile_chart(config: &RunConfig, k: usize, profiles: &[&LayerSetProfile]) -> LineChart {
    let series = |name: String, f: fn(&LayerSetProfile) -> usize| Series {
        name,
        points: profiles.iter().map(|p| (p.layer as f64, f(p) as f64)).collect(),
    };
    let (a, b) = (&config.lang_a, &config.lang_b);
    LineChart {
        title: format!("Top-{k} detector sets per layer"),
        x_label: "layer".into(),
        y_label: "detectors".into(),
        series: vec![
            series(format!("union {a}"), |p| p.size_lang_a),
            series(format!("union {b}"), |p| p.size_lang_b),
            series("intersection".into(), |p| p.size_intersection),
            series(format!("{a}-specific"), |p| p.size_a_specific),
            series(format!("{b}-specific"), |p| p.size_b_specific),
        ],
    }
}

pub fn cmd_analyze(config: &RunConfig, exec: Execution) -> Result<Vec<LayerSetProfile>> {
    begin(config, Stage::Analyze)?;
    let dir = &config.output_dir;
    let dump = load_bound_dump(config)?;
    let profiles = analytics::profile_all_layers(&dump, &config.analysis.k_values, exec)?;
    let mut outputs = Files::new(dir);
    let mut ks = config.analysis.k_values.clone();
    ks.sort_unstable();
    ks.dedup();
    for &k in &ks {
        let rows: Vec<LayerSetProfile> = profiles.iter().filter(|p| p.k == k).copied().collect();
        let mut csv = Vec::new();
        analytics::write_profiles_csv(&rows, &mut csv).expect("writing to memory");
        write_file(&dir.join(paths::profile_csv(k)), &csv)?;
        let refs: Vec<&LayerSetProfile> = rows.iter().collect();
        write_file(&dir.join(paths::profile_svg(k)), profile_chart(config, k, &refs).render().as_bytes())?;
        outputs = outputs.run_file(paths::profile_csv(k)).run_file(paths::profile_svg(k));
    }
    let stats = analytics::sparsity_stats(&dump, exec);
    let mut csv = Vec::new();
    analytics::write_sparsity_csv(&stats, &mut csv).expect("writing to memory");
    write_file(&dir.join(paths::SPARSITY_CSV), &csv)?;
    write_stamp(
        config,
        Stage::Analyze,
        Files::new(dir).run_file(paths::DUMP),
        outputs.run_file(paths::SPARSITY_CSV),
    )?;
    Ok(profiles)
}

fn bracket_chart(reports: &[ProbeReport], thresholds: &[f64]) -> LineChart {
    LineChart {
        title: "Detectors per accuracy bracket".into(),
        x_label: "layer".into(),
        y_label: "detectors".into(),
        series: thresholds
            .iter()
            .enumerate()
            .map(|(i, t)| Series {
                name: format!(">= {:.0}%", t * 100.0),
                points: reports
                    .iter()
                    .map(|r| (r.layer as f64, r.bracket_counts[i].1 as f64))
                    .collect(),
            })
            .collect(),
    }
}

pub fn cmd_probe(config: &RunConfig, exec: Execution) -> Result<Vec<ProbeReport>> {
    begin(config, Stage::Probe)?;
    let dir = &config.output_dir;
    let dump = load_bound_dump(config)?;
    let reports = probe::probe_all_layers(
        &dump,
        config.probe_seed(),
        &config.probe_config(),
        &config.probe.thresholds,
        exec,
    )?;
    let mut csv = Vec::new();
    probe::write_accuracy_csv(&reports, &mut csv).expect("writing to memory");
    write_file(&dir.join(paths::PROBE_ACCURACY_CSV), &csv)?;
    let mut csv = Vec::new();
    probe::write_brackets_csv(&reports, &mut csv).expect("writing to memory");
    write_file(&dir.join(paths::PROBE_BRACKETS_CSV), &csv)?;
    let mut csv = Vec::new();
    probe::write_attribution_brackets_csv(&reports, &mut csv).expect("writing to memory");
    write_file(&dir.join(paths::PROBE_ATTRIBUTION_CSV), &csv)?;
    let svg = bracket_chart(&reports, &config.probe.thresholds).render();
    write_file(&dir.join(paths::PROBE_SVG), svg.as_bytes())?;
    write_stamp(
        config,
        Stage::Probe,
        Files::new(dir).run_file(paths::DUMP),
        Files::new(dir)
            .run_file(paths::PROBE_ACCURACY_CSV)
            .run_file(paths::PROBE_BRACKETS_CSV)
            .run_file(paths::PROBE_ATTRIBUTION_CSV)
            .run_file(paths::PROBE_SVG),
    )?;
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Report.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimStatus {
    Observed,
    NotObserved,
}

impl std::fmt::Display for ClaimStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Observed => "OBSERVED",
            Self::NotObserved => "NOT-OBSERVED",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Claim {
    pub title: &'static str,
    pub status: ClaimStatus,
    pub evidence: String,
}

/// Splits layer indices into first, middle and last thirds.
fn thirds(n: usize) -> Option<(std::ops::Range<usize>, std::ops::Range<usize>, std::ops::Range<usize>)> {
    let edge = n.div_ceil(3);
    (n >= 3 && 2 * edge < n).then(|| (0..edge, edge..n - edge, n - edge..n))
}

fn mean_over(values: &[f64], r: std::ops::Range<usize>) -> f64 {
    values[r.clone()].iter().sum::<f64>() / r.len() as f64
}

fn boundary_claim(title: &'static str, what: &str, values: &[f64]) -> Claim {
    let Some((first, middle, last)) = thirds(values.len()) else {
        return Claim {
            title,
            status: ClaimStatus::NotObserved,
            evidence: format!("needs at least 3 layers, run has {}", values.len()),
        };
    };
    let (f, m, l) = (mean_over(values, first), mean_over(values, middle), mean_over(values, last));
    Claim {
        title,
        status: if f > m && l > m {
            ClaimStatus::Observed
        } else {
            ClaimStatus::NotObserved
        },
        evidence: format!("mean {what}: first third {f:.2}, middle third {m:.2}, last third {l:.2}"),
    }
}

/// Evaluates the three qualitative layer-trend claims against a run.
pub fn evaluate_claims(
    config: &RunConfig,
    profiles: &[LayerSetProfile],
    reports: &[ProbeReport],
) -> Vec<Claim> {
    let k = profiles.iter().map(|p| p.k).min().unwrap_or(0);
    let at_k: Vec<&LayerSetProfile> = profiles.iter().filter(|p| p.k == k).collect();

    let mut observed = at_k.len() >= 3;
    let mut evidence = Vec::new();
    for lang in [Language::LangA, Language::LangB] {
        let sizes: Vec<usize> = at_k
            .iter()
            .map(|p| match lang {
                Language::LangA => p.size_lang_a,
                Language::LangB => p.size_lang_b,
            })
            .collect();
        if sizes.len() < 3 {
            evidence.push(format!("{}: needs at least 3 layers", config.lang_name(lang)));
            continue;
        }
        let inner = &sizes[1..sizes.len() - 1];
        let peak = *inner.iter().max().unwrap();
        let (first, last) = (sizes[0], sizes[sizes.len() - 1]);
        observed &= peak > first && peak > last;
        evidence.push(format!(
            "{}: first layer {first}, interior peak {peak}, last layer {last}",
            config.lang_name(lang)
        ));
    }
    let rise_fall = Claim {
        title: "Top-k union sizes rise after the input layers and fall near the output",
        status: if observed {
            ClaimStatus::Observed
        } else {
            ClaimStatus::NotObserved
        },
        evidence: format!("k = {k}; {}", evidence.join("; ")),
    };

    // The highest bracket that any layer populates; the top one if none does.
    let n_th = config.probe.thresholds.len();
    let bracket = (0..n_th)
        .rev()
        .find(|&i| reports.iter().any(|r| r.bracket_counts[i].1 > 0))
        .unwrap_or(n_th - 1);
    let counts: Vec<f64> = reports.iter().map(|r| r.bracket_counts[bracket].1 as f64).collect();
    let brackets = boundary_claim(
        "High-accuracy detector counts are larger at the boundary layers than in the middle",
        &format!(
            "detectors with accuracy >= {:.0}%",
            config.probe.thresholds[bracket] * 100.0
        ),
        &counts,
    );

    let specific: Vec<f64> = at_k
        .iter()
        .map(|p| (p.size_a_specific + p.size_b_specific) as f64)
        .collect();
    let specificity = boundary_claim(
        "Language-specific detectors are more numerous at the boundary layers than in the middle",
        &format!("language-specific top-{k} detectors"),
        &specific,
    );
    vec![rise_fall, brackets, specificity]
}

fn csv_to_markdown(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let cols: Vec<&str> = header.split(',').collect();
    let mut out = format!("| {} |\n|{}\n", cols.join(" | "), "---|".repeat(cols.len()));
    for l in lines {
        let _ = writeln!(out, "| {} |", l.split(',').collect::<Vec<_>>().join(" | "));
    }
    out
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

fn parse_profiles(csv: &str) -> Vec<LayerSetProfile> {
    csv.lines()
        .skip(1)
        .filter_map(|l| {
            let v: Vec<usize> = l.split(',').map(|x| x.parse().ok()).collect::<Option<_>>()?;
            (v.len() == 7).then(|| LayerSetProfile {
                layer: v[0],
                k: v[1],
                size_lang_a: v[2],
                size_lang_b: v[3],
                size_intersection: v[4],
                size_a_specific: v[5],
                size_b_specific: v[6],
            })
        })
        .collect()
}

fn parse_brackets(csv: &str, thresholds: &[f64]) -> Vec<ProbeReport> {
    let mut reports: Vec<ProbeReport> = Vec::new();
    for l in csv.lines().skip(1) {
        let v: Vec<&str> = l.split(',').collect();
        let (Some(layer), Some(t), Some(c)) = (
            v.first().and_then(|x| x.parse::<usize>().ok()),
            v.get(1).and_then(|x| x.parse::<f64>().ok()),
            v.get(2).and_then(|x| x.parse::<usize>().ok()),
        ) else {
            continue;
        };
        if reports.last().is_none_or(|r| r.layer != layer) {
            reports.push(ProbeReport {
                layer,
                full_probe_accuracy: f64::NAN,
                detector_accuracies: Vec::new(),
                bracket_counts: Vec::with_capacity(thresholds.len()),
                attribution_accuracies: Vec::new(),
                attribution_bracket_counts: Vec::new(),
            });
        }
        reports.last_mut().unwrap().bracket_counts.push((t, c));
    }
    reports
}

/// Writes a markdown report from the CSV outputs of the earlier stages.
pub fn cmd_report(config: &RunConfig) -> Result<Vec<Claim>> {
    config.validate()?;
    let dir = &config.output_dir;
    let mut missing = Vec::new();
    for &s in Stage::Report.requires() {
        if read_stamp(dir, s)?.is_none() {
            missing.push(s.name());
        }
    }
    if !missing.is_empty() {
        return Err(PipelineError::Incomplete(missing));
    }
    begin(config, Stage::Report)?;

    let mut ks = config.analysis.k_values.clone();
    ks.sort_unstable();
    ks.dedup();
    let mut profile_csvs = Vec::new();
    let mut profiles = Vec::new();
    for &k in &ks {
        let text = read_text(&dir.join(paths::profile_csv(k)))?;
        profiles.extend(parse_profiles(&text));
        profile_csvs.push((k, text));
    }
    let brackets_csv = read_text(&dir.join(paths::PROBE_BRACKETS_CSV))?;
    let attribution_csv = read_text(&dir.join(paths::PROBE_ATTRIBUTION_CSV))?;
    let accuracy_csv = read_text(&dir.join(paths::PROBE_ACCURACY_CSV))?;
    let sparsity_csv = read_text(&dir.join(paths::SPARSITY_CSV))?;
    let manifest_text = read_text(&dir.join(paths::MANIFEST))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| PipelineError::Stale { stage: "prepare", reason: format!("unreadable manifest: {e}") })?;
    let loss_csv = read_text(&dir.join(paths::LOSS_CSV))?;
    let losses: Vec<f64> = loss_csv
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(1)?.parse().ok())
        .collect();
    let reports = parse_brackets(&brackets_csv, &config.probe.thresholds);
    let claims = evaluate_claims(config, &profiles, &reports);

    let (a, b) = (&config.lang_a, &config.lang_b);
    let m = config.model_config();
    let mut r = String::new();
    let _ = writeln!(r, "# Detector language-specificity report\n");
    let _ = writeln!(
        r,
        "Seed {}. Model: {} layers, d_model {}, {} heads, {} detectors per layer, vocabulary {}, context {}.\n",
        config.seed, m.n_layers, m.d_model, m.n_heads, m.d_ff, m.vocab_size, m.max_seq_len
    );
    let _ = writeln!(r, "## Stages\n");
    let _ = writeln!(r, "| stage | outputs |\n|---|---|");
    for s in Stage::Report.requires() {
        let stamp = verify_stamp(config, *s)?;
        let outs: Vec<String> = stamp
            .outputs
            .iter()
            .map(|(name, sha)| format!("`{name}` ({})", &sha[..12]))
            .collect();
        let _ = writeln!(r, "| {} | {} |", s.name(), outs.join(", "));
    }
    let _ = writeln!(r);
    let _ = writeln!(
        r,
        "Corpus: {} pairs, {} sampled; {} prefixes in {a}, {} in {b}; BOS {}.\n",
        manifest.corpus_pairs,
        manifest.sampled_pairs,
        manifest.prefixes_lang_a,
        manifest.prefixes_lang_b,
        if manifest.bos { "prepended" } else { "not prepended" }
    );
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        let _ = writeln!(
            r,
            "Training: {} steps, loss {first:.4} at the first step and {last:.4} at the last (`{}`).\n",
            losses.len(),
            paths::LOSS_CSV
        );
    }

    let _ = writeln!(r, "## Qualitative claims\n");
    let _ = writeln!(
        r,
        "These are exploratory. The original observations concern a 1.7B-parameter pretrained model; \
         a toy-scale run may or may not show the same trends.\n"
    );
    for (i, c) in claims.iter().enumerate() {
        let _ = writeln!(r, "{}. **{}**: {}. {}.", i + 1, c.status, c.title, c.evidence);
    }
    let _ = writeln!(r);

    let _ = writeln!(
        r,
        "## Detector sets\n\nColumns `size_lang_a` and `size_lang_b` refer to {a} and {b}.\n"
    );
    for (k, text) in &profile_csvs {
        let _ = writeln!(r, "### Top-{k}\n\n![top-{k} detector sets]({})\n", paths::profile_svg(*k));
        let _ = writeln!(r, "{}", csv_to_markdown(text));
    }
    let _ = writeln!(r, "## Sparsity\n\n{}", csv_to_markdown(&sparsity_csv));
    let _ = writeln!(r, "## Probes\n\n![accuracy brackets]({})\n", paths::PROBE_SVG);
    let _ = writeln!(r, "### Layer probe accuracy\n\n{}", csv_to_markdown(&accuracy_csv));
    let _ = writeln!(r, "### Detectors per accuracy bracket\n\n{}", csv_to_markdown(&brackets_csv));
    let _ = writeln!(
        r,
        "### Detectors per attribution bracket\n\nAccuracy of each detector's signed term in the layer probe.\n\n{}",
        csv_to_markdown(&attribution_csv)
    );

    write_file(&dir.join(paths::REPORT), r.as_bytes())?;
    write_stamp(
        config,
        Stage::Report,
        Files::new(dir)
            .run_file(paths::PROBE_BRACKETS_CSV)
            .run_file(paths::PROBE_ATTRIBUTION_CSV)
            .run_file(paths::PROBE_ACCURACY_CSV)
            .run_file(paths::SPARSITY_CSV),
        Files::new(dir).run_file(paths::REPORT),
    )?;
    Ok(claims)
}

/// Runs every stage in order.
pub fn cmd_all(config: &RunConfig, exec: Execution) -> Result<Vec<Claim>> {
    cmd_prepare(config)?;
    cmd_train(config, false, exec)?;
    cmd_capture(config, CaptureMode::PerSentence, exec)?;
    cmd_analyze(config, exec)?;
    cmd_probe(config, exec)?;
    cmd_report(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_toml_uses_defaults_and_unknown_keys_fail() {
        let c = RunConfig::from_toml("seed = 4\n[corpus]\npath = \"x.tsv\"\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.model, ModelSection::default());
        assert!(RunConfig::from_toml("[model]\nlayers = 3\n").is_err());
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = RunConfig::default();
        c.analysis.k_values = vec![0];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.probe.thresholds = vec![0.9, 0.5];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.max_seq_len = c.corpus.max_len;
        assert!(c.validate().is_err());
    }

    #[test]
    fn fingerprints_track_relevant_sections() {
        let base = RunConfig::default();
        let mut probe_changed = base.clone();
        probe_changed.probe.epochs = 7;
        for s in [Stage::Prepare, Stage::Train, Stage::Capture, Stage::Analyze] {
            assert_eq!(stage_fingerprint(&base, s), stage_fingerprint(&probe_changed, s));
        }
        assert_ne!(stage_fingerprint(&base, Stage::Probe), stage_fingerprint(&probe_changed, Stage::Probe));
        let mut seed_changed = base.clone();
        seed_changed.seed = 1;
        assert_ne!(stage_fingerprint(&base, Stage::Prepare), stage_fingerprint(&seed_changed, Stage::Prepare));
    }

    #[test]
    fn thirds_partition_layers() {
        assert_eq!(thirds(24), Some((0..8, 8..16, 16..24)));
        assert_eq!(thirds(6), Some((0..2, 2..4, 4..6)));
        assert_eq!(thirds(4), None);
        assert_eq!(thirds(5), Some((0..2, 2..3, 3..5)));
        assert_eq!(thirds(2), None);
    }

    #[test]
    fn markdown_table_from_csv() {
        assert_eq!(csv_to_markdown("a,b\n1,2\n"), "| a | b |\n|---|---|\n| 1 | 2 |\n");
    }
}
