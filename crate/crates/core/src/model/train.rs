use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{checkpoint::save_checkpoint, ModelError, TransformerModel};
use crate::corpus::{bpe::BOS, Language, ParallelPair, Vocabulary};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::par::{self, Execution};
use crate::tensor::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    /// Sentences per step.
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 8,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub optimizer: AdamWState,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(model: &TransformerModel) -> Self {
        Self {
            step: 0,
            optimizer: AdamWState::new(model.params()),
            loss_history: Vec::new(),
        }
    }

    /// Mean loss over the first `window` steps.
    pub fn initial_loss(&self, window: usize) -> f64 {
        mean(&self.loss_history[..window.min(self.loss_history.len())])
    }

    /// Mean loss over the last `window` steps.
    pub fn final_loss(&self, window: usize) -> f64 {
        let n = self.loss_history.len();
        mean(&self.loss_history[n - window.min(n)..])
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Both sides of every pair as independent `[BOS, tokens..]` sequences,
/// in pair order with language A first.
pub fn training_sentences(pairs: &[ParallelPair], vocab: &Vocabulary) -> Vec<Vec<u32>> {
    pairs
        .iter()
        .flat_map(|p| [Language::LangA, Language::LangB].map(|l| p.text(l)))
        .map(|text| {
            let mut ids = vec![BOS];
            ids.extend(vocab.encode(text));
            ids
        })
        .filter(|ids| ids.len() >= 2)
        .collect()
}

/// Drives optimisation one step at a time.
///
/// The batch for step `s` is a pure function of `(seed, s)`: sentences are
/// consumed from a stream of per-epoch shuffles, so a run resumed from a saved
/// state visits exactly the same batches.
pub struct Trainer<'a> {
    model: &'a mut TransformerModel,
    sentences: &'a [Vec<u32>],
    config: TrainConfig,
    state: TrainState,
    exec: Execution,
    epoch_order: Option<(u64, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a mut TransformerModel,
        sentences: &'a [Vec<u32>],
        config: TrainConfig,
        state: Option<TrainState>,
    ) -> Result<Self, ModelError> {
        if sentences.is_empty() {
            return Err(ModelError::NoData);
        }
        if config.batch_size == 0 {
            return Err(ModelError::Config("batch_size must be positive".into()));
        }
        let state = state.unwrap_or_else(|| TrainState::new(model));
        Ok(Self {
            model,
            sentences,
            config,
            state,
            exec: Execution::default(),
            epoch_order: None,
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    fn epoch_of(&self, step: u64) -> u64 {
        step * self.config.batch_size as u64 / self.sentences.len() as u64
    }

    fn order(&mut self, epoch: u64) -> &[usize] {
        let stale = self.epoch_order.as_ref().is_none_or(|(e, _)| *e != epoch);
        if stale {
            let mut order: Vec<usize> = (0..self.sentences.len()).collect();
            let seed = self.config.seed ^ crate::tensor::splitmix64(epoch.wrapping_add(1));
            Rng::new(seed).shuffle(&mut order);
            self.epoch_order = Some((epoch, order));
        }
        &self.epoch_order.as_ref().unwrap().1
    }

    fn batch(&mut self, step: u64) -> Vec<usize> {
        let n = self.sentences.len() as u64;
        let b = self.config.batch_size as u64;
        (step * b..(step + 1) * b)
            .map(|pos| {
                let (epoch, offset) = (pos / n, (pos % n) as usize);
                self.order(epoch)[offset]
            })
            .collect()
    }

    /// Runs one optimisation step and returns the batch loss.
    pub fn step(&mut self) -> Result<f64, ModelError> {
        let step = self.state.step;
        let batch = self.batch(step);
        let model: &TransformerModel = self.model;
        let sentences = self.sentences;
        let results = par::map(self.exec, &batch, |&i| model.loss_and_grads(&sentences[i]));

        let diverged = |reason: String| ModelError::Divergence { step, reason };
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut total: Vec<Vec<f64>> = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        for r in results {
            let (l, grads) = r.map_err(|e| diverged(e.to_string()))?;
            loss += l * scale;
            for (acc, g) in total.iter_mut().zip(grads) {
                if let Some(g) = g {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v * scale;
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(diverged("non-finite loss".into()));
        }
        if self.config.grad_clip > 0.0 {
            let norm = total.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(diverged("non-finite gradient norm".into()));
            }
            if norm > self.config.grad_clip {
                let s = self.config.grad_clip / norm;
                total.iter_mut().flatten().for_each(|g| *g *= s);
            }
        }
        for (p, g) in self.model.params_mut().iter_mut().zip(total) {
            p.set_grad(g)?;
        }
        adamw_step(self.model.params_mut(), &mut self.state.optimizer, &self.config.optimizer)?;
        for p in self.model.params_mut() {
            p.zero_grad();
        }
        self.state.step += 1;
        self.state.loss_history.push(loss);
        Ok(loss)
    }

    /// Steps until `config.steps`. When `checkpoint_dir` is given, the model and
    /// train state are saved whenever an epoch completes and at the end.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>) -> Result<(), ModelError> {
        while self.state.step < self.config.steps {
            let epoch_before = self.epoch_of(self.state.step);
            let loss = self.step()?;
            log::debug!("step {} loss {loss:.5}", self.state.step);
            let epoch_done = self.epoch_of(self.state.step) > epoch_before;
            if let Some(dir) = checkpoint_dir {
                if epoch_done || self.state.step == self.config.steps {
                    self.save(dir)?;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        save_checkpoint(self.model, &dir.join(crate::paths::CHECKPOINT))?;
        save_train_state(&self.state, &dir.join(crate::paths::TRAIN_STATE))
    }
}

const STATE_MAGIC: &[u8; 8] = b"FFNTRAIN";
const STATE_VERSION: u32 = 1;

/// `magic, version, step, loss history, adam step, m, v`; counts are u64, floats f64 LE.
pub fn save_train_state(state: &TrainState, path: &Path) -> Result<(), ModelError> {
    let mut out = Vec::new();
    out.extend_from_slice(STATE_MAGIC);
    out.extend_from_slice(&STATE_VERSION.to_le_bytes());
    out.extend_from_slice(&state.step.to_le_bytes());
    out.extend_from_slice(&(state.loss_history.len() as u64).to_le_bytes());
    for v in &state.loss_history {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&state.optimizer.step.to_le_bytes());
    let n: usize = state.optimizer.m.iter().map(Vec::len).sum();
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for buf in state.optimizer.m.iter().chain(&state.optimizer.v) {
        for v in buf {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_train_state(path: &Path, model: &TransformerModel) -> Result<TrainState, ModelError> {
    let bytes = std::fs::read(path)?;
    let corrupt = |m: &str| ModelError::Checkpoint(format!("corrupt train state: {m}"));
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], ModelError> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| corrupt("truncated"))?;
        pos += n;
        Ok(s)
    };
    if take(8)? != STATE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    if u32::from_le_bytes(take(4)?.try_into().unwrap()) != STATE_VERSION {
        return Err(corrupt("unsupported version"));
    }
    let mut u64_next = || -> Result<u64, ModelError> { Ok(u64::from_le_bytes(take(8)?.try_into().unwrap())) };
    let step = u64_next()?;
    let n_hist = u64_next()? as usize;
    if n_hist as u64 != step {
        return Err(corrupt("loss history length differs from step"));
    }
    let mut loss_history = Vec::with_capacity(n_hist);
    for _ in 0..n_hist {
        loss_history.push(f64::from_bits(u64_next()?));
    }
    let adam_step = u64_next()?;
    let n = u64_next()? as usize;
    if n != model.param_count() {
        return Err(corrupt("optimizer state does not match the model"));
    }
    let mut read_bufs = || -> Result<Vec<Vec<f64>>, ModelError> {
        model
            .params()
            .iter()
            .map(|p| (0..p.len()).map(|_| u64_next().map(f64::from_bits)).collect())
            .collect()
    };
    let m = read_bufs()?;
    let v = read_bufs()?;
    if pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok(TrainState {
        step,
        optimizer: AdamWState { step: adam_step, m, v },
        loss_history,
    })
}
