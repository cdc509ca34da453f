//! Decoder-only causal LM with pre-layernorm blocks.
//!
//! Each block's feed-forward sublayer is `detector -> GeLU -> combinator`:
//! `W_det` (d_model x d_ff) holds one detector per column, and the post-GeLU
//! activation of detector `i` is its selection coefficient. Output logits
//! reuse the token embedding matrix.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{
    training_sentences, load_train_state, save_train_state, TrainConfig, TrainState, Trainer,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Graph, NodeId};
use crate::tensor::{Rng, Tensor, TensorError, LAYERNORM_EPS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("training diverged at step {step}: {reason}")]
    Divergence { step: u64, reason: String },
    #[error("checkpoint {0}")]
    Checkpoint(String),
    #[error("checkpoint shape mismatch: file has {found:?}, expected {expected:?}")]
    ShapeMismatch {
        found: Box<ModelConfig>,
        expected: Box<ModelConfig>,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("no training sentences")]
    NoData,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Detectors per layer.
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 24,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 512,
            max_seq_len: 64,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Parameter shapes in declaration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, ff) = (self.d_model, self.d_ff);
        let mut v = vec![
            ("tok_emb".to_string(), vec![self.vocab_size, d]),
            ("pos_emb".to_string(), vec![self.max_seq_len, d]),
        ];
        for l in 0..self.n_layers {
            let shapes: [(&str, Vec<usize>); PER_LAYER] = [
                ("ln1_gain", vec![d]),
                ("ln1_bias", vec![d]),
                ("w_q", vec![d, d]),
                ("b_q", vec![d]),
                ("w_k", vec![d, d]),
                ("b_k", vec![d]),
                ("w_v", vec![d, d]),
                ("b_v", vec![d]),
                ("w_o", vec![d, d]),
                ("b_o", vec![d]),
                ("ln2_gain", vec![d]),
                ("ln2_bias", vec![d]),
                ("w_det", vec![d, ff]),
                ("b_det", vec![ff]),
                ("w_comb", vec![ff, d]),
                ("b_comb", vec![d]),
            ];
            v.extend(shapes.into_iter().map(|(n, s)| (format!("layer{l}.{n}"), s)));
        }
        v.push(("lnf_gain".to_string(), vec![d]));
        v.push(("lnf_bias".to_string(), vec![d]));
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn sha256(&self) -> [u8; 32] {
        Sha256::digest(serde_json::to_vec(self).expect("config serialises")).into()
    }
}

const PER_LAYER: usize = 16;

/// Offsets of per-layer parameters within a layer's block.
#[allow(dead_code)]
mod slot {
    pub const LN1_GAIN: usize = 0;
    pub const LN1_BIAS: usize = 1;
    pub const W_Q: usize = 2;
    pub const B_Q: usize = 3;
    pub const W_K: usize = 4;
    pub const B_K: usize = 5;
    pub const W_V: usize = 6;
    pub const B_V: usize = 7;
    pub const W_O: usize = 8;
    pub const B_O: usize = 9;
    pub const LN2_GAIN: usize = 10;
    pub const LN2_BIAS: usize = 11;
    pub const W_DET: usize = 12;
    pub const B_DET: usize = 13;
    pub const W_COMB: usize = 14;
    pub const B_COMB: usize = 15;
}

const TOK_EMB: usize = 0;
const POS_EMB: usize = 1;

fn layer_param(layer: usize, slot: usize) -> usize {
    2 + layer * PER_LAYER + slot
}

/// One entry per parameter, in declaration order; `None` where no gradient reached it.
pub type Gradients = Vec<Option<Vec<f64>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    params: Vec<Tensor>,
}

/// Per-layer FFN observations for every position of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// Normalised input to the FFN, `[T, d_model]`.
    pub ffn_input: Tensor,
    /// Post-GeLU detector activations (selection coefficients), `[T, d_ff]`.
    pub selection: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnTrace {
    pub layers: Vec<LayerTrace>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[T, vocab]`
    pub logits: Tensor,
    pub trace: FfnTrace,
    /// Per layer, `[heads, T, T]` attention weights.
    pub attention: Vec<Vec<f64>>,
}

struct Built {
    logits: NodeId,
    ffn_inputs: Vec<NodeId>,
    selections: Vec<NodeId>,
    attention: Vec<NodeId>,
}

impl TransformerModel {
    /// Normal(0, 0.02) weights and embeddings, zero biases, unit layernorm gains.
    pub fn init(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with("gain") {
                    Tensor::filled(shape, 1.0)
                } else if shape.len() == 1 {
                    Tensor::zeros(shape)
                } else {
                    Tensor::randn(shape, 0.02, &mut rng)
                }
            })
            .collect();
        Ok(Self { config, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, params: Vec<Tensor>) -> Self {
        Self { config, params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Detector matrix `W_det` of `layer`, `[d_model, d_ff]`.
    pub fn detector_weights(&self, layer: usize) -> (&Tensor, &Tensor) {
        (
            &self.params[layer_param(layer, slot::W_DET)],
            &self.params[layer_param(layer, slot::B_DET)],
        )
    }

    fn check_len(&self, len: usize) -> Result<(), ModelError> {
        if len == 0 {
            return Err(ModelError::Empty);
        }
        if len > self.config.max_seq_len {
            return Err(ModelError::TooLong {
                len,
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    fn build(&self, g: &mut Graph<'_>, ids: &[u32]) -> Result<Built, ModelError> {
        let t = ids.len();
        let heads = self.config.n_heads;
        let ids: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..t).collect();
        let tok = g.param(TOK_EMB);
        let pos = g.param(POS_EMB);
        let te = g.gather(tok, &ids)?;
        let pe = g.gather(pos, &positions)?;
        let mut x = g.add(te, pe)?;
        let mut built = Built {
            logits: x,
            ffn_inputs: Vec::with_capacity(self.config.n_layers),
            selections: Vec::with_capacity(self.config.n_layers),
            attention: Vec::with_capacity(self.config.n_layers),
        };
        for l in 0..self.config.n_layers {
            let p = |s| layer_param(l, s);
            let (g1, b1) = (g.param(p(slot::LN1_GAIN)), g.param(p(slot::LN1_BIAS)));
            let h = g.layernorm(x, g1, b1, LAYERNORM_EPS)?;
            let q = linear(g, h, p(slot::W_Q), p(slot::B_Q))?;
            let k = linear(g, h, p(slot::W_K), p(slot::B_K))?;
            let v = linear(g, h, p(slot::W_V), p(slot::B_V))?;
            let att = g.causal_attention(q, k, v, heads)?;
            built.attention.push(att);
            let proj = linear(g, att, p(slot::W_O), p(slot::B_O))?;
            x = g.add(x, proj)?;

            let (g2, b2) = (g.param(p(slot::LN2_GAIN)), g.param(p(slot::LN2_BIAS)));
            let u = g.layernorm(x, g2, b2, LAYERNORM_EPS)?;
            let pre = linear(g, u, p(slot::W_DET), p(slot::B_DET))?;
            let sel = g.gelu(pre)?;
            let out = linear(g, sel, p(slot::W_COMB), p(slot::B_COMB))?;
            x = g.add(x, out)?;
            built.ffn_inputs.push(u);
            built.selections.push(sel);
        }
        let n = self.params.len();
        let (gf, bf) = (g.param(n - 2), g.param(n - 1));
        let xf = g.layernorm(x, gf, bf, LAYERNORM_EPS)?;
        built.logits = g.matmul_nt(xf, tok)?;
        Ok(built)
    }

    /// Causal forward pass over `ids` (BOS included by the caller).
    pub fn forward(&self, ids: &[u32]) -> Result<ForwardOutput, ModelError> {
        self.check_len(ids.len())?;
        self.check_ids(ids)?;
        let mut g = Graph::new(&self.params);
        let built = self.build(&mut g, ids)?;
        let layers = built
            .ffn_inputs
            .iter()
            .zip(&built.selections)
            .map(|(&u, &s)| LayerTrace {
                ffn_input: g.to_tensor(u),
                selection: g.to_tensor(s),
            })
            .collect();
        Ok(ForwardOutput {
            logits: g.to_tensor(built.logits),
            trace: FfnTrace { layers },
            attention: built
                .attention
                .iter()
                .map(|&a| g.attention_probs(a).map(<[f64]>::to_vec).unwrap_or_default())
                .collect(),
        })
    }

    /// Post-GeLU detector activations only, `[layer][T * d_ff]`.
    pub fn selection_trace(&self, ids: &[u32]) -> Result<Vec<Vec<f64>>, ModelError> {
        self.check_len(ids.len())?;
        self.check_ids(ids)?;
        let mut g = Graph::new(&self.params);
        let built = self.build(&mut g, ids)?;
        Ok(built.selections.iter().map(|&s| g.value(s).to_vec()).collect())
    }

    fn check_ids(&self, ids: &[u32]) -> Result<(), ModelError> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(TensorError::Index {
                op: "forward",
                index: bad as usize,
                bound: self.config.vocab_size,
            }
            .into());
        }
        Ok(())
    }

    /// Next-token loss of one sequence and its parameter gradients.
    ///
    /// Input is `ids[..n-1]`, targets are `ids[1..]`; sequences longer than
    /// `max_seq_len + 1` are truncated.
    pub fn loss_and_grads(&self, ids: &[u32]) -> Result<(f64, Gradients), ModelError> {
        if ids.len() < 2 {
            return Err(ModelError::Empty);
        }
        let ids = &ids[..ids.len().min(self.config.max_seq_len + 1)];
        let (inp, tgt) = (&ids[..ids.len() - 1], &ids[1..]);
        self.check_ids(ids)?;
        let mut g = Graph::new(&self.params);
        let built = self.build(&mut g, inp)?;
        let targets: Vec<usize> = tgt.iter().map(|&i| i as usize).collect();
        let loss = g.cross_entropy(built.logits, &targets)?;
        let value = g.value(loss)[0];
        let grads = g.backward(loss)?;
        Ok((value, grads.into_params()))
    }

    /// Loss only, for finite-difference checks.
    pub fn loss(&self, ids: &[u32]) -> Result<f64, ModelError> {
        if ids.len() < 2 {
            return Err(ModelError::Empty);
        }
        let ids = &ids[..ids.len().min(self.config.max_seq_len + 1)];
        self.check_ids(ids)?;
        let mut g = Graph::new(&self.params);
        let built = self.build(&mut g, &ids[..ids.len() - 1])?;
        let targets: Vec<usize> = ids[1..].iter().map(|&i| i as usize).collect();
        let loss = g.cross_entropy(built.logits, &targets)?;
        Ok(g.value(loss)[0])
    }

    /// SHA-256 over config and parameter bits.
    pub fn sha256(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.config.sha256());
        for p in &self.params {
            for v in p.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

fn linear(g: &mut Graph<'_>, x: NodeId, w: usize, b: usize) -> Result<NodeId, TensorError> {
    let wn = g.param(w);
    let bn = g.param(b);
    let y = g.matmul(x, wn)?;
    g.add_row(y, bn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gelu_scalar;

    fn micro() -> ModelConfig {
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

    #[test]
    fn init_is_deterministic() {
        let a = TransformerModel::init(micro()).unwrap();
        let b = TransformerModel::init(micro()).unwrap();
        assert_eq!(a, b);
        let c = TransformerModel::init(ModelConfig { seed: 12, ..micro() }).unwrap();
        assert_ne!(a.params()[0], c.params()[0]);
    }

    #[test]
    fn param_count_matches_hand_formula() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab_size: 256,
            max_seq_len: 64,
            seed: 0,
        };
        // embeddings: V*d + ctx*d
        // per layer: 2 layernorms (4d) + 4 projections (4(d*d + d)) + W_det, b_det, W_comb, b_comb
        // final layernorm: 2d
        let (v, c, d, f, l) = (256, 64, 32, 64, 2);
        let per_layer = 4 * d + 4 * (d * d + d) + d * f + f + f * d + d;
        let expected = v * d + c * d + l * per_layer + 2 * d;
        assert_eq!(expected, 27_392);
        assert_eq!(cfg.param_count(), expected);
        assert_eq!(TransformerModel::init(cfg).unwrap().param_count(), expected);
    }

    #[test]
    fn layernorm_gains_start_at_one() {
        let m = TransformerModel::init(micro()).unwrap();
        for ((name, _), p) in m.config().param_shapes().iter().zip(m.params()) {
            if name.ends_with("gain") {
                assert!(p.data().iter().all(|&x| x == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = ModelConfig { n_heads: 3, ..micro() };
        assert!(matches!(TransformerModel::init(bad), Err(ModelError::Config(_))));
        let zero = ModelConfig { d_ff: 0, ..micro() };
        assert!(matches!(TransformerModel::init(zero), Err(ModelError::Config(_))));
    }

    #[test]
    fn causal_masking_isolates_future() {
        let m = TransformerModel::init(micro()).unwrap();
        let a = [1u32, 5, 9, 3, 7, 2];
        let mut b = a;
        b[3] = 16;
        let (fa, fb) = (m.forward(&a).unwrap(), m.forward(&b).unwrap());
        let v = m.config().vocab_size;
        for pos in 0..a.len() {
            let same = fa.logits.data()[pos * v..(pos + 1) * v] == fb.logits.data()[pos * v..(pos + 1) * v];
            assert_eq!(same, pos < 3, "position {pos}");
        }
    }

    #[test]
    fn trace_matches_external_recomputation() {
        let m = TransformerModel::init(micro()).unwrap();
        let out = m.forward(&[16, 3, 4, 5, 6]).unwrap();
        let (d, ff) = (m.config().d_model, m.config().d_ff);
        for (l, lt) in out.trace.layers.iter().enumerate() {
            let (w, b) = m.detector_weights(l);
            for p in 0..5 {
                let x = lt.ffn_input.row(p);
                for i in 0..ff {
                    let z: f64 = (0..d).map(|j| x[j] * w.data()[j * ff + i]).sum::<f64>() + b.data()[i];
                    assert!((gelu_scalar(z) - lt.selection.row(p)[i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_token_forward() {
        let m = TransformerModel::init(micro()).unwrap();
        let out = m.forward(&[crate::corpus::bpe::BOS % 17]).unwrap();
        assert_eq!(out.logits.shape(), &[1, 17]);
        assert!(out.trace.layers.iter().all(|l| l.selection.shape() == [1, 16]));
    }

    #[test]
    fn overlength_input_is_rejected() {
        let m = TransformerModel::init(micro()).unwrap();
        let ids = vec![1u32; 13];
        assert!(matches!(m.forward(&ids), Err(ModelError::TooLong { len: 13, max: 12 })));
    }

    #[test]
    fn attention_rows_sum_to_one_and_mask_is_exact() {
        let m = TransformerModel::init(micro()).unwrap();
        let out = m.forward(&[1, 2, 3, 4]).unwrap();
        let t = 4;
        for probs in &out.attention {
            for h in 0..2 {
                for i in 0..t {
                    let row = &probs[(h * t + i) * t..(h * t + i + 1) * t];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(row[i + 1..].iter().all(|&x| x == 0.0));
                }
            }
        }
    }

    #[test]
    fn selection_coefficients_respect_gelu_floor() {
        let mut m = TransformerModel::init(micro()).unwrap();
        let mut rng = Rng::new(1);
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v += rng.normal();
            }
        }
        let out = m.forward(&[1, 2, 3, 4, 5, 6, 7]).unwrap();
        for l in &out.trace.layers {
            assert!(l.selection.data().iter().all(|&c| c > -0.2));
        }
    }
}
