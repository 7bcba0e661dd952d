//! Tiny decoder-only transformer with hidden-state capture and
//! activation-injection hooks.
//!
//! Architecture: learned token + absolute positional embeddings, pre-norm
//! blocks (`x += Attn(LN1(x))`, `x += FF(LN2(x))`) with GELU feed-forward and
//! causal multi-head attention, a final layer norm, and an untied LM head.
//!
//! Activations are row vectors. Attention and feed-forward weights are stored
//! input×output and multiply on the right (`X · W`); the LM head is stored
//! vocab×d and applies as `X · W_lmᵀ`, matching `logits = W_lm · h` per
//! position.
//!
//! A [`ForwardTrace`] records the residual stream at every depth. Depth 0 is
//! the embedding output, depths `1..n_layers-1` are raw block outputs, and
//! depth `n_layers` is the final-norm output — the exact vector the LM head
//! consumes. All hidden-state capture, injection, and extraction in this
//! crate operate on that head-input representation, so `logits[t] =
//! lm_head · hidden[L][t]` holds exactly and an additive injection shifts the
//! head input by exactly the injected vector.

mod backward;
mod forward;

pub use backward::{backward, TrainingBatch, TrainingSequence};
pub use forward::forward;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::linalg::{DenseMatrix, DenseVector, LinalgError};

/// Token identifier; always `< vocab_size`.
pub type TokenId = usize;

const INIT_STD: f64 = 0.02;
pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(&'static str),
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("injection vector dim {got} does not match d_model {expected}")]
    InjectionDimMismatch { expected: usize, got: usize },
    #[error("layer {layer} out of range (model has {max} layers)")]
    LayerOutOfRange { layer: usize, max: usize },
    #[error("empty training batch")]
    EmptyBatch,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Shape and seed of a toy transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rng_seed: u64,
}

impl ModelConfig {
    /// The reference "small" shape: 2 layers, d=64, 4 heads, ff=256.
    pub fn small(rng_seed: u64) -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 64,
            max_seq_len: 128,
            rng_seed,
        }
    }

    /// The reference "large" shape: 4 layers, d=128, 4 heads, ff=512.
    pub fn large(rng_seed: u64) -> Self {
        Self {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size: 64,
            max_seq_len: 128,
            rng_seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(ModelError::InvalidConfig("zero-sized dimension"));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig("d_model not divisible by n_heads"));
        }
        if self.vocab_size < 2 {
            return Err(ModelError::InvalidConfig("vocab_size must be at least 2"));
        }
        if self.max_seq_len < 2 {
            return Err(ModelError::InvalidConfig("max_seq_len must be at least 2"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Per-layer weights. Layer norms store (gain, bias) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: DenseVector,
    pub ln1_bias: DenseVector,
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
    pub w_o: DenseMatrix,
    pub ln2_gain: DenseVector,
    pub ln2_bias: DenseVector,
    pub w_ff1: DenseMatrix,
    pub w_ff2: DenseMatrix,
}

/// Full weight set of one model, including its generating config.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    pub config: ModelConfig,
    pub token_embedding: DenseMatrix,
    pub positional_embedding: DenseMatrix,
    pub layers: Vec<LayerParams>,
    pub final_gain: DenseVector,
    pub final_bias: DenseVector,
    pub lm_head: DenseMatrix,
}

/// Hidden-state intervention applied during a forward pass.
///
/// `AddFinal` adds the vector to the head-input representation of the last
/// position. `ReplaceAtLayer { layer_index }` overwrites the trace entry at
/// depth `layer_index + 1` for the last position before anything downstream
/// of it runs; `layer_index` is zero-based and must be `< n_layers`, so the
/// deepest choice replaces the head input itself.
#[derive(Debug, Clone, PartialEq)]
pub enum InjectionSpec {
    None,
    AddFinal { vector: DenseVector },
    ReplaceAtLayer { layer_index: usize, vector: DenseVector },
}

impl InjectionSpec {
    pub(crate) fn validate(&self, config: &ModelConfig) -> Result<(), ModelError> {
        match self {
            InjectionSpec::None => Ok(()),
            InjectionSpec::AddFinal { vector } => {
                if vector.dim() != config.d_model {
                    return Err(ModelError::InjectionDimMismatch {
                        expected: config.d_model,
                        got: vector.dim(),
                    });
                }
                Ok(())
            }
            InjectionSpec::ReplaceAtLayer { layer_index, vector } => {
                if vector.dim() != config.d_model {
                    return Err(ModelError::InjectionDimMismatch {
                        expected: config.d_model,
                        got: vector.dim(),
                    });
                }
                if *layer_index >= config.n_layers {
                    return Err(ModelError::LayerOutOfRange {
                        layer: *layer_index,
                        max: config.n_layers,
                    });
                }
                Ok(())
            }
        }
    }
}

/// Residual-stream record of one forward pass.
///
/// `hidden_by_layer` has `n_layers + 1` entries of shape seq×d: depth 0 is
/// the embedding output and depth `n_layers` is the head input (post final
/// norm, with any injection applied). `logits` is seq×vocab and satisfies
/// `logits[t] = lm_head · hidden_by_layer[n_layers][t]` exactly.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub seq_len: usize,
    pub hidden_by_layer: Vec<DenseMatrix>,
    pub logits: DenseMatrix,
}

impl ForwardTrace {
    pub fn hidden_at(&self, layer: usize, pos: usize) -> DenseVector {
        DenseVector::new(self.hidden_by_layer[layer].row(pos).to_vec()).expect("trace finite")
    }

    /// Head-input hidden state of the last position.
    pub fn last_hidden(&self) -> DenseVector {
        self.hidden_at(self.hidden_by_layer.len() - 1, self.seq_len - 1)
    }

    pub fn logits_at(&self, pos: usize) -> DenseVector {
        DenseVector::new(self.logits.row(pos).to_vec()).expect("trace finite")
    }

    pub fn last_logits(&self) -> DenseVector {
        self.logits_at(self.seq_len - 1)
    }
}

/// Samples fresh weights: Gaussian with standard deviation 0.02 for all
/// matrices, gains 1 and biases 0 for the layer norms. Deterministic given
/// `config.rng_seed`.
pub fn init_parameters(config: &ModelConfig) -> Result<Parameters, ModelError> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.rng_seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut sample = |rows: usize, cols: usize| -> DenseMatrix {
        DenseMatrix::from_raw(
            rows,
            cols,
            (0..rows * cols).map(|_| normal.sample(&mut rng)).collect(),
        )
    };

    let d = config.d_model;
    let token_embedding = sample(config.vocab_size, d);
    let positional_embedding = sample(config.max_seq_len, d);
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln1_gain: ones(d),
            ln1_bias: DenseVector::zeros(d),
            w_q: sample(d, d),
            w_k: sample(d, d),
            w_v: sample(d, d),
            w_o: sample(d, d),
            ln2_gain: ones(d),
            ln2_bias: DenseVector::zeros(d),
            w_ff1: sample(d, config.d_ff),
            w_ff2: sample(config.d_ff, d),
        })
        .collect();
    let lm_head = sample(config.vocab_size, d);

    Ok(Parameters {
        config: *config,
        token_embedding,
        positional_embedding,
        layers,
        final_gain: ones(d),
        final_bias: DenseVector::zeros(d),
        lm_head,
    })
}

fn ones(d: usize) -> DenseVector {
    DenseVector::new(vec![1.0; d]).expect("finite")
}

/// Returns the hidden state at trace depth `layer` for the last position of
/// `tokens`, exactly as a [`ForwardTrace`] stores it.
pub fn capture_hidden(
    params: &Parameters,
    tokens: &[TokenId],
    layer: usize,
) -> Result<DenseVector, ModelError> {
    if layer > params.config.n_layers {
        return Err(ModelError::LayerOutOfRange {
            layer,
            max: params.config.n_layers,
        });
    }
    let trace = forward(params, tokens, &InjectionSpec::None)?;
    Ok(trace.hidden_at(layer, trace.seq_len - 1))
}

impl Parameters {
    /// Zero-filled gradient/moment buffers with the same shapes.
    pub fn zeros_like(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let zero_layer = || LayerParams {
            ln1_gain: DenseVector::zeros(d),
            ln1_bias: DenseVector::zeros(d),
            w_q: DenseMatrix::zeros(d, d),
            w_k: DenseMatrix::zeros(d, d),
            w_v: DenseMatrix::zeros(d, d),
            w_o: DenseMatrix::zeros(d, d),
            ln2_gain: DenseVector::zeros(d),
            ln2_bias: DenseVector::zeros(d),
            w_ff1: DenseMatrix::zeros(d, config.d_ff),
            w_ff2: DenseMatrix::zeros(config.d_ff, d),
        };
        Parameters {
            config: *config,
            token_embedding: DenseMatrix::zeros(config.vocab_size, d),
            positional_embedding: DenseMatrix::zeros(config.max_seq_len, d),
            layers: (0..config.n_layers).map(|_| zero_layer()).collect(),
            final_gain: DenseVector::zeros(d),
            final_bias: DenseVector::zeros(d),
            lm_head: DenseMatrix::zeros(config.vocab_size, d),
        }
    }

    /// All tensors in canonical order, named for serialization.
    pub fn named_tensors(&self) -> Vec<(String, TensorView<'_>)> {
        let mut out: Vec<(String, TensorView<'_>)> = vec![
            ("token_embedding".into(), TensorView::Matrix(&self.token_embedding)),
            (
                "positional_embedding".into(),
                TensorView::Matrix(&self.positional_embedding),
            ),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.ln1_gain"), TensorView::Vector(&layer.ln1_gain)));
            out.push((format!("layer{i}.ln1_bias"), TensorView::Vector(&layer.ln1_bias)));
            out.push((format!("layer{i}.w_q"), TensorView::Matrix(&layer.w_q)));
            out.push((format!("layer{i}.w_k"), TensorView::Matrix(&layer.w_k)));
            out.push((format!("layer{i}.w_v"), TensorView::Matrix(&layer.w_v)));
            out.push((format!("layer{i}.w_o"), TensorView::Matrix(&layer.w_o)));
            out.push((format!("layer{i}.ln2_gain"), TensorView::Vector(&layer.ln2_gain)));
            out.push((format!("layer{i}.ln2_bias"), TensorView::Vector(&layer.ln2_bias)));
            out.push((format!("layer{i}.w_ff1"), TensorView::Matrix(&layer.w_ff1)));
            out.push((format!("layer{i}.w_ff2"), TensorView::Matrix(&layer.w_ff2)));
        }
        out.push(("final_gain".into(), TensorView::Vector(&self.final_gain)));
        out.push(("final_bias".into(), TensorView::Vector(&self.final_bias)));
        out.push(("lm_head".into(), TensorView::Matrix(&self.lm_head)));
        out
    }

    /// Mutable entry slices in the same canonical order as
    /// [`Parameters::named_tensors`]; used by the optimizer to walk
    /// (params, grads, moments) in lock step.
    pub fn tensor_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.token_embedding.entries_mut(),
            self.positional_embedding.entries_mut(),
        ];
        for layer in &mut self.layers {
            out.push(layer.ln1_gain.entries_mut());
            out.push(layer.ln1_bias.entries_mut());
            out.push(layer.w_q.entries_mut());
            out.push(layer.w_k.entries_mut());
            out.push(layer.w_v.entries_mut());
            out.push(layer.w_o.entries_mut());
            out.push(layer.ln2_gain.entries_mut());
            out.push(layer.ln2_bias.entries_mut());
            out.push(layer.w_ff1.entries_mut());
            out.push(layer.w_ff2.entries_mut());
        }
        out.push(self.final_gain.entries_mut());
        out.push(self.final_bias.entries_mut());
        out.push(self.lm_head.entries_mut());
        out
    }

    pub fn tensor_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.token_embedding.entries(),
            self.positional_embedding.entries(),
        ];
        for layer in &self.layers {
            out.push(layer.ln1_gain.entries());
            out.push(layer.ln1_bias.entries());
            out.push(layer.w_q.entries());
            out.push(layer.w_k.entries());
            out.push(layer.w_v.entries());
            out.push(layer.w_o.entries());
            out.push(layer.ln2_gain.entries());
            out.push(layer.ln2_bias.entries());
            out.push(layer.w_ff1.entries());
            out.push(layer.w_ff2.entries());
        }
        out.push(self.final_gain.entries());
        out.push(self.final_bias.entries());
        out.push(self.lm_head.entries());
        out
    }

    /// FNV-1a digest over the config and every tensor entry, used to pair
    /// extracted methods with the exact model they came from.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        for v in [
            self.config.n_layers as u64,
            self.config.d_model as u64,
            self.config.n_heads as u64,
            self.config.d_ff as u64,
            self.config.vocab_size as u64,
            self.config.max_seq_len as u64,
            self.config.rng_seed,
        ] {
            h.write_u64(v);
        }
        for slice in self.tensor_slices() {
            for &x in slice {
                h.write_u64(x.to_bits());
            }
        }
        h.finish()
    }
}

/// True when two parameter sets have identical tensor shapes, so they can
/// be walked in lock step by the optimizer.
pub fn adam_compatible(a: &Parameters, b: &Parameters) -> bool {
    let ac = &a.config;
    let bc = &b.config;
    ac.n_layers == bc.n_layers
        && ac.d_model == bc.d_model
        && ac.d_ff == bc.d_ff
        && ac.vocab_size == bc.vocab_size
        && ac.max_seq_len == bc.max_seq_len
}

/// Borrowed view of a named tensor for serialization.
#[derive(Debug, Clone, Copy)]
pub enum TensorView<'a> {
    Matrix(&'a DenseMatrix),
    Vector(&'a DenseVector),
}

impl TensorView<'_> {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            TensorView::Matrix(m) => (m.rows(), m.cols()),
            TensorView::Vector(v) => (1, v.dim()),
        }
    }

    pub fn entries(&self) -> &[f64] {
        match self {
            TensorView::Matrix(m) => m.entries(),
            TensorView::Vector(v) => v.entries(),
        }
    }
}

/// Minimal FNV-1a 64 hasher; stable across platforms and runs.
pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }

    pub(crate) fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub(crate) fn write_bytes(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}
