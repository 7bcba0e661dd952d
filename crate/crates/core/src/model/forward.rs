//! Forward pass: causal multi-head attention, pre-norm blocks, GELU
//! feed-forward, final norm, LM head, plus the injection hooks.

use crate::linalg::{DenseMatrix, DenseVector};

use super::{ForwardTrace, InjectionSpec, ModelError, Parameters, TokenId, LN_EPS};

const GELU_C: f64 = 0.7978845608028654; // sqrt(2/π)
const GELU_A: f64 = 0.044715;

pub(crate) struct LnCache {
    /// Normalized pre-gain activations x̂.
    pub normed: DenseMatrix,
    /// gain ⊙ x̂ + bias.
    pub out: DenseMatrix,
    pub inv_std: Vec<f64>,
}

pub(crate) struct LayerCache {
    pub ln1: LnCache,
    pub q: DenseMatrix,
    pub k: DenseMatrix,
    pub v: DenseMatrix,
    /// Per-head causal attention probabilities, seq×seq.
    pub probs: Vec<DenseMatrix>,
    pub att_concat: DenseMatrix,
    pub x_mid: DenseMatrix,
    pub ln2: LnCache,
    pub ff_pre: DenseMatrix,
    pub ff_act: DenseMatrix,
}

pub(crate) struct ForwardCache {
    pub layers: Vec<LayerCache>,
    pub final_ln: LnCache,
}

/// Runs the model over `tokens` with the given injection.
///
/// `AddFinal` adds its vector to the last position of the head input (trace
/// depth `n_layers`); `ReplaceAtLayer { layer_index }` overwrites the trace
/// entry at depth `layer_index + 1` for the last position before anything
/// downstream runs.
pub fn forward(
    params: &Parameters,
    tokens: &[TokenId],
    injection: &InjectionSpec,
) -> Result<ForwardTrace, ModelError> {
    let (trace, _) = forward_impl(params, tokens, injection, false)?;
    Ok(trace)
}

pub(crate) fn forward_impl(
    params: &Parameters,
    tokens: &[TokenId],
    injection: &InjectionSpec,
    want_cache: bool,
) -> Result<(ForwardTrace, Option<ForwardCache>), ModelError> {
    let config = &params.config;
    let seq = tokens.len();
    if seq == 0 {
        return Err(ModelError::EmptySequence);
    }
    if seq > config.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: seq,
            max: config.max_seq_len,
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(ModelError::TokenOutOfRange {
            token: bad,
            vocab: config.vocab_size,
        });
    }
    injection.validate(config)?;

    let d = config.d_model;
    let n_layers = config.n_layers;
    let heads = config.n_heads;
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let replace = match injection {
        InjectionSpec::ReplaceAtLayer { layer_index, vector } => Some((layer_index + 1, vector)),
        _ => None,
    };

    // Embedding: token + absolute position.
    let mut x = DenseMatrix::zeros(seq, d);
    for t in 0..seq {
        let tok = params.token_embedding.row(tokens[t]);
        let pos = params.positional_embedding.row(t);
        for (o, (a, b)) in x.row_mut(t).iter_mut().zip(tok.iter().zip(pos)) {
            *o = a + b;
        }
    }

    let mut hidden_by_layer = Vec::with_capacity(n_layers + 1);
    hidden_by_layer.push(x.clone());
    let mut layer_caches = Vec::new();

    for (li, layer) in params.layers.iter().enumerate() {
        let ln1 = layer_norm(&x, &layer.ln1_gain, &layer.ln1_bias);
        let q = ln1.out.matmul(&layer.w_q)?;
        let k = ln1.out.matmul(&layer.w_k)?;
        let v = ln1.out.matmul(&layer.w_v)?;

        let mut att_concat = DenseMatrix::zeros(seq, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = head_cols(&q, h, dh);
            let kh = head_cols(&k, h, dh);
            let vh = head_cols(&v, h, dh);
            let mut s = qh.matmul_nt(&kh)?.scale(scale);
            causal_row_softmax(&mut s);
            let oh = s.matmul(&vh)?;
            write_head_cols(&mut att_concat, &oh, h, dh);
            if want_cache {
                probs.push(s);
            }
        }
        let att_out = att_concat.matmul(&layer.w_o)?;
        let x_mid = x.add(&att_out)?;

        let ln2 = layer_norm(&x_mid, &layer.ln2_gain, &layer.ln2_bias);
        let ff_pre = ln2.out.matmul(&layer.w_ff1)?;
        let ff_act = gelu(&ff_pre);
        let ff_out = ff_act.matmul(&layer.w_ff2)?;
        let mut x_next = x_mid.add(&ff_out)?;

        // Depths 1..n_layers-1 are raw block outputs; replacement at one of
        // those depths takes effect before the next block runs.
        let depth = li + 1;
        if depth < n_layers {
            if let Some((rd, vec)) = replace {
                if rd == depth {
                    x_next.row_mut(seq - 1).copy_from_slice(vec.entries());
                }
            }
            hidden_by_layer.push(x_next.clone());
        }

        if want_cache {
            layer_caches.push(LayerCache {
                ln1,
                q,
                k,
                v,
                probs,
                att_concat,
                x_mid,
                ln2,
                ff_pre,
                ff_act,
            });
        }
        x = x_next;
    }

    // Depth n_layers is the head input: final norm applied, then injection.
    let final_ln = layer_norm(&x, &params.final_gain, &params.final_bias);
    let mut head = final_ln.out.clone();
    match injection {
        InjectionSpec::AddFinal { vector } => {
            for (o, a) in head.row_mut(seq - 1).iter_mut().zip(vector.entries()) {
                *o += a;
            }
        }
        InjectionSpec::ReplaceAtLayer { layer_index, vector } if layer_index + 1 == n_layers => {
            head.row_mut(seq - 1).copy_from_slice(vector.entries());
        }
        _ => {}
    }
    hidden_by_layer.push(head.clone());

    let logits = head.matmul_nt(&params.lm_head)?;

    let trace = ForwardTrace {
        seq_len: seq,
        hidden_by_layer,
        logits,
    };
    let cache = want_cache.then_some(ForwardCache {
        layers: layer_caches,
        final_ln,
    });
    Ok((trace, cache))
}

pub(crate) fn layer_norm(x: &DenseMatrix, gain: &DenseVector, bias: &DenseVector) -> LnCache {
    let (rows, cols) = (x.rows(), x.cols());
    let mut normed = DenseMatrix::zeros(rows, cols);
    let mut out = DenseMatrix::zeros(rows, cols);
    let mut inv_stds = Vec::with_capacity(rows);
    let inv_d = 1.0 / cols as f64;
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() * inv_d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_d;
        let inv_std = 1.0 / (var + LN_EPS).sqrt();
        inv_stds.push(inv_std);
        let nr = normed.row_mut(i);
        for (j, &v) in row.iter().enumerate() {
            nr[j] = (v - mean) * inv_std;
        }
        let or = out.row_mut(i);
        for j in 0..cols {
            or[j] = gain[j] * normed.get(i, j) + bias[j];
        }
    }
    LnCache {
        normed,
        out,
        inv_std: inv_stds,
    }
}

/// Copies the columns of head `h` (width `dh`) into a seq×dh matrix.
pub(crate) fn head_cols(m: &DenseMatrix, h: usize, dh: usize) -> DenseMatrix {
    let seq = m.rows();
    let mut out = DenseMatrix::zeros(seq, dh);
    for i in 0..seq {
        out.row_mut(i).copy_from_slice(&m.row(i)[h * dh..(h + 1) * dh]);
    }
    out
}

pub(crate) fn write_head_cols(dst: &mut DenseMatrix, src: &DenseMatrix, h: usize, dh: usize) {
    for i in 0..src.rows() {
        dst.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(src.row(i));
    }
}

pub(crate) fn add_head_cols(dst: &mut DenseMatrix, src: &DenseMatrix, h: usize, dh: usize) {
    for i in 0..src.rows() {
        for (o, a) in dst.row_mut(i)[h * dh..(h + 1) * dh].iter_mut().zip(src.row(i)) {
            *o += a;
        }
    }
}

/// Row-wise causally masked softmax: row `i` normalizes entries `0..=i` and
/// zeroes the rest.
fn causal_row_softmax(s: &mut DenseMatrix) {
    let n = s.rows();
    for i in 0..n {
        let row = s.row_mut(i);
        let visible = &mut row[..=i];
        let max = visible.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in visible.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in visible.iter_mut() {
            *v /= sum;
        }
        for v in &mut row[i + 1..] {
            *v = 0.0;
        }
    }
}

pub(crate) fn gelu(x: &DenseMatrix) -> DenseMatrix {
    let data = x
        .entries()
        .iter()
        .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
        .collect();
    DenseMatrix::from_raw(x.rows(), x.cols(), data)
}

pub(crate) fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
