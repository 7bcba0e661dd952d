//! Manual backpropagation of mean next-token cross-entropy at designated
//! target positions.

use crate::linalg::{softmax_slice, DenseMatrix};

use super::forward::{add_head_cols, forward_impl, gelu_derivative, head_cols, LnCache};
use super::{InjectionSpec, ModelError, Parameters, TokenId};

/// One prompt plus its supervision: `targets` pairs a position with the
/// token the logits at that position must predict.
#[derive(Debug, Clone)]
pub struct TrainingSequence {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<(usize, TokenId)>,
}

#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub sequences: Vec<TrainingSequence>,
}

/// Computes gradients of the mean cross-entropy over every target in the
/// batch. Returns a gradient set shaped like [`Parameters`] together with
/// the loss value. Deterministic: sequences are processed in order and
/// reduced by summation.
pub fn backward(params: &Parameters, batch: &TrainingBatch) -> Result<(Parameters, f64), ModelError> {
    if batch.sequences.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    let total: usize = batch.sequences.iter().map(|s| s.targets.len()).sum();
    if total == 0 {
        return Err(ModelError::EmptyBatch);
    }
    for seq in &batch.sequences {
        for &(pos, label) in &seq.targets {
            if pos >= seq.tokens.len() {
                return Err(ModelError::SequenceTooLong {
                    len: pos,
                    max: seq.tokens.len(),
                });
            }
            if label >= params.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    token: label,
                    vocab: params.config.vocab_size,
                });
            }
        }
    }

    let inv_total = 1.0 / total as f64;
    let mut grads = Parameters::zeros_like(&params.config);
    let mut loss_sum = 0.0;
    for seq in &batch.sequences {
        loss_sum += backprop_sequence(params, seq, inv_total, &mut grads)?;
    }
    Ok((grads, loss_sum * inv_total))
}

fn backprop_sequence(
    params: &Parameters,
    seq: &TrainingSequence,
    inv_total: f64,
    grads: &mut Parameters,
) -> Result<f64, ModelError> {
    let (trace, cache) = forward_impl(params, &seq.tokens, &InjectionSpec::None, true)?;
    let cache = cache.expect("cache requested");
    let len = trace.seq_len;
    let vocab = params.config.vocab_size;
    let d = params.config.d_model;
    let heads = params.config.n_heads;
    let dh = params.config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    // Cross-entropy and dL/dlogits, already scaled by 1/total.
    let mut loss = 0.0;
    let mut dlogits = DenseMatrix::zeros(len, vocab);
    for &(pos, label) in &seq.targets {
        let probs = softmax_slice(trace.logits.row(pos));
        loss += -probs[label].max(1e-300).ln();
        let row = dlogits.row_mut(pos);
        for j in 0..vocab {
            row[j] += (probs[j] - if j == label { 1.0 } else { 0.0 }) * inv_total;
        }
    }

    // LM head: logits = head · W_lmᵀ.
    let head = &cache.final_ln.out;
    grads.lm_head.axpy(1.0, &dlogits.matmul_tn(head)?);
    let d_head = dlogits.matmul(&params.lm_head)?;

    // Final layer norm.
    let mut dx = ln_backward(
        &d_head,
        &cache.final_ln,
        params.final_gain.entries(),
        grads.final_gain.entries_mut(),
        grads.final_bias.entries_mut(),
    );

    for li in (0..params.config.n_layers).rev() {
        let layer = &params.layers[li];
        let lg = &mut grads.layers[li];
        let lc = &cache.layers[li];

        // x_out = x_mid + ff_act · W_ff2
        let d_ff_out = &dx;
        lg.w_ff2.axpy(1.0, &lc.ff_act.matmul_tn(d_ff_out)?);
        let d_ff_act = d_ff_out.matmul_nt(&layer.w_ff2)?;
        let mut d_ff_pre = d_ff_act;
        for (g, &pre) in d_ff_pre
            .entries_mut()
            .iter_mut()
            .zip(lc.ff_pre.entries())
        {
            *g *= gelu_derivative(pre);
        }
        lg.w_ff1.axpy(1.0, &lc.ln2.out.matmul_tn(&d_ff_pre)?);
        let d_ln2_out = d_ff_pre.matmul_nt(&layer.w_ff1)?;
        let d_from_ln2 = ln_backward(
            &d_ln2_out,
            &lc.ln2,
            layer.ln2_gain.entries(),
            lg.ln2_gain.entries_mut(),
            lg.ln2_bias.entries_mut(),
        );
        // x_mid receives the residual plus the FF branch.
        let mut d_x_mid = dx;
        d_x_mid.axpy(1.0, &d_from_ln2);

        // x_mid = x + att_concat · W_o
        let d_att_out = &d_x_mid;
        lg.w_o.axpy(1.0, &lc.att_concat.matmul_tn(d_att_out)?);
        let d_concat = d_att_out.matmul_nt(&layer.w_o)?;

        let mut d_q = DenseMatrix::zeros(len, d);
        let mut d_k = DenseMatrix::zeros(len, d);
        let mut d_v = DenseMatrix::zeros(len, d);
        for h in 0..heads {
            let p = &lc.probs[h];
            let d_oh = head_cols(&d_concat, h, dh);
            let vh = head_cols(&lc.v, h, dh);
            let kh = head_cols(&lc.k, h, dh);
            let qh = head_cols(&lc.q, h, dh);

            // oh = p · vh
            let d_p = d_oh.matmul_nt(&vh)?;
            let d_vh = p.matmul_tn(&d_oh)?;

            // Softmax backward per row; masked entries have p = 0 and drop out.
            let mut d_s = DenseMatrix::zeros(len, len);
            for i in 0..len {
                let p_row = p.row(i);
                let dp_row = d_p.row(i);
                let rowdot: f64 = p_row.iter().zip(dp_row).map(|(a, b)| a * b).sum();
                let ds_row = d_s.row_mut(i);
                for j in 0..=i {
                    ds_row[j] = p_row[j] * (dp_row[j] - rowdot) * scale;
                }
            }

            let d_qh = d_s.matmul(&kh)?;
            let d_kh = d_s.matmul_tn(&qh)?;
            add_head_cols(&mut d_q, &d_qh, h, dh);
            add_head_cols(&mut d_k, &d_kh, h, dh);
            add_head_cols(&mut d_v, &d_vh, h, dh);
        }

        lg.w_q.axpy(1.0, &lc.ln1.out.matmul_tn(&d_q)?);
        lg.w_k.axpy(1.0, &lc.ln1.out.matmul_tn(&d_k)?);
        lg.w_v.axpy(1.0, &lc.ln1.out.matmul_tn(&d_v)?);
        let mut d_ln1_out = d_q.matmul_nt(&layer.w_q)?;
        d_ln1_out.axpy(1.0, &d_k.matmul_nt(&layer.w_k)?);
        d_ln1_out.axpy(1.0, &d_v.matmul_nt(&layer.w_v)?);
        let d_from_ln1 = ln_backward(
            &d_ln1_out,
            &lc.ln1,
            layer.ln1_gain.entries(),
            lg.ln1_gain.entries_mut(),
            lg.ln1_bias.entries_mut(),
        );
        dx = d_x_mid;
        dx.axpy(1.0, &d_from_ln1);
    }

    // Embeddings.
    for t in 0..len {
        let row = dx.row(t).to_vec();
        for (o, g) in grads
            .token_embedding
            .row_mut(seq.tokens[t])
            .iter_mut()
            .zip(&row)
        {
            *o += g;
        }
        for (o, g) in grads.positional_embedding.row_mut(t).iter_mut().zip(&row) {
            *o += g;
        }
    }

    Ok(loss)
}

/// Layer-norm backward for a whole seq×d slab. Accumulates gain/bias
/// gradients and returns dL/dx.
fn ln_backward(
    d_out: &DenseMatrix,
    cache: &LnCache,
    gain: &[f64],
    d_gain: &mut [f64],
    d_bias: &mut [f64],
) -> DenseMatrix {
    let (rows, cols) = (d_out.rows(), d_out.cols());
    let inv_d = 1.0 / cols as f64;
    let mut dx = DenseMatrix::zeros(rows, cols);
    for i in 0..rows {
        let dout_row = d_out.row(i);
        let normed_row = cache.normed.row(i);
        let inv_std = cache.inv_std[i];
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..cols {
            d_gain[j] += dout_row[j] * normed_row[j];
            d_bias[j] += dout_row[j];
            let dn = dout_row[j] * gain[j];
            m1 += dn;
            m2 += dn * normed_row[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let dx_row = dx.row_mut(i);
        for j in 0..cols {
            let dn = dout_row[j] * gain[j];
            dx_row[j] = inv_std * (dn - m1 - normed_row[j] * m2);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::DenseVector;
    use crate::model::{forward, init_parameters, ModelConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 10,
            max_seq_len: 12,
            rng_seed: seed,
        }
    }

    fn sample_batch() -> TrainingBatch {
        TrainingBatch {
            sequences: vec![
                TrainingSequence {
                    tokens: vec![0, 3, 1, 4, 1, 5],
                    targets: vec![(1, 1), (3, 1), (5, 9)],
                },
                TrainingSequence {
                    tokens: vec![0, 7, 2, 7, 2],
                    targets: vec![(1, 2), (3, 2)],
                },
            ],
        }
    }

    fn batch_loss(params: &Parameters, batch: &TrainingBatch) -> f64 {
        let mut loss = 0.0;
        let mut count = 0usize;
        for seq in &batch.sequences {
            let trace = forward(params, &seq.tokens, &InjectionSpec::None).unwrap();
            for &(pos, label) in &seq.targets {
                let p = softmax_slice(trace.logits.row(pos));
                loss += -p[label].ln();
                count += 1;
            }
        }
        loss / count as f64
    }

    /// Central finite difference on one scalar coordinate.
    fn fd_grad(
        params: &Parameters,
        batch: &TrainingBatch,
        tensor: usize,
        idx: usize,
        step: f64,
    ) -> f64 {
        let mut plus = params.clone();
        plus.tensor_slices_mut()[tensor][idx] += step;
        let mut minus = params.clone();
        minus.tensor_slices_mut()[tensor][idx] -= step;
        (batch_loss(&plus, batch) - batch_loss(&minus, batch)) / (2.0 * step)
    }

    #[test]
    fn lm_head_gradient_matches_finite_difference_from_zero_head() {
        let config = tiny_config(11);
        let mut params = init_parameters(&config).unwrap();
        // Zero LM head gives exactly uniform logits.
        params.lm_head = DenseMatrix::zeros(config.vocab_size, config.d_model);
        let batch = sample_batch();
        let (grads, _) = backward(&params, &batch).unwrap();
        let slices = grads.tensor_slices();
        let lm_head_idx = slices.len() - 1;
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for _ in 0..20 {
            let idx = rng.gen_range(0..config.vocab_size * config.d_model);
            let analytic = slices[lm_head_idx][idx];
            let numeric = fd_grad(&params, &batch, lm_head_idx, idx, 1e-5);
            let rel = (analytic - numeric).abs() / (analytic.abs() + 1e-8);
            assert!(rel < 1e-4, "lm_head[{idx}]: analytic {analytic}, fd {numeric}");
        }
    }

    #[test]
    fn gradients_match_finite_differences_across_tensors() {
        let config = tiny_config(13);
        let params = init_parameters(&config).unwrap();
        let batch = sample_batch();
        let (grads, loss) = backward(&params, &batch).unwrap();
        assert!(loss.is_finite());

        let grad_slices = grads.tensor_slices();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        // A couple of random coordinates from every tensor in the model.
        for tensor in 0..grad_slices.len() {
            let n = grad_slices[tensor].len();
            for _ in 0..3 {
                let idx = rng.gen_range(0..n);
                let analytic = grad_slices[tensor][idx];
                let numeric = fd_grad(&params, &batch, tensor, idx, 1e-5);
                let rel = (analytic - numeric).abs() / (analytic.abs() + 1e-8);
                assert!(
                    rel < 1e-4,
                    "tensor {tensor} idx {idx}: analytic {analytic}, fd {numeric}, rel {rel}"
                );
            }
        }
    }

    #[test]
    fn duplicated_example_equals_single_example_gradient() {
        let config = tiny_config(17);
        let params = init_parameters(&config).unwrap();
        let seq = TrainingSequence {
            tokens: vec![0, 3, 1, 4],
            targets: vec![(1, 1), (3, 5)],
        };
        let single = TrainingBatch {
            sequences: vec![seq.clone()],
        };
        let doubled = TrainingBatch {
            sequences: vec![seq.clone(), seq],
        };
        let (g1, l1) = backward(&params, &single).unwrap();
        let (g2, l2) = backward(&params, &doubled).unwrap();
        assert!((l1 - l2).abs() < 1e-15);
        for (a, b) in g1.tensor_slices().iter().zip(g2.tensor_slices().iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((x - y).abs() <= 1e-15, "mean reduction mismatch: {x} vs {y}");
            }
        }
    }

    #[test]
    fn backward_rejects_empty_batches() {
        let params = init_parameters(&tiny_config(19)).unwrap();
        assert!(matches!(
            backward(&params, &TrainingBatch { sequences: vec![] }),
            Err(ModelError::EmptyBatch)
        ));
        let no_targets = TrainingBatch {
            sequences: vec![TrainingSequence {
                tokens: vec![0, 1],
                targets: vec![],
            }],
        };
        assert!(matches!(
            backward(&params, &no_targets),
            Err(ModelError::EmptyBatch)
        ));
    }

    #[test]
    fn injected_vector_is_plumbing_only_for_inference() {
        // Training never injects; a forward with AddFinal still produces the
        // same earlier-position logits used in the loss.
        let params = init_parameters(&tiny_config(23)).unwrap();
        let tokens = vec![0, 2, 4];
        let a = forward(&params, &tokens, &InjectionSpec::None).unwrap();
        let b = forward(
            &params,
            &tokens,
            &InjectionSpec::AddFinal {
                vector: DenseVector::new(vec![0.5; 8]).unwrap(),
            },
        )
        .unwrap();
        assert_eq!(a.logits.row(0), b.logits.row(0));
        assert_eq!(a.logits.row(1), b.logits.row(1));
        assert_ne!(a.logits.row(2), b.logits.row(2));
    }
}
