//! The three inference modes — zero-shot, in-context, and task-vector — plus
//! greedy generation with per-step task-vector injection.

use thiserror::Error;

use crate::linalg::{softmax_slice, DenseVector, LinalgError, ProbabilityVector};
use crate::model::{forward, ForwardTrace, InjectionSpec, ModelError, Parameters, TokenId};
use crate::tasks::{encode_classification_prompt, DemonstrationSet, TaskError};
use crate::tvx::{TaskVectorMethod, TvxError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModesError {
    #[error("empty label set")]
    EmptyLabelSet,
    #[error("duplicate label token {0}")]
    DuplicateLabel(TokenId),
    #[error("label token {token} out of range for vocab {vocab}")]
    LabelOutOfRange { token: TokenId, vocab: usize },
    #[error("sequence of {len} tokens plus {requested} generated exceeds max_seq_len {max}")]
    GenerationTooLong { len: usize, requested: usize, max: usize },
    #[error(transparent)]
    Method(#[from] TvxError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// One classification prediction: greedy label, the label-restricted
/// distribution (ordered as the task's label set), and the head-input hidden
/// state the LM head consumed.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub label: TokenId,
    pub distribution: ProbabilityVector,
    pub hidden: DenseVector,
}

/// Next-token distribution restricted to the label set: softmax over the
/// gathered label logits, which equals the full softmax renormalized over
/// the labels.
pub fn restricted_distribution(
    logits: &DenseVector,
    labels: &[TokenId],
) -> Result<ProbabilityVector, ModesError> {
    if labels.is_empty() {
        return Err(ModesError::EmptyLabelSet);
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= logits.dim() {
            return Err(ModesError::LabelOutOfRange {
                token: l,
                vocab: logits.dim(),
            });
        }
        if labels[..i].contains(&l) {
            return Err(ModesError::DuplicateLabel(l));
        }
    }
    let gathered: Vec<f64> = labels.iter().map(|&l| logits[l]).collect();
    Ok(softmax_slice(&gathered))
}

/// Greedy label under the restricted distribution; ties break toward the
/// lowest label-token id.
pub fn argmax_label(distribution: &ProbabilityVector, labels: &[TokenId]) -> TokenId {
    let mut best = labels[0];
    let mut best_p = distribution[0];
    for (i, &token) in labels.iter().enumerate().skip(1) {
        let p = distribution[i];
        if p > best_p || (p == best_p && token < best) {
            best = token;
            best_p = p;
        }
    }
    best
}

fn predict_from_trace(
    trace: &ForwardTrace,
    labels: &[TokenId],
) -> Result<Prediction, ModesError> {
    let distribution = restricted_distribution(&trace.last_logits(), labels)?;
    Ok(Prediction {
        label: argmax_label(&distribution, labels),
        distribution,
        hidden: trace.last_hidden(),
    })
}

/// Prediction from the bare `[BOS, x]` prompt with no intervention.
pub fn zero_shot_predict(
    params: &Parameters,
    x: TokenId,
    labels: &[TokenId],
) -> Result<Prediction, ModesError> {
    let prompt = encode_classification_prompt(None, x, params.config.max_seq_len)?;
    let trace = forward(params, &prompt, &InjectionSpec::None)?;
    predict_from_trace(&trace, labels)
}

/// Prediction from the demonstrations prepended to the query.
pub fn icl_predict(
    params: &Parameters,
    demos: &DemonstrationSet,
    x: TokenId,
    labels: &[TokenId],
) -> Result<Prediction, ModesError> {
    let demos = (!demos.is_empty()).then_some(demos);
    let prompt = encode_classification_prompt(demos, x, params.config.max_seq_len)?;
    let trace = forward(params, &prompt, &InjectionSpec::None)?;
    predict_from_trace(&trace, labels)
}

/// Prediction under an extracted task-vector method.
///
/// Additive methods compute their vector from the zero-shot hidden state and
/// re-run the forward pass with an add-final injection, so the stored hidden
/// is exactly `h_zs + v`. The layer-replacement baseline patches its chosen
/// depth. The logit-space method corrects logits directly and leaves the
/// hidden state untouched.
pub fn tv_predict(
    params: &Parameters,
    method: &TaskVectorMethod,
    x: TokenId,
    labels: &[TokenId],
) -> Result<Prediction, ModesError> {
    method.check_model(params)?;
    let prompt = encode_classification_prompt(None, x, params.config.max_seq_len)?;
    match method {
        TaskVectorMethod::LayerReplace(lr) => {
            let trace = forward(
                params,
                &prompt,
                &InjectionSpec::ReplaceAtLayer {
                    layer_index: lr.layer_index,
                    vector: lr.vector.clone(),
                },
            )?;
            predict_from_trace(&trace, labels)
        }
        TaskVectorMethod::LogitLtv(lt) => {
            let trace = forward(params, &prompt, &InjectionSpec::None)?;
            let h_zs = trace.last_hidden();
            let corrected = trace.last_logits().add(&lt.w_tilde.matvec(&h_zs)?);
            let distribution = restricted_distribution(&corrected, labels)?;
            Ok(Prediction {
                label: argmax_label(&distribution, labels),
                distribution,
                hidden: h_zs,
            })
        }
        _ => {
            let zs = forward(params, &prompt, &InjectionSpec::None)?;
            let v = method
                .hidden_shift(&zs.last_hidden())?
                .expect("additive variants define a hidden-space vector");
            let trace = forward(params, &prompt, &InjectionSpec::AddFinal { vector: v })?;
            predict_from_trace(&trace, labels)
        }
    }
}

fn greedy_token(logits: &DenseVector) -> TokenId {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.entries().iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

fn check_budget(params: &Parameters, prompt: &[TokenId], max_new: usize) -> Result<(), ModesError> {
    if prompt.len() + max_new > params.config.max_seq_len {
        return Err(ModesError::GenerationTooLong {
            len: prompt.len(),
            requested: max_new,
            max: params.config.max_seq_len,
        });
    }
    Ok(())
}

/// Plain greedy decoding over the full vocabulary. Appends up to `max_new`
/// tokens, stopping after `stop` is emitted. Returns only the new tokens.
pub fn generate(
    params: &Parameters,
    prompt: &[TokenId],
    max_new: usize,
    stop: Option<TokenId>,
) -> Result<Vec<TokenId>, ModesError> {
    check_budget(params, prompt, max_new)?;
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let trace = forward(params, &tokens, &InjectionSpec::None)?;
        let next = greedy_token(&trace.last_logits());
        tokens.push(next);
        out.push(next);
        if stop == Some(next) {
            break;
        }
    }
    Ok(out)
}

/// Greedy decoding with the linear task vector applied at every step: the
/// last position's zero-shot hidden state is mapped through `W*` and added
/// to the head input before the LM head fires.
pub fn tv_generate(
    params: &Parameters,
    method: &TaskVectorMethod,
    prompt: &[TokenId],
    max_new: usize,
    stop: Option<TokenId>,
) -> Result<Vec<TokenId>, ModesError> {
    let ltv = match method {
        TaskVectorMethod::LtvLinear(ltv) => ltv,
        other => {
            return Err(TvxError::UnsupportedMethod {
                op: "tv_generate",
                method: other.tag(),
            }
            .into())
        }
    };
    method.check_model(params)?;
    check_budget(params, prompt, max_new)?;
    let mut tokens = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new {
        let trace = forward(params, &tokens, &InjectionSpec::None)?;
        let h = trace.last_hidden();
        let shifted = h.add(&ltv.w_star.matvec(&h)?);
        let logits = params.lm_head.matvec(&shifted)?;
        let next = greedy_token(&logits);
        tokens.push(next);
        out.push(next);
        if stop == Some(next) {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{softmax, DenseMatrix};
    use crate::model::{init_parameters, ModelConfig};
    use crate::tasks::{sample_classification_task, sample_demonstrations};
    use crate::tvx::{extract_constant, ExtractionMeta, LtvLinear};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn tiny_params(seed: u64) -> Parameters {
        init_parameters(&ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 48,
            max_seq_len: 32,
            rng_seed: seed,
        })
        .unwrap()
    }

    fn zero_ltv(params: &Parameters) -> TaskVectorMethod {
        TaskVectorMethod::LtvLinear(LtvLinear {
            w_star: DenseMatrix::zeros(8, 8),
            meta: ExtractionMeta::new(params.digest(), 0),
        })
    }

    #[test]
    fn restricted_distribution_known_cases() {
        let logits = DenseVector::new(vec![0.0, 0.0, 5.0, 5.0]).unwrap();
        let p = restricted_distribution(&logits, &[0, 1]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15 && (p[1] - 0.5).abs() < 1e-15);

        // Full vocabulary: equals the plain softmax.
        let full = restricted_distribution(&logits, &[0, 1, 2, 3]).unwrap();
        let plain = softmax(&logits);
        for i in 0..4 {
            assert!((full[i] - plain[i]).abs() < 1e-15);
        }

        let logits = DenseVector::new(vec![2.0f64.ln(), 1.0f64.ln(), 7.0f64.ln()]).unwrap();
        let p = restricted_distribution(&logits, &[0, 1]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn restricted_distribution_rejects_bad_labels() {
        let logits = DenseVector::new(vec![0.0, 1.0, 2.0]).unwrap();
        assert!(matches!(
            restricted_distribution(&logits, &[]),
            Err(ModesError::EmptyLabelSet)
        ));
        assert!(matches!(
            restricted_distribution(&logits, &[0, 0]),
            Err(ModesError::DuplicateLabel(0))
        ));
        assert!(matches!(
            restricted_distribution(&logits, &[3]),
            Err(ModesError::LabelOutOfRange { token: 3, .. })
        ));
    }

    proptest! {
        /// Full-softmax-then-renormalize must agree with restricted-logit
        /// softmax to 1e-12.
        #[test]
        fn restriction_routes_agree(
            raw in proptest::collection::vec(-30.0f64..30.0, 4..12),
            seed in 0u64..1000,
        ) {
            let logits = DenseVector::new(raw.clone()).unwrap();
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            use rand::Rng;
            let k = rng.gen_range(2..=raw.len());
            let mut labels: Vec<TokenId> = (0..raw.len()).collect();
            for i in 0..k {
                let j = rng.gen_range(i..labels.len());
                labels.swap(i, j);
            }
            labels.truncate(k);

            let restricted = restricted_distribution(&logits, &labels).unwrap();
            let full = softmax(&logits);
            let total: f64 = labels.iter().map(|&l| full[l]).sum();
            for (i, &l) in labels.iter().enumerate() {
                let renorm = full[l] / total;
                prop_assert!((restricted[i] - renorm).abs() < 1e-12);
            }
        }

        /// Greedy label is invariant under positive rescaling of the
        /// restricted distribution.
        #[test]
        fn argmax_stable_under_rescaling(
            raw in proptest::collection::vec(-5.0f64..5.0, 3..8),
        ) {
            let logits = DenseVector::new(raw.clone()).unwrap();
            let labels: Vec<TokenId> = (0..raw.len()).collect();
            let dist = restricted_distribution(&logits, &labels).unwrap();
            let base = argmax_label(&dist, &labels);
            // Rescaling the logits by a shift rescales the distribution by a
            // positive factor before renormalization.
            let shifted = DenseVector::new(raw.iter().map(|v| v + 3.7).collect()).unwrap();
            let dist2 = restricted_distribution(&shifted, &labels).unwrap();
            prop_assert_eq!(base, argmax_label(&dist2, &labels));
        }
    }

    #[test]
    fn zero_lm_head_gives_uniform_restricted_distribution() {
        let mut params = tiny_params(1);
        params.lm_head = DenseMatrix::zeros(48, 8);
        let pred = zero_shot_predict(&params, 6, &[1, 2, 3, 4]).unwrap();
        for i in 0..4 {
            assert!((pred.distribution[i] - 0.25).abs() < 1e-12);
        }
        // Exact tie: broken toward the lowest label token id.
        assert_eq!(pred.label, 1);
    }

    #[test]
    fn empty_demonstrations_reduce_icl_to_zero_shot() {
        let params = tiny_params(2);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let task = sample_classification_task(&mut rng, 2, 4, 48).unwrap();
        let empty = sample_demonstrations(&task, 2, &mut rng).unwrap();
        // Build a genuinely empty set by encoding zero demos.
        let x = task.queries()[0];
        let zs = zero_shot_predict(&params, x, task.labels()).unwrap();
        let via_icl = icl_predict(
            &params,
            &crate::tasks::DemonstrationSet::empty_for_tests(),
            x,
            task.labels(),
        )
        .unwrap();
        assert_eq!(zs.distribution.entries(), via_icl.distribution.entries());
        assert_eq!(zs.hidden.entries(), via_icl.hidden.entries());
        assert_eq!(zs.label, via_icl.label);
        // Non-empty demos still produce a well-formed prediction.
        let icl = icl_predict(&params, &empty, x, task.labels()).unwrap();
        let sum: f64 = icl.distribution.entries().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_linear_map_reduces_to_zero_shot() {
        let params = tiny_params(4);
        let method = zero_ltv(&params);
        let labels = [1, 2, 3];
        let tv = tv_predict(&params, &method, 8, &labels).unwrap();
        let zs = zero_shot_predict(&params, 8, &labels).unwrap();
        assert_eq!(tv.label, zs.label);
        assert_eq!(tv.distribution.entries(), zs.distribution.entries());
        assert_eq!(tv.hidden.entries(), zs.hidden.entries());
    }

    #[test]
    fn exact_compensation_reproduces_icl_distribution() {
        let params = tiny_params(5);
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let task = sample_classification_task(&mut rng, 3, 6, 48).unwrap();
        let demos = sample_demonstrations(&task, 6, &mut rng).unwrap();
        let x = task.queries()[1];

        let icl = icl_predict(&params, &demos, x, task.labels()).unwrap();
        let zs = zero_shot_predict(&params, x, task.labels()).unwrap();
        let c = icl.hidden.sub(&zs.hidden);
        let method = extract_constant_fixture(&params, &demos, c);
        let tv = tv_predict(&params, &method, x, task.labels()).unwrap();
        for i in 0..3 {
            assert!((tv.distribution[i] - icl.distribution[i]).abs() < 1e-12);
        }
        // Hidden stored in the prediction is exactly h_zs + v.
        let expect = zs.hidden.add(&c_of(&method));
        assert_eq!(tv.hidden.entries(), expect.entries());
    }

    fn extract_constant_fixture(
        params: &Parameters,
        demos: &crate::tasks::DemonstrationSet,
        c: DenseVector,
    ) -> TaskVectorMethod {
        TaskVectorMethod::ConstantMap(crate::tvx::ConstantMap {
            c,
            meta: ExtractionMeta::new(params.digest(), demos.digest()),
        })
    }

    fn c_of(method: &TaskVectorMethod) -> DenseVector {
        match method {
            TaskVectorMethod::ConstantMap(cm) => cm.c.clone(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn wrong_model_digest_is_rejected() {
        let params = tiny_params(7);
        let method = zero_ltv(&params);
        let mut other = params.clone();
        let old = other.lm_head.get(0, 0);
        other.lm_head.set(0, 0, old + 1.0);
        assert!(matches!(
            tv_predict(&other, &method, 3, &[1, 2]),
            Err(ModesError::Method(TvxError::WrongModel { .. }))
        ));
    }

    #[test]
    fn generation_budget_and_stop_token() {
        let params = tiny_params(8);
        let prompt = vec![0, 3, 5];
        assert!(matches!(
            generate(&params, &prompt, 64, None),
            Err(ModesError::GenerationTooLong { .. })
        ));
        assert_eq!(generate(&params, &prompt, 0, None).unwrap(), vec![]);

        let method = zero_ltv(&params);
        assert_eq!(tv_generate(&params, &method, &prompt, 0, None).unwrap(), vec![]);

        // Zero map: injected generation equals plain greedy generation.
        let plain = generate(&params, &prompt, 8, None).unwrap();
        let injected = tv_generate(&params, &method, &prompt, 8, None).unwrap();
        assert_eq!(plain, injected);

        // Stopping after the first emitted token when it matches stop.
        let first = plain[0];
        let stopped = generate(&params, &prompt, 8, Some(first)).unwrap();
        assert_eq!(stopped, vec![first]);
    }

    #[test]
    fn tv_generate_requires_linear_method() {
        let params = tiny_params(9);
        let demos_rng = &mut ChaCha20Rng::seed_from_u64(1);
        let task = sample_classification_task(demos_rng, 2, 4, 48).unwrap();
        let demos = sample_demonstrations(&task, 2, demos_rng).unwrap();
        let constant = extract_constant(&params, &demos, &task.queries()[..2]).unwrap();
        assert!(matches!(
            tv_generate(&params, &constant, &[0, 1], 4, None),
            Err(ModesError::Method(TvxError::UnsupportedMethod { .. }))
        ));
    }
}
