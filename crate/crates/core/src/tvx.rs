//! Task-vector extraction.
//!
//! The linear method fits, by closed-form ridge regression, a map `W*` from
//! the zero-shot hidden state to the demonstration-induced hidden shift
//! `h_icl − h_zs`. Baselines: the constant mapping (empirical mean shift),
//! the layer-replacement vector with validation-selected depth, a 2-layer
//! ReLU mapping trained on the same objective, and the logit-space variant
//! that transfers across models sharing a vocabulary.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::linalg::{ridge_solve, DenseMatrix, DenseVector, LinalgError};
use crate::model::{forward, InjectionSpec, ModelError, Parameters, TokenId};
use crate::modes::{argmax_label, restricted_distribution};
use crate::tasks::{encode_classification_prompt, DemonstrationSet, TaskError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TvxError {
    #[error("no extraction queries supplied")]
    EmptyQueries,
    #[error("empty validation set")]
    EmptyValidation,
    #[error("too few shots: demonstrations are empty")]
    TooFewShots,
    #[error("vocabulary mismatch: large model has {large}, small model has {small}")]
    VocabMismatch { large: usize, small: usize },
    #[error("method was extracted for model {expected:#x}, got {got:#x}")]
    WrongModel { expected: u64, got: u64 },
    #[error("{op} does not support the {method} method")]
    UnsupportedMethod { op: &'static str, method: &'static str },
    #[error("invalid parameters: {0}")]
    InvalidParams(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Extraction bookkeeping carried by every method variant.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionMeta {
    pub model_digest: u64,
    pub demo_digest: u64,
    pub lambda: Option<f64>,
    pub n_queries: Option<usize>,
    pub rng_seed: Option<u64>,
    /// Normal-equation residual of the ridge solve, where applicable.
    pub residual: Option<f64>,
    /// Final training loss of the MLP mapping, where applicable.
    pub final_loss: Option<f64>,
    /// Whether extraction queries may overlap the evaluation set.
    pub overlap_allowed: bool,
}

impl ExtractionMeta {
    pub fn new(model_digest: u64, demo_digest: u64) -> Self {
        Self {
            model_digest,
            demo_digest,
            lambda: None,
            n_queries: None,
            rng_seed: None,
            residual: None,
            final_loss: None,
            overlap_allowed: true,
        }
    }
}

/// Linear task vector: `v(x) = W* · h_zs(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LtvLinear {
    pub w_star: DenseMatrix,
    pub meta: ExtractionMeta,
}

/// Constant mapping: `v(x) = c`, the empirical mean hidden shift.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantMap {
    pub c: DenseVector,
    pub meta: ExtractionMeta,
}

/// Layer-replacement baseline: the captured vector overwrites the hidden
/// state at `layer_index` (zero-based trace depth `layer_index + 1`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReplace {
    pub layer_index: usize,
    pub vector: DenseVector,
    /// Validation accuracy per candidate layer, in depth order.
    pub val_accuracy: Vec<f64>,
    pub meta: ExtractionMeta,
}

/// Two-layer ReLU mapping: `v(x) = W₂ · ReLU(W₁ · h_zs(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpMap {
    pub w1: DenseMatrix,
    pub w2: DenseMatrix,
    pub meta: ExtractionMeta,
}

/// Logit-space linear task vector for cross-model transfer:
/// corrected logits are `z_zs + W̃ · h_zs` on the (small) inference model.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitLtv {
    pub w_tilde: DenseMatrix,
    /// Digest of the model the targets came from.
    pub source_digest: u64,
    pub meta: ExtractionMeta,
}

/// Tagged union of extraction results.
#[derive(Debug, Clone, PartialEq)]
pub enum TaskVectorMethod {
    LtvLinear(LtvLinear),
    ConstantMap(ConstantMap),
    LayerReplace(LayerReplace),
    MlpMap(MlpMap),
    LogitLtv(LogitLtv),
}

impl TaskVectorMethod {
    pub fn meta(&self) -> &ExtractionMeta {
        match self {
            TaskVectorMethod::LtvLinear(m) => &m.meta,
            TaskVectorMethod::ConstantMap(m) => &m.meta,
            TaskVectorMethod::LayerReplace(m) => &m.meta,
            TaskVectorMethod::MlpMap(m) => &m.meta,
            TaskVectorMethod::LogitLtv(m) => &m.meta,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            TaskVectorMethod::LtvLinear(_) => "ltv",
            TaskVectorMethod::ConstantMap(_) => "constant",
            TaskVectorMethod::LayerReplace(_) => "layer-replace",
            TaskVectorMethod::MlpMap(_) => "mlp",
            TaskVectorMethod::LogitLtv(_) => "logit-ltv",
        }
    }

    /// Variant code used by the checkpoint container.
    pub fn variant_code(&self) -> u8 {
        match self {
            TaskVectorMethod::LtvLinear(_) => 1,
            TaskVectorMethod::ConstantMap(_) => 2,
            TaskVectorMethod::LayerReplace(_) => 3,
            TaskVectorMethod::MlpMap(_) => 4,
            TaskVectorMethod::LogitLtv(_) => 5,
        }
    }

    /// Refuses use against any model other than the one it was extracted
    /// for.
    pub fn check_model(&self, params: &Parameters) -> Result<(), TvxError> {
        let got = params.digest();
        let expected = self.meta().model_digest;
        if got != expected {
            return Err(TvxError::WrongModel { expected, got });
        }
        Ok(())
    }

    /// The additive hidden-space vector `v(x)`, for methods that define one.
    pub fn hidden_shift(&self, h_zs: &DenseVector) -> Result<Option<DenseVector>, TvxError> {
        match self {
            TaskVectorMethod::LtvLinear(m) => Ok(Some(m.w_star.matvec(h_zs)?)),
            TaskVectorMethod::ConstantMap(m) => Ok(Some(m.c.clone())),
            TaskVectorMethod::MlpMap(m) => {
                let mut pre = m.w1.matvec(h_zs)?;
                for v in pre.entries_mut() {
                    *v = v.max(0.0);
                }
                Ok(Some(m.w2.matvec(&pre)?))
            }
            TaskVectorMethod::LayerReplace(_) | TaskVectorMethod::LogitLtv(_) => Ok(None),
        }
    }
}

/// Paired regression data: column `j` of `h` is `h_zs(x_j)`, column `j` of
/// `y` is `h_icl(x_j, Z) − h_zs(x_j)`, both from the same query and
/// demonstrations.
#[derive(Debug, Clone)]
pub struct ExtractionBatch {
    pub h: DenseMatrix,
    pub y: DenseMatrix,
    pub queries: Vec<TokenId>,
}

fn hidden_pair(
    params: &Parameters,
    demos: &DemonstrationSet,
    x: TokenId,
) -> Result<(DenseVector, DenseVector), TvxError> {
    let max = params.config.max_seq_len;
    let zs_prompt = encode_classification_prompt(None, x, max)?;
    let icl_prompt = encode_classification_prompt(Some(demos), x, max)?;
    let h_zs = forward(params, &zs_prompt, &InjectionSpec::None)?.last_hidden();
    let h_icl = forward(params, &icl_prompt, &InjectionSpec::None)?.last_hidden();
    Ok((h_zs, h_icl))
}

/// Runs the zero-shot and in-context forwards for every query and fills the
/// regression matrices column by column. No labels are consumed.
pub fn build_extraction_batch(
    params: &Parameters,
    demos: &DemonstrationSet,
    queries: &[TokenId],
) -> Result<ExtractionBatch, TvxError> {
    if queries.is_empty() {
        return Err(TvxError::EmptyQueries);
    }
    let d = params.config.d_model;
    let mut h = DenseMatrix::zeros(d, queries.len());
    let mut y = DenseMatrix::zeros(d, queries.len());
    for (j, &x) in queries.iter().enumerate() {
        let (h_zs, h_icl) = hidden_pair(params, demos, x)?;
        h.set_column(j, &h_zs);
        y.set_column(j, &h_icl.sub(&h_zs));
    }
    Ok(ExtractionBatch {
        h,
        y,
        queries: queries.to_vec(),
    })
}

/// Closed-form ridge fit on an already-built batch.
pub fn extract_ltv_from_batch(
    batch: &ExtractionBatch,
    lambda: f64,
    mut meta: ExtractionMeta,
) -> Result<TaskVectorMethod, TvxError> {
    let w_star = ridge_solve(&batch.h, &batch.y, lambda)?;
    meta.lambda = Some(lambda);
    meta.n_queries = Some(batch.queries.len());
    meta.residual = Some(normal_equation_residual(&batch.h, &batch.y, &w_star, lambda)?);
    Ok(TaskVectorMethod::LtvLinear(LtvLinear { w_star, meta }))
}

/// `‖(HHᵀ + λI)·Wᵀ − H·Yᵀ‖_F`.
pub fn normal_equation_residual(
    h: &DenseMatrix,
    y: &DenseMatrix,
    w: &DenseMatrix,
    lambda: f64,
) -> Result<f64, TvxError> {
    let mut gram = h.matmul_nt(h)?;
    for i in 0..gram.rows() {
        gram.set(i, i, gram.get(i, i) + lambda);
    }
    let lhs = gram.matmul_nt(w)?;
    let rhs = h.matmul_nt(y)?;
    Ok(lhs.sub(&rhs)?.frobenius_norm())
}

/// Linear task-vector extraction: ridge regression from `h_zs` to the
/// hidden shift over `N` unlabeled queries.
pub fn extract_ltv(
    params: &Parameters,
    demos: &DemonstrationSet,
    queries: &[TokenId],
    lambda: f64,
) -> Result<TaskVectorMethod, TvxError> {
    let batch = build_extraction_batch(params, demos, queries)?;
    extract_ltv_from_batch(&batch, lambda, ExtractionMeta::new(params.digest(), demos.digest()))
}

/// Constant-mapping baseline: the column mean of the hidden shifts.
pub fn extract_constant(
    params: &Parameters,
    demos: &DemonstrationSet,
    queries: &[TokenId],
) -> Result<TaskVectorMethod, TvxError> {
    let batch = build_extraction_batch(params, demos, queries)?;
    let mut meta = ExtractionMeta::new(params.digest(), demos.digest());
    meta.n_queries = Some(queries.len());
    Ok(TaskVectorMethod::ConstantMap(ConstantMap {
        c: batch.y.column_mean(),
        meta,
    }))
}

/// Layer-replacement baseline. Captures the last-token hidden state of the
/// demonstration prompt (terminated by a fresh random query token) at every
/// depth, picks the depth with the best validation accuracy (ties toward
/// the shallowest), and stores that vector.
pub fn extract_layer_replace(
    params: &Parameters,
    demos: &DemonstrationSet,
    val_pairs: &[(TokenId, TokenId)],
    labels: &[TokenId],
    query_pool: &[TokenId],
    rng: &mut ChaCha20Rng,
) -> Result<TaskVectorMethod, TvxError> {
    if val_pairs.is_empty() {
        return Err(TvxError::EmptyValidation);
    }
    if query_pool.is_empty() {
        return Err(TvxError::EmptyQueries);
    }
    let max = params.config.max_seq_len;
    let dummy = query_pool[rng.gen_range(0..query_pool.len())];
    let demo_prompt = encode_classification_prompt(Some(demos), dummy, max)?;
    let demo_trace = forward(params, &demo_prompt, &InjectionSpec::None)?;

    let n_layers = params.config.n_layers;
    let mut val_accuracy = Vec::with_capacity(n_layers);
    let mut best: Option<(usize, f64, DenseVector)> = None;
    for layer_index in 0..n_layers {
        let vector = demo_trace.hidden_at(layer_index + 1, demo_trace.seq_len - 1);
        let mut correct = 0usize;
        for &(x, y) in val_pairs {
            let prompt = encode_classification_prompt(None, x, max)?;
            let trace = forward(
                params,
                &prompt,
                &InjectionSpec::ReplaceAtLayer {
                    layer_index,
                    vector: vector.clone(),
                },
            )?;
            let dist = restricted_distribution(&trace.last_logits(), labels)
                .map_err(|_| TvxError::InvalidParams("bad label set"))?;
            if argmax_label(&dist, labels) == y {
                correct += 1;
            }
        }
        let acc = correct as f64 / val_pairs.len() as f64;
        val_accuracy.push(acc);
        let better = match &best {
            None => true,
            Some((_, best_acc, _)) => acc > *best_acc,
        };
        if better {
            best = Some((layer_index, acc, vector));
        }
    }
    let (layer_index, _, vector) = best.expect("at least one layer");
    let mut meta = ExtractionMeta::new(params.digest(), demos.digest());
    meta.n_queries = Some(val_pairs.len());
    Ok(TaskVectorMethod::LayerReplace(LayerReplace {
        layer_index,
        vector,
        val_accuracy,
        meta,
    }))
}

/// Loss and gradients of the empirical mapping objective
/// `(1/N)·Σ_j ‖y_j − W₂·ReLU(W₁·h_j)‖²` over the given columns.
pub fn mlp_loss_and_grad(
    w1: &DenseMatrix,
    w2: &DenseMatrix,
    h: &DenseMatrix,
    y: &DenseMatrix,
) -> Result<(f64, DenseMatrix, DenseMatrix), TvxError> {
    let n = h.cols() as f64;
    let z1 = w1.matmul(h)?; // d_map×N
    let mut act = z1.clone();
    for v in act.entries_mut() {
        *v = v.max(0.0);
    }
    let pred = w2.matmul(&act)?; // d×N
    let resid = pred.sub(y)?;
    let loss = {
        let f = resid.frobenius_norm();
        f * f / n
    };
    let d_pred = resid.scale(2.0 / n);
    let d_w2 = d_pred.matmul_nt(&act)?; // d×d_map
    let mut d_act = w2.matmul_tn(&d_pred)?; // d_map×N
    for (g, &z) in d_act.entries_mut().iter_mut().zip(z1.entries()) {
        if z <= 0.0 {
            *g = 0.0;
        }
    }
    let d_w1 = d_act.matmul_nt(h)?; // d_map×d
    Ok((loss, d_w1, d_w2))
}

struct MlpAdam {
    m1: DenseMatrix,
    v1: DenseMatrix,
    m2: DenseMatrix,
    v2: DenseMatrix,
    step: usize,
}

fn adam_update(
    w: &mut DenseMatrix,
    g: &DenseMatrix,
    m: &mut DenseMatrix,
    v: &mut DenseMatrix,
    lr: f64,
    t: usize,
) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let bc1 = 1.0 - B1.powi(t as i32);
    let bc2 = 1.0 - B2.powi(t as i32);
    for ((w, &g), (m, v)) in w
        .entries_mut()
        .iter_mut()
        .zip(g.entries())
        .zip(m.entries_mut().iter_mut().zip(v.entries_mut()))
    {
        *m = B1 * *m + (1.0 - B1) * g;
        *v = B2 * *v + (1.0 - B2) * g * g;
        let mh = *m / bc1;
        let vh = *v / bc2;
        *w -= lr * mh / (vh.sqrt() + EPS);
    }
}

/// Trains the 2-layer ReLU mapping on the extraction batch with Adam, linear
/// warmup over `warmup_fraction` of the updates, then cosine decay to zero.
/// Hidden width equals `d_model`. Manual analytic gradients throughout.
#[allow(clippy::too_many_arguments)]
pub fn train_mlp_map(
    params: &Parameters,
    demos: &DemonstrationSet,
    queries: &[TokenId],
    epochs: usize,
    lr: f64,
    batch_size: usize,
    warmup_fraction: f64,
    rng: &mut ChaCha20Rng,
) -> Result<TaskVectorMethod, TvxError> {
    if epochs == 0 {
        return Err(TvxError::InvalidParams("epochs must be >= 1"));
    }
    if batch_size == 0 {
        return Err(TvxError::InvalidParams("batch size must be >= 1"));
    }
    let batch = build_extraction_batch(params, demos, queries)?;
    train_mlp_map_from_batch(
        &batch,
        epochs,
        lr,
        batch_size,
        warmup_fraction,
        rng,
        ExtractionMeta::new(params.digest(), demos.digest()),
    )
}

pub(crate) fn train_mlp_map_from_batch(
    batch: &ExtractionBatch,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    warmup_fraction: f64,
    rng: &mut ChaCha20Rng,
    mut meta: ExtractionMeta,
) -> Result<TaskVectorMethod, TvxError> {
    let d = batch.h.rows();
    let d_map = d;
    let n = batch.h.cols();

    // Kaiming-scaled features, near-zero output projection: the map starts
    // out close to the zero function and descends from the shift energy.
    let w1_std = (2.0 / d as f64).sqrt();
    let mut w1 = gaussian_matrix(d_map, d, w1_std, rng);
    let mut w2 = gaussian_matrix(d, d_map, 0.02, rng);

    let batches_per_epoch = n.div_ceil(batch_size);
    let total_updates = epochs * batches_per_epoch;
    let warmup = (warmup_fraction * total_updates as f64).floor() as usize;

    let mut opt = MlpAdam {
        m1: DenseMatrix::zeros(d_map, d),
        v1: DenseMatrix::zeros(d_map, d),
        m2: DenseMatrix::zeros(d, d_map),
        v2: DenseMatrix::zeros(d, d_map),
        step: 0,
    };

    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..epochs {
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch_size) {
            let hb = gather_columns(&batch.h, chunk);
            let yb = gather_columns(&batch.y, chunk);
            let (_, d_w1, d_w2) = mlp_loss_and_grad(&w1, &w2, &hb, &yb)?;
            let step_lr = schedule(lr, opt.step, warmup, total_updates);
            opt.step += 1;
            adam_update(&mut w1, &d_w1, &mut opt.m1, &mut opt.v1, step_lr, opt.step);
            adam_update(&mut w2, &d_w2, &mut opt.m2, &mut opt.v2, step_lr, opt.step);
        }
    }

    let (final_loss, _, _) = mlp_loss_and_grad(&w1, &w2, &batch.h, &batch.y)?;
    meta.n_queries = Some(n);
    meta.final_loss = Some(final_loss);
    Ok(TaskVectorMethod::MlpMap(MlpMap { w1, w2, meta }))
}

fn schedule(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if warmup > 0 && step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let remaining = (total - warmup).max(1);
    let progress = (step - warmup) as f64 / remaining as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut ChaCha20Rng) -> DenseMatrix {
    let dist = Normal::new(0.0, std).expect("valid std");
    DenseMatrix::from_raw(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

fn gather_columns(m: &DenseMatrix, cols: &[usize]) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(m.rows(), cols.len());
    for (j, &c) in cols.iter().enumerate() {
        for i in 0..m.rows() {
            out.set(i, j, m.get(i, c));
        }
    }
    out
}

/// Cross-model logit-space extraction: regression inputs are the small
/// model's zero-shot hidden states; targets are the large model's in-context
/// logits minus the small model's zero-shot logits. Both models must share
/// the vocabulary.
pub fn extract_logit_ltv(
    large: &Parameters,
    small: &Parameters,
    demos: &DemonstrationSet,
    queries: &[TokenId],
    lambda: f64,
) -> Result<TaskVectorMethod, TvxError> {
    if large.config.vocab_size != small.config.vocab_size {
        return Err(TvxError::VocabMismatch {
            large: large.config.vocab_size,
            small: small.config.vocab_size,
        });
    }
    if demos.is_empty() {
        return Err(TvxError::TooFewShots);
    }
    if queries.is_empty() {
        return Err(TvxError::EmptyQueries);
    }

    let d_small = small.config.d_model;
    let vocab = small.config.vocab_size;
    let mut h = DenseMatrix::zeros(d_small, queries.len());
    let mut y = DenseMatrix::zeros(vocab, queries.len());
    for (j, &x) in queries.iter().enumerate() {
        let zs_prompt = encode_classification_prompt(None, x, small.config.max_seq_len)?;
        let icl_prompt = encode_classification_prompt(Some(demos), x, large.config.max_seq_len)?;
        let zs_small = forward(small, &zs_prompt, &InjectionSpec::None)?;
        let icl_large = forward(large, &icl_prompt, &InjectionSpec::None)?;
        let h_zs = zs_small.last_hidden();
        let z_zs = zs_small.last_logits();
        let z_icl = icl_large.last_logits();
        h.set_column(j, &h_zs);
        y.set_column(j, &z_icl.sub(&z_zs));
    }

    let w_tilde = ridge_solve(&h, &y, lambda)?;
    let mut meta = ExtractionMeta::new(small.digest(), demos.digest());
    meta.lambda = Some(lambda);
    meta.n_queries = Some(queries.len());
    meta.residual = Some(normal_equation_residual(&h, &y, &w_tilde, lambda)?);
    Ok(TaskVectorMethod::LogitLtv(LogitLtv {
        w_tilde,
        source_digest: large.digest(),
        meta,
    }))
}
