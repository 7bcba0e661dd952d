//! Evaluation metrics: the next-token-probability discrepancy, the
//! hidden-state surrogate it bounds, the spectral bound audit relating the
//! two, plus accuracy, regression MSE, and the correlation statistic.

use serde::Serialize;
use thiserror::Error;

use crate::linalg::{kl_divergence, pearson, spectral_norm, DenseVector, LinalgError};
use crate::model::{ModelError, Parameters, TokenId};
use crate::modes::{
    generate, icl_predict, tv_generate, tv_predict, zero_shot_predict, ModesError,
};
use crate::tasks::{
    decode_number, encode_regression_prompt, DemonstrationSet, NumericTokenScheme,
    RegressionTask, TaskError,
};
use crate::tvx::{TaskVectorMethod, TvxError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("empty evaluation set")]
    EmptyEvalSet,
    #[error("length mismatch: {a} predictions vs {b} truths")]
    LengthMismatch { a: usize, b: usize },
    #[error("the {method} method defines no additive hidden-space vector")]
    UnsupportedMethod { method: &'static str },
    #[error("invalid reports: {0}")]
    InvalidReports(&'static str),
    #[error(transparent)]
    Modes(#[from] ModesError),
    #[error(transparent)]
    Tvx(#[from] TvxError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Tolerance on the audit inequality.
const AUDIT_SLACK: f64 = 1e-9;

/// One audited bound check: `d_ntp ≤ c1 · c2 · √l_mse`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundAudit {
    pub d_ntp: f64,
    pub l_mse: f64,
    /// Spectral norm of the label-restricted LM-head rows.
    pub c1: f64,
    /// Log-softmax Lipschitz constant: `1 + √K`.
    pub c2: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub satisfied: bool,
}

impl BoundAudit {
    fn new(d_ntp: f64, l_mse: f64, c1: f64, c2: f64) -> Self {
        let lhs = d_ntp;
        let rhs = c1 * c2 * l_mse.sqrt();
        Self {
            d_ntp,
            l_mse,
            c1,
            c2,
            lhs,
            rhs,
            satisfied: lhs <= rhs + AUDIT_SLACK,
        }
    }
}

/// Per-query evidence retained in an [`EvalReport`].
#[derive(Debug, Clone, Serialize)]
pub struct PerQueryRecord {
    pub query: TokenId,
    pub icl_distribution: Vec<f64>,
    pub tv_distribution: Vec<f64>,
    pub kl: f64,
}

/// One (method, task, run) evaluation cell.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub run_id: usize,
    pub seed: u64,
    pub method: String,
    pub task_family: String,
    pub k: usize,
    pub n_queries: Option<usize>,
    pub lambda: Option<f64>,
    pub accuracy: Option<f64>,
    pub d_ntp: Option<f64>,
    pub l_mse: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub bound_ok: Option<bool>,
    pub malformed_rate: Option<f64>,
    pub extraction_ms: Option<f64>,
    pub inference_us_per_query: Option<f64>,
    pub per_query: Vec<PerQueryRecord>,
}

impl EvalReport {
    /// The aggregate d_ntp must equal the mean of the per-query KLs.
    pub fn consistent(&self) -> bool {
        match (self.d_ntp, self.per_query.is_empty()) {
            (None, _) => true,
            (Some(_), true) => false,
            (Some(d), false) => {
                let mean =
                    self.per_query.iter().map(|r| r.kl).sum::<f64>() / self.per_query.len() as f64;
                (d - mean).abs() <= 1e-12
            }
        }
    }
}

/// Mean KL divergence from the in-context predictive distribution to the
/// task-vector predictive distribution over the evaluation queries, plus the
/// per-query values. The expectation over the query distribution is
/// approximated by this empirical mean.
pub fn d_ntp(
    params: &Parameters,
    method: &TaskVectorMethod,
    demos: &DemonstrationSet,
    eval_queries: &[TokenId],
    labels: &[TokenId],
) -> Result<(f64, Vec<f64>), MetricsError> {
    if eval_queries.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let mut kls = Vec::with_capacity(eval_queries.len());
    for &x in eval_queries {
        let p_icl = icl_predict(params, demos, x, labels)?;
        let p_tv = tv_predict(params, method, x, labels)?;
        kls.push(kl_divergence(&p_icl.distribution, &p_tv.distribution)?);
    }
    Ok((kls.iter().sum::<f64>() / kls.len() as f64, kls))
}

/// Mean squared distance between the in-context hidden state and the
/// task-vector-conditioned hidden state, `mean‖h_icl − h_zs − v(x)‖²`.
/// Only methods with an additive hidden-space vector are supported.
pub fn l_mse(
    params: &Parameters,
    method: &TaskVectorMethod,
    demos: &DemonstrationSet,
    eval_queries: &[TokenId],
) -> Result<f64, MetricsError> {
    if eval_queries.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    method.check_model(params)?;
    let labels_placeholder: Vec<TokenId> = vec![1]; // hidden states only
    let mut total = 0.0;
    for &x in eval_queries {
        let zs = zero_shot_predict(params, x, &labels_placeholder)?;
        let icl = icl_predict(params, demos, x, &labels_placeholder)?;
        let v = method
            .hidden_shift(&zs.hidden)?
            .ok_or(MetricsError::UnsupportedMethod {
                method: method.tag(),
            })?;
        let resid = icl.hidden.sub(&zs.hidden).sub(&v);
        total += resid.dot(&resid);
    }
    Ok(total / eval_queries.len() as f64)
}

/// Spectral norm of the LM-head rows selected by the label set.
pub fn restricted_head_norm(
    params: &Parameters,
    labels: &[TokenId],
) -> Result<f64, MetricsError> {
    let w_c = params.lm_head.select_rows(labels)?;
    Ok(spectral_norm(&w_c))
}

/// Checks `d_ntp ≤ C₁·C₂·√l_mse` with `C₁ = ‖W_C‖₂` and `C₂ = 1 + √K`.
pub fn audit_bound(
    params: &Parameters,
    method: &TaskVectorMethod,
    demos: &DemonstrationSet,
    eval_queries: &[TokenId],
    labels: &[TokenId],
) -> Result<BoundAudit, MetricsError> {
    let mse = l_mse(params, method, demos, eval_queries)?;
    let (dntp, _) = d_ntp(params, method, demos, eval_queries, labels)?;
    let c1 = restricted_head_norm(params, labels)?;
    let c2 = 1.0 + (labels.len() as f64).sqrt();
    Ok(BoundAudit::new(dntp, mse, c1, c2))
}

/// Fraction of exact matches.
pub fn accuracy(predictions: &[TokenId], truths: &[TokenId]) -> Result<f64, MetricsError> {
    if predictions.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            a: predictions.len(),
            b: truths.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// How a regression query is answered.
#[derive(Debug, Clone, Copy)]
pub enum RegressionMode<'a> {
    ZeroShot,
    Icl,
    Ltv(&'a TaskVectorMethod),
}

impl RegressionMode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            RegressionMode::ZeroShot => "zero-shot",
            RegressionMode::Icl => "icl",
            RegressionMode::Ltv(_) => "ltv",
        }
    }
}

/// Aggregated regression decoding quality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionEval {
    pub mse: f64,
    pub malformed_rate: f64,
    pub n_queries: usize,
    pub n_malformed: usize,
}

/// Folds squared errors; malformed generations contribute the penalty
/// prediction 0 and are counted separately.
pub fn regression_eval_from_outcomes(outcomes: &[(Option<f64>, f64)]) -> RegressionEval {
    let n = outcomes.len();
    let mut sum = 0.0;
    let mut malformed = 0usize;
    for &(pred, truth) in outcomes {
        match pred {
            Some(p) => sum += (p - truth) * (p - truth),
            None => {
                malformed += 1;
                sum += truth * truth;
            }
        }
    }
    RegressionEval {
        mse: sum / n as f64,
        malformed_rate: malformed as f64 / n as f64,
        n_queries: n,
        n_malformed: malformed,
    }
}

/// Generates an answer for each held-out input under the selected mode,
/// decodes it, and accumulates squared error against the task's true value.
pub fn regression_mse(
    params: &Parameters,
    mode: RegressionMode<'_>,
    task: &RegressionTask,
    demos: &[(DenseVector, f64)],
    eval_inputs: &[DenseVector],
    scheme: &NumericTokenScheme,
    max_new: usize,
) -> Result<RegressionEval, MetricsError> {
    if eval_inputs.is_empty() {
        return Err(MetricsError::EmptyEvalSet);
    }
    let max = params.config.max_seq_len;
    let mut outcomes = Vec::with_capacity(eval_inputs.len());
    for x in eval_inputs {
        let truth = task.evaluate(x);
        let generated = match mode {
            RegressionMode::ZeroShot => {
                let prompt = encode_regression_prompt(&[], x, scheme, max)?;
                generate(params, &prompt.tokens, max_new, Some(scheme.newline))?
            }
            RegressionMode::Icl => {
                let prompt = encode_regression_prompt(demos, x, scheme, max)?;
                generate(params, &prompt.tokens, max_new, Some(scheme.newline))?
            }
            RegressionMode::Ltv(method) => {
                let prompt = encode_regression_prompt(&[], x, scheme, max)?;
                tv_generate(params, method, &prompt.tokens, max_new, Some(scheme.newline))?
            }
        };
        outcomes.push((decode_number(&generated, scheme).ok(), truth));
    }
    Ok(regression_eval_from_outcomes(&outcomes))
}

/// Pearson correlation between per-report discrepancy and accuracy.
pub fn correlate(reports: &[EvalReport]) -> Result<f64, MetricsError> {
    if reports.len() < 3 {
        return Err(MetricsError::InvalidReports("need at least 3 reports"));
    }
    let mut xs = Vec::with_capacity(reports.len());
    let mut ys = Vec::with_capacity(reports.len());
    for r in reports {
        let d = r
            .d_ntp
            .ok_or(MetricsError::InvalidReports("report lacks d_ntp"))?;
        let a = r
            .accuracy
            .ok_or(MetricsError::InvalidReports("report lacks accuracy"))?;
        xs.push(d);
        ys.push(a);
    }
    Ok(pearson(&xs, &ys)?)
}
