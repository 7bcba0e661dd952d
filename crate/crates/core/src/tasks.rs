//! Synthetic task families and prompt encodings.
//!
//! Classification tasks map query tokens to label tokens; a prompt is the
//! bare alternation `[BOS, x₁, y₁, …, x_k, y_k, x]` with no separators.
//! Regression tasks render real vectors as fixed-point digit strings using a
//! reserved token block at the top of the vocabulary.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::linalg::{DenseMatrix, DenseVector};
use crate::model::{Fnv, TokenId};

/// Token id 0 is the beginning-of-sequence marker in every vocabulary.
pub const BOS: TokenId = 0;

/// Count of reserved ids: BOS plus the 19-token numeric block.
pub const RESERVED_TOKENS: usize = 20;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TaskError {
    #[error("vocabulary exhausted: need {needed} free tokens, have {available}")]
    VocabExhausted { needed: usize, available: usize },
    #[error("too few shots: k = {k} is below the {classes} classes")]
    TooFewShots { k: usize, classes: usize },
    #[error("sequence length {len} exceeds max {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("malformed number: no digit before terminator at token index {0}")]
    MalformedNumber(usize),
    #[error("invalid numeric token scheme: {0}")]
    InvalidScheme(&'static str),
    #[error("invalid task parameters: {0}")]
    InvalidParams(&'static str),
}

/// A token-mapping classification task: each query token deterministically
/// maps to one of `K` label tokens, every label has at least one preimage.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationTask {
    labels: Vec<TokenId>,
    queries: Vec<TokenId>,
    mapping: Vec<TokenId>,
}

impl ClassificationTask {
    pub fn labels(&self) -> &[TokenId] {
        &self.labels
    }

    pub fn queries(&self) -> &[TokenId] {
        &self.queries
    }

    pub fn k_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn label_of(&self, query: TokenId) -> Option<TokenId> {
        self.queries
            .iter()
            .position(|&q| q == query)
            .map(|i| self.mapping[i])
    }

    /// Stable identity of the mapping, used to keep held-out evaluation
    /// tasks disjoint from everything seen during training.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.labels.len() as u64);
        for (&q, &y) in self.queries.iter().zip(&self.mapping) {
            h.write_u64(q as u64);
            h.write_u64(y as u64);
        }
        h.finish()
    }
}

/// The `k` labeled pairs that define one task instance.
#[derive(Debug, Clone, PartialEq)]
pub struct DemonstrationSet {
    pairs: Vec<(TokenId, TokenId)>,
}

impl DemonstrationSet {
    pub fn pairs(&self) -> &[(TokenId, TokenId)] {
        &self.pairs
    }

    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        for &(x, y) in &self.pairs {
            h.write_u64(x as u64);
            h.write_u64(y as u64);
        }
        h.finish()
    }

    /// Degenerate empty set for boundary-condition tests.
    #[doc(hidden)]
    pub fn empty_for_tests() -> Self {
        Self { pairs: Vec::new() }
    }
}

/// Samples a task with labels `1..=K` and `n_queries` distinct query tokens
/// drawn without replacement from the non-reserved range. The mapping
/// assigns every query a uniformly random label, resampled until each label
/// has at least one preimage.
pub fn sample_classification_task(
    rng: &mut ChaCha20Rng,
    k_classes: usize,
    n_queries: usize,
    vocab_size: usize,
) -> Result<ClassificationTask, TaskError> {
    if k_classes < 2 || n_queries < k_classes {
        return Err(TaskError::InvalidParams(
            "need K >= 2 and n_queries >= K",
        ));
    }
    // Query pool sits between the labels and the reserved numeric block.
    let pool_start = k_classes + 1;
    let pool_end = vocab_size.saturating_sub(RESERVED_TOKENS - 1); // exclusive
    let available = pool_end.saturating_sub(pool_start);
    if n_queries > available {
        return Err(TaskError::VocabExhausted {
            needed: n_queries,
            available,
        });
    }

    // Partial Fisher-Yates over the pool for a without-replacement draw.
    let mut pool: Vec<TokenId> = (pool_start..pool_end).collect();
    for i in 0..n_queries {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    let queries: Vec<TokenId> = pool[..n_queries].to_vec();
    let labels: Vec<TokenId> = (1..=k_classes).collect();

    let mapping = loop {
        let candidate: Vec<TokenId> = (0..n_queries)
            .map(|_| labels[rng.gen_range(0..k_classes)])
            .collect();
        let surjective = labels.iter().all(|l| candidate.contains(l));
        if surjective {
            break candidate;
        }
    };

    Ok(ClassificationTask {
        labels,
        queries,
        mapping,
    })
}

/// Balanced demonstration sampling: exactly `⌊k/K⌋` pairs per label, queries
/// drawn uniformly (with replacement) from each label's preimage, order
/// shuffled.
pub fn sample_demonstrations(
    task: &ClassificationTask,
    k: usize,
    rng: &mut ChaCha20Rng,
) -> Result<DemonstrationSet, TaskError> {
    let classes = task.k_classes();
    if k < classes {
        return Err(TaskError::TooFewShots { k, classes });
    }
    let per_label = k / classes;
    let mut pairs = Vec::with_capacity(per_label * classes);
    for &label in &task.labels {
        let preimage: Vec<TokenId> = task
            .queries
            .iter()
            .zip(&task.mapping)
            .filter(|(_, &y)| y == label)
            .map(|(&q, _)| q)
            .collect();
        for _ in 0..per_label {
            let q = preimage[rng.gen_range(0..preimage.len())];
            pairs.push((q, label));
        }
    }
    // Fisher-Yates shuffle.
    for i in (1..pairs.len()).rev() {
        let j = rng.gen_range(0..=i);
        pairs.swap(i, j);
    }
    Ok(DemonstrationSet { pairs })
}

/// `[BOS, x₁, y₁, …, x_k, y_k, x]`; with no demonstrations, `[BOS, x]`.
pub fn encode_classification_prompt(
    demos: Option<&DemonstrationSet>,
    x: TokenId,
    max_seq_len: usize,
) -> Result<Vec<TokenId>, TaskError> {
    let k = demos.map_or(0, |d| d.k());
    let len = 2 + 2 * k;
    if len > max_seq_len {
        return Err(TaskError::SequenceTooLong {
            len,
            max: max_seq_len,
        });
    }
    let mut tokens = Vec::with_capacity(len);
    tokens.push(BOS);
    if let Some(d) = demos {
        for &(q, y) in &d.pairs {
            tokens.push(q);
            tokens.push(y);
        }
    }
    tokens.push(x);
    Ok(tokens)
}

/// Which regression family to sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionKind {
    Linear,
    Relu,
}

/// A sampled regression target function.
#[derive(Debug, Clone, PartialEq)]
pub enum RegressionTask {
    /// `y = wᵀx`, `w ~ N(0, I_m)`.
    Linear { w: DenseVector },
    /// `y = αᵀ ReLU(V·x)`, `V ~ N(0, 1)` entries (r×m), `α ~ N(0, 1/r)`.
    Relu { v: DenseMatrix, alpha: DenseVector },
}

impl RegressionTask {
    pub fn input_dim(&self) -> usize {
        match self {
            RegressionTask::Linear { w } => w.dim(),
            RegressionTask::Relu { v, .. } => v.cols(),
        }
    }

    pub fn evaluate(&self, x: &DenseVector) -> f64 {
        match self {
            RegressionTask::Linear { w } => w.dot(x),
            RegressionTask::Relu { v, alpha } => {
                let pre = v.matvec(x).expect("input dim");
                pre.entries()
                    .iter()
                    .zip(alpha.entries())
                    .map(|(&p, &a)| a * p.max(0.0))
                    .sum()
            }
        }
    }
}

pub fn sample_regression_task(
    rng: &mut ChaCha20Rng,
    kind: RegressionKind,
    m: usize,
    r: usize,
) -> Result<RegressionTask, TaskError> {
    if m == 0 {
        return Err(TaskError::InvalidParams("input dimension must be >= 1"));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("valid");
    match kind {
        RegressionKind::Linear => {
            let w = DenseVector::new((0..m).map(|_| std_normal.sample(rng)).collect())
                .expect("finite");
            Ok(RegressionTask::Linear { w })
        }
        RegressionKind::Relu => {
            if r == 0 {
                return Err(TaskError::InvalidParams("relu width must be >= 1"));
            }
            let v = DenseMatrix::new(
                r,
                m,
                (0..r * m).map(|_| std_normal.sample(rng)).collect(),
            )
            .expect("finite");
            let alpha_std = Normal::new(0.0, (1.0 / r as f64).sqrt()).expect("valid");
            let alpha = DenseVector::new((0..r).map(|_| alpha_std.sample(rng)).collect())
                .expect("finite");
            Ok(RegressionTask::Relu { v, alpha })
        }
    }
}

/// `x ~ N(0, I_m)`.
pub fn sample_regression_input(rng: &mut ChaCha20Rng, m: usize) -> DenseVector {
    let std_normal = Normal::new(0.0, 1.0).expect("valid");
    DenseVector::new((0..m).map(|_| std_normal.sample(rng)).collect()).expect("finite")
}

/// Reserved token ids for rendering numbers and the two-line regression
/// template. The block occupies the top of the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NumericTokenScheme {
    pub digits: [TokenId; 10],
    pub minus: TokenId,
    pub point: TokenId,
    pub open_bracket: TokenId,
    pub close_bracket: TokenId,
    pub comma: TokenId,
    pub newline: TokenId,
    pub x_marker: TokenId,
    pub y_marker: TokenId,
    pub bos: TokenId,
    pub separator: TokenId,
}

impl NumericTokenScheme {
    /// Canonical layout for a given vocabulary size: ids
    /// `vocab_size - 19 .. vocab_size` in the field order below, BOS at 0.
    pub fn for_vocab(vocab_size: usize) -> Result<Self, TaskError> {
        if vocab_size < RESERVED_TOKENS + 2 {
            return Err(TaskError::InvalidScheme("vocabulary too small"));
        }
        let base = vocab_size - 19;
        let mut digits = [0; 10];
        for (i, d) in digits.iter_mut().enumerate() {
            *d = base + i;
        }
        Ok(Self {
            digits,
            minus: base + 10,
            point: base + 11,
            open_bracket: base + 12,
            close_bracket: base + 13,
            comma: base + 14,
            newline: base + 15,
            x_marker: base + 16,
            y_marker: base + 17,
            separator: base + 18,
            bos: BOS,
        })
    }

    pub fn reserved_ids(&self) -> Vec<TokenId> {
        let mut ids = self.digits.to_vec();
        ids.extend([
            self.minus,
            self.point,
            self.open_bracket,
            self.close_bracket,
            self.comma,
            self.newline,
            self.x_marker,
            self.y_marker,
            self.separator,
            self.bos,
        ]);
        ids
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), TaskError> {
        let ids = self.reserved_ids();
        if ids.iter().any(|&t| t >= vocab_size) {
            return Err(TaskError::InvalidScheme("id outside vocabulary"));
        }
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != ids.len() {
            return Err(TaskError::InvalidScheme("duplicate reserved id"));
        }
        Ok(())
    }

    fn digit_value(&self, t: TokenId) -> Option<u8> {
        self.digits.iter().position(|&d| d == t).map(|v| v as u8)
    }
}

/// Clamps to ±99.99 and rounds half away from zero at two decimals.
/// Returns the representable value and whether clamping fired.
pub fn quantize(value: f64) -> (f64, bool) {
    let clamped = value.clamp(-99.99, 99.99);
    let cents = (clamped.abs() * 100.0 + 0.5).floor();
    let q = clamped.signum() * cents / 100.0;
    // −0.00 renders and decodes as 0.
    let q = if q == 0.0 { 0.0 } else { q };
    (q, clamped != value)
}

/// Renders a value as sign + up to two integer digits + '.' + two fraction
/// digits. Returns the tokens and whether the value was clamped.
pub fn render_number(value: f64, scheme: &NumericTokenScheme) -> (Vec<TokenId>, bool) {
    let (q, clamped) = quantize(value);
    let cents = (q.abs() * 100.0).round() as i64;
    let int_part = cents / 100;
    let frac_part = cents % 100;
    let mut out = Vec::with_capacity(6);
    if q < 0.0 {
        out.push(scheme.minus);
    }
    if int_part >= 10 {
        out.push(scheme.digits[(int_part / 10) as usize]);
    }
    out.push(scheme.digits[(int_part % 10) as usize]);
    out.push(scheme.point);
    out.push(scheme.digits[(frac_part / 10) as usize]);
    out.push(scheme.digits[(frac_part % 10) as usize]);
    (out, clamped)
}

/// Parses sign, digits, and one decimal point until the first non-numeric
/// token (or end of input). Errors if no digit appears first.
pub fn decode_number(tokens: &[TokenId], scheme: &NumericTokenScheme) -> Result<f64, TaskError> {
    let mut idx = 0;
    let mut negative = false;
    if tokens.first() == Some(&scheme.minus) {
        negative = true;
        idx = 1;
    }
    let mut mantissa: i64 = 0;
    let mut frac_digits: u32 = 0;
    let mut seen_point = false;
    let mut seen_digit = false;
    while idx < tokens.len() {
        let t = tokens[idx];
        if let Some(d) = scheme.digit_value(t) {
            mantissa = mantissa.saturating_mul(10).saturating_add(d as i64);
            if seen_point {
                frac_digits += 1;
            }
            seen_digit = true;
            idx += 1;
        } else if t == scheme.point && !seen_point {
            seen_point = true;
            idx += 1;
        } else {
            break;
        }
    }
    if !seen_digit {
        return Err(TaskError::MalformedNumber(idx));
    }
    let value = mantissa as f64 / 10f64.powi(frac_digits as i32);
    Ok(if negative { -value } else { value })
}

/// An encoded regression prompt, ending right after the query's `y:` marker
/// so the model generates the answer.
#[derive(Debug, Clone)]
pub struct RegressionPrompt {
    pub tokens: Vec<TokenId>,
    /// Count of values clamped to the representable range while rendering.
    pub clamped_values: usize,
}

fn push_x_line(
    tokens: &mut Vec<TokenId>,
    x: &DenseVector,
    scheme: &NumericTokenScheme,
    clamped: &mut usize,
) {
    tokens.push(scheme.x_marker);
    tokens.push(scheme.open_bracket);
    for (i, &v) in x.entries().iter().enumerate() {
        if i > 0 {
            tokens.push(scheme.comma);
        }
        let (digits, was_clamped) = render_number(v, scheme);
        if was_clamped {
            *clamped += 1;
        }
        tokens.extend(digits);
    }
    tokens.push(scheme.close_bracket);
    tokens.push(scheme.newline);
}

/// Two-line template per demonstration: `x: [v₁, …, v_m]` newline
/// `y: value` newline. The query block ends after `y:`.
pub fn encode_regression_prompt(
    demos: &[(DenseVector, f64)],
    x_query: &DenseVector,
    scheme: &NumericTokenScheme,
    max_seq_len: usize,
) -> Result<RegressionPrompt, TaskError> {
    let mut tokens = vec![scheme.bos];
    let mut clamped = 0usize;
    for (x, y) in demos {
        push_x_line(&mut tokens, x, scheme, &mut clamped);
        tokens.push(scheme.y_marker);
        let (digits, was_clamped) = render_number(*y, scheme);
        if was_clamped {
            clamped += 1;
        }
        tokens.extend(digits);
        tokens.push(scheme.newline);
    }
    push_x_line(&mut tokens, x_query, scheme, &mut clamped);
    tokens.push(scheme.y_marker);
    if tokens.len() > max_seq_len {
        return Err(TaskError::SequenceTooLong {
            len: tokens.len(),
            max: max_seq_len,
        });
    }
    Ok(RegressionPrompt {
        tokens,
        clamped_values: clamped,
    })
}
