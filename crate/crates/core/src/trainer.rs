//! Training loop: streams fresh synthetic tasks, encodes them as in-context
//! prompts, and fits the toy transformer with Adam so that in-context
//! behavior emerges.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::model::{
    adam_compatible, backward, init_parameters, ModelConfig, ModelError, Parameters,
    TrainingBatch, TrainingSequence,
};
use crate::tasks::{
    encode_classification_prompt, encode_regression_prompt, render_number,
    sample_classification_task, sample_demonstrations, sample_regression_input,
    sample_regression_task, NumericTokenScheme, RegressionKind, TaskError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("optimizer shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("invalid train config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// Task family streamed during training, with its sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TaskFamily {
    Classification {
        k_classes: usize,
        n_queries: usize,
        k_demos: usize,
    },
    RegressionLinear {
        m: usize,
        k_demos: usize,
    },
    RegressionRelu {
        m: usize,
        r: usize,
        k_demos: usize,
    },
}

impl TaskFamily {
    /// Reference classification family: 4 labels, 12 query tokens, 30 shots.
    pub fn classification() -> Self {
        TaskFamily::Classification {
            k_classes: 4,
            n_queries: 12,
            k_demos: 30,
        }
    }

    /// Desk-scale linear regression: 2 inputs, 30 shots.
    pub fn regression_linear() -> Self {
        TaskFamily::RegressionLinear { m: 2, k_demos: 30 }
    }

    /// Desk-scale ReLU regression: 2 inputs, width 16, 30 shots.
    pub fn regression_relu() -> Self {
        TaskFamily::RegressionRelu {
            m: 2,
            r: 16,
            k_demos: 30,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskFamily::Classification { .. } => "classification",
            TaskFamily::RegressionLinear { .. } => "regression-linear",
            TaskFamily::RegressionRelu { .. } => "regression-relu",
        }
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub warmup_fraction: f64,
    pub rng_seed: u64,
    pub task_family: TaskFamily,
}

impl TrainConfig {
    pub fn defaults(task_family: TaskFamily, rng_seed: u64) -> Self {
        Self {
            steps: 20_000,
            batch_size: 32,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            warmup_fraction: 0.05,
            rng_seed,
            task_family,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1"));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig("learning_rate must be >= 0"));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0 < b && b < 1.0) {
                return Err(TrainError::InvalidConfig("betas must lie in (0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(TrainError::InvalidConfig("epsilon must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::InvalidConfig("warmup_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// First and second Adam moments, shaped like the parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Parameters,
    pub v: Parameters,
}

impl AdamState {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            m: Parameters::zeros_like(config),
            v: Parameters::zeros_like(config),
        }
    }
}

/// Learning rate at `step_index`: linear warmup over
/// `warmup_fraction · steps`, then cosine decay to zero.
pub fn learning_rate_at(train: &TrainConfig, step_index: usize) -> f64 {
    let warmup = (train.warmup_fraction * train.steps as f64).floor() as usize;
    if warmup > 0 && step_index < warmup {
        return train.learning_rate * (step_index + 1) as f64 / warmup as f64;
    }
    let remaining = (train.steps.saturating_sub(warmup)).max(1);
    let progress = (step_index.saturating_sub(warmup)) as f64 / remaining as f64;
    train.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One Adam update in place, with the scheduled learning rate for
/// `step_index` (0-based) and bias correction at `step_index + 1`.
pub fn adam_step(
    params: &mut Parameters,
    grads: &Parameters,
    state: &mut AdamState,
    step_index: usize,
    train: &TrainConfig,
) -> Result<(), TrainError> {
    if !adam_compatible(params, grads)
        || !adam_compatible(params, &state.m)
        || !adam_compatible(params, &state.v)
    {
        return Err(TrainError::ShapeMismatch("params/grads/state disagree"));
    }
    train.validate()?;
    let lr = learning_rate_at(train, step_index);
    let t = (step_index + 1) as i32;
    let bc1 = 1.0 - train.beta1.powi(t);
    let bc2 = 1.0 - train.beta2.powi(t);

    let mut p_slices = params.tensor_slices_mut();
    let g_slices = grads.tensor_slices();
    let mut m_slices = state.m.tensor_slices_mut();
    let mut v_slices = state.v.tensor_slices_mut();
    for i in 0..p_slices.len() {
        let p = &mut p_slices[i];
        let g = g_slices[i];
        let m = &mut m_slices[i];
        let v = &mut v_slices[i];
        for j in 0..p.len() {
            m[j] = train.beta1 * m[j] + (1.0 - train.beta1) * g[j];
            v[j] = train.beta2 * v[j] + (1.0 - train.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            p[j] -= lr * mh / (vh.sqrt() + train.epsilon);
        }
    }
    Ok(())
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    /// Mean loss per optimizer step.
    pub loss_curve: Vec<f64>,
    /// Digests of every classification task sampled during training, for
    /// held-out rejection sampling. Sorted and deduplicated.
    pub task_digests: Vec<u64>,
}

/// Builds one classification training sequence: balanced demonstrations, a
/// final query, and loss targets at every label position (the positions
/// whose next token is a label) plus the final query position.
fn classification_sequence(
    rng: &mut ChaCha20Rng,
    k_classes: usize,
    n_queries: usize,
    k_demos: usize,
    config: &ModelConfig,
    digests: &mut Vec<u64>,
) -> Result<TrainingSequence, TrainError> {
    let task = sample_classification_task(rng, k_classes, n_queries, config.vocab_size)?;
    digests.push(task.digest());
    let demos = sample_demonstrations(&task, k_demos, rng)?;
    let query = task.queries()[rng.gen_range(0..task.queries().len())];
    let label = task.label_of(query).expect("query from task");
    let tokens = encode_classification_prompt(Some(&demos), query, config.max_seq_len)?;
    let mut targets: Vec<(usize, usize)> = demos
        .pairs()
        .iter()
        .enumerate()
        .map(|(i, &(_, y))| (1 + 2 * i, y))
        .collect();
    targets.push((tokens.len() - 1, label));
    Ok(TrainingSequence { tokens, targets })
}

/// Builds one regression training sequence: the encoded prompt plus the
/// query's rendered answer, with loss targets covering every value token
/// (digits, point, sign, terminating newline) of every `y:` line.
fn regression_sequence(
    rng: &mut ChaCha20Rng,
    kind: RegressionKind,
    m: usize,
    r: usize,
    k_demos: usize,
    config: &ModelConfig,
    scheme: &NumericTokenScheme,
) -> Result<TrainingSequence, TrainError> {
    let task = sample_regression_task(rng, kind, m, r)?;
    let demos: Vec<_> = (0..k_demos)
        .map(|_| {
            let x = sample_regression_input(rng, m);
            let y = task.evaluate(&x);
            (x, y)
        })
        .collect();
    let x_query = sample_regression_input(rng, m);
    let y_query = task.evaluate(&x_query);

    let prompt = encode_regression_prompt(&demos, &x_query, scheme, config.max_seq_len)?;
    let mut tokens = prompt.tokens;
    let (answer, _) = render_number(y_query, scheme);
    tokens.extend(&answer);
    tokens.push(scheme.newline);
    if tokens.len() > config.max_seq_len {
        return Err(TaskError::SequenceTooLong {
            len: tokens.len(),
            max: config.max_seq_len,
        }
        .into());
    }

    // Every y-block: from each y-marker, predict the following tokens up to
    // and including the newline.
    let mut targets = Vec::new();
    let mut pos = 0;
    while pos < tokens.len() {
        if tokens[pos] == scheme.y_marker {
            let mut t = pos;
            while t + 1 < tokens.len() {
                targets.push((t, tokens[t + 1]));
                t += 1;
                if tokens[t] == scheme.newline {
                    break;
                }
            }
            pos = t + 1;
        } else {
            pos += 1;
        }
    }
    Ok(TrainingSequence { tokens, targets })
}

/// Streams fresh tasks and trains the model. Fully deterministic given the
/// two seeds (model init from `config.rng_seed`, stream and optimizer from
/// `train.rng_seed`).
pub fn train_on_stream(
    config: &ModelConfig,
    train: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train.validate()?;
    let mut params = init_parameters(config)?;
    let mut state = AdamState::new(config);
    let mut rng = ChaCha20Rng::seed_from_u64(train.rng_seed);
    let scheme = NumericTokenScheme::for_vocab(config.vocab_size)?;

    let mut loss_curve = Vec::with_capacity(train.steps);
    let mut digests = Vec::new();
    for step in 0..train.steps {
        let mut sequences = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size {
            let seq = match train.task_family {
                TaskFamily::Classification {
                    k_classes,
                    n_queries,
                    k_demos,
                } => classification_sequence(
                    &mut rng,
                    k_classes,
                    n_queries,
                    k_demos,
                    config,
                    &mut digests,
                )?,
                TaskFamily::RegressionLinear { m, k_demos } => {
                    regression_sequence(&mut rng, RegressionKind::Linear, m, 0, k_demos, config, &scheme)?
                }
                TaskFamily::RegressionRelu { m, r, k_demos } => {
                    regression_sequence(&mut rng, RegressionKind::Relu, m, r, k_demos, config, &scheme)?
                }
            };
            sequences.push(seq);
        }
        let batch = TrainingBatch { sequences };
        let (grads, loss) = backward(&params, &batch)?;
        adam_step(&mut params, &grads, &mut state, step, train)?;
        loss_curve.push(loss);
    }

    digests.sort_unstable();
    digests.dedup();
    Ok(TrainOutcome {
        params,
        loss_curve,
        task_digests: digests,
    })
}
