//! Episodic bilevel meta-training and meta-test adaptation.
//!
//! Meta-training processes one task per step: the linear head `w` is adapted
//! on the support set by a fixed number of Adam updates expressed as graph
//! ops (so the adapted head carries `dw*/dh`), then the query loss of the
//! adapted head backpropagates through the whole unrolled inner loop into
//! the feature-network weights, which take one outer Adam step.
//!
//! The inner objective is quadratic in `w` given features, so each inner
//! update consumes its exact gradient `(2/m) Z^T (Z w - y) + 2 lambda1 w`
//! built from graph ops. The diversity penalty contributes
//! `-lambda3 (2/|P|) (w . v) v` per step with the eigenvector `v` recomputed
//! at the step's live weights and held constant for differentiation
//! (first-order eigenvalue perturbation; eigenvector sensitivity is not
//! unrolled).
//!
//! Meta-test adaptation solves the (possibly ridge-regularized) inner
//! problem outright with a plain Adam loop and a convergence stopping rule;
//! nothing differentiates through it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Graph, NodeId, Tensor};
use crate::linalg::{sigma_min_grad, WeightStack};
use crate::model::{FeatureMap, LearnerParams, MetaLearnerParams};
use crate::regularizers::{
    outer_penalty, DiversityBuffer, Phase, RegularizerError, RegularizerSpec,
};
use crate::rng::{streams, Rng};
use crate::tasks::{sample_indexed_episode, EnvironmentConfig, Episode, TaskError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Meta-test adaptation: Adam at the task-specific learning rate, stopping
/// once the inner loss improves by less than `META_TEST_TOL` over
/// `META_TEST_PATIENCE` steps, or at `META_TEST_MAX_STEPS`.
pub const META_TEST_LR: f64 = 0.01;
pub const META_TEST_TOL: f64 = 1e-8;
pub const META_TEST_PATIENCE: usize = 50;
pub const META_TEST_MAX_STEPS: usize = 5000;

#[derive(Debug, Error)]
pub enum BilevelError {
    #[error("support set is empty")]
    EmptySupport,
    #[error("query set is empty")]
    EmptyQuery,
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Regularizer(#[from] RegularizerError),
}

/// Bias-correction multipliers `1/(1 - beta^t)` for Adam step `t` (1-based).
fn adam_coeffs(step: u64) -> (f64, f64) {
    (
        1.0 / (1.0 - ADAM_BETA1.powi(step as i32)),
        1.0 / (1.0 - ADAM_BETA2.powi(step as i32)),
    )
}

/// Plain Adam over groups of flat parameter slices (the published
/// recurrence with bias correction; zero gradient moves nothing).
#[derive(Debug, Clone)]
pub struct AdamOptimizer {
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamOptimizer {
    pub fn new(lr: f64, group_sizes: &[usize]) -> Self {
        AdamOptimizer {
            lr,
            step: 0,
            m: group_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: group_sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update across all groups; `params[i]` and `grads[i]` must match
    /// the construction-time group sizes.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len(), "group count mismatch");
        assert_eq!(grads.len(), self.m.len(), "group count mismatch");
        self.step += 1;
        let (c1, c2) = adam_coeffs(self.step);
        for gi in 0..params.len() {
            let (m, v) = (&mut self.m[gi], &mut self.v[gi]);
            let g = grads[gi];
            let p = &mut *params[gi];
            assert_eq!(p.len(), m.len(), "group size mismatch");
            for k in 0..p.len() {
                m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
                v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * (g[k] * g[k]);
                p[k] -= self.lr * ((m[k] * c1) / ((v[k] * c2).sqrt() + ADAM_EPS));
            }
        }
    }
}

/// Meta-training configuration for one experiment cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Number of training tasks T (one episode each, sequential).
    pub task_count: usize,
    /// Unrolled inner optimizer updates per episode.
    pub inner_steps: usize,
    /// Task-specific (inner) learning rate.
    pub inner_lr: f64,
    /// Inner optimizer whose updates are unrolled.
    pub inner_optimizer: InnerOptimizer,
    /// Meta (outer) Adam learning rate.
    pub outer_lr: f64,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub regularizer: RegularizerSpec,
    /// Master seed; weight init uses the `streams::INIT` subdomain of it.
    pub seed: u64,
    /// Task distribution plus episode sizes; its own seed drives sampling.
    pub environment: EnvironmentConfig,
    /// Recompute the logged buffer sigma_min every this many tasks once the
    /// buffer has full rank (exact while rank-deficient, and always
    /// recomputed on the final task).
    pub sigma_log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task_count: 1000,
            inner_steps: 20,
            inner_lr: 0.01,
            inner_optimizer: InnerOptimizer::Sgd,
            outer_lr: 0.001,
            hidden_dim: 40,
            feature_dim: 40,
            regularizer: RegularizerSpec::default(),
            seed: 0,
            environment: EnvironmentConfig::default(),
            sigma_log_every: 25,
        }
    }
}

impl TrainConfig {
    /// Standard cell of the experiment grid: strategy x T x (m, n) under a
    /// master seed, with the training task pool on its own stream.
    pub fn for_cell(
        regularizer: RegularizerSpec,
        task_count: usize,
        m: usize,
        n: usize,
        master_seed: u64,
    ) -> Self {
        TrainConfig {
            task_count,
            regularizer,
            seed: master_seed,
            environment: EnvironmentConfig {
                support_size: m,
                query_size: n,
                seed: Rng::derive_seed(master_seed, streams::TRAIN_TASKS),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    pub fn inner_loop(&self) -> InnerLoop {
        InnerLoop {
            steps: self.inner_steps,
            lr: self.inner_lr,
            optimizer: self.inner_optimizer,
        }
    }

    pub fn validate(&self) -> Result<(), BilevelError> {
        if self.task_count == 0 {
            return Err(BilevelError::Config("task_count must be >= 1".into()));
        }
        if self.inner_steps == 0 {
            return Err(BilevelError::Config("inner_steps must be >= 1".into()));
        }
        if self.inner_lr <= 0.0 || self.outer_lr <= 0.0 {
            return Err(BilevelError::Config("learning rates must be positive".into()));
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 {
            return Err(BilevelError::Config("layer dimensions must be >= 1".into()));
        }
        if self.environment.support_size == 0 {
            return Err(BilevelError::EmptySupport);
        }
        if self.environment.query_size == 0 {
            return Err(BilevelError::EmptyQuery);
        }
        if self.sigma_log_every == 0 {
            return Err(BilevelError::Config("sigma_log_every must be >= 1".into()));
        }
        self.environment.validate()?;
        self.regularizer.validate(self.feature_dim)?;
        Ok(())
    }
}

/// Graph-connected result of the unrolled inner optimization.
#[derive(Debug, Clone, Copy)]
pub struct InnerAdaptation {
    /// Adapted head, a `feature_dim x 1` node carrying `dw*/dh`.
    pub w: NodeId,
    /// Diversity buffer could not span the feature space; its term was zero.
    pub diversity_warmup: bool,
    /// Some inner step saw a degenerate smallest-eigenvalue gap.
    pub diversity_degenerate: bool,
}

/// Run `steps` updates of the chosen optimizer on the inner objective
/// `(1/m) ||Z w - y||^2 + lambda1 ||w||^2 - lambda3 sigma_min(P^T P / |P|)`
/// as graph ops, starting from `w = 0`.
///
/// `support_features` is `feature_dim x m` (column `i` is `h(x_i)`) and
/// `support_targets` is `m x 1`; both may be graph-connected.
pub fn inner_adapt(
    graph: &mut Graph,
    support_features: NodeId,
    support_targets: NodeId,
    reg: &RegularizerSpec,
    buffer: &DiversityBuffer,
    inner: InnerLoop,
) -> Result<InnerAdaptation, BilevelError> {
    let (dim, m) = graph.value(support_features).shape();
    let target_shape = graph.value(support_targets).shape();
    if m == 0 {
        return Err(BilevelError::EmptySupport);
    }
    if target_shape != (m, 1) {
        return Err(BilevelError::Config(format!(
            "support targets must be {m}x1, got {}x{}",
            target_shape.0, target_shape.1
        )));
    }

    let lambda1 = reg.norm_lambda(Phase::Train);
    let diversity = reg
        .diversity
        .as_ref()
        .filter(|d| d.lambda3 > 0.0 && buffer.warmed_up());
    let diversity_warmup = reg.diversity.is_some() && !buffer.warmed_up();
    let mut diversity_degenerate = false;
    let buffer_rows = buffer.rows();
    let n_rows = buffer_rows.len() + 1;

    // support_features already holds Z^T; Z is m x dim
    let z = graph.transpose(support_features);
    let eps_node = graph.constant(Tensor::filled(dim, 1, ADAM_EPS));

    let mut w = graph.constant(Tensor::zeros(dim, 1));
    let mut m1 = graph.constant(Tensor::zeros(dim, 1));
    let mut m2 = graph.constant(Tensor::zeros(dim, 1));

    for step in 1..=inner.steps as u64 {
        let pred = graph.matmul(z, w)?;
        let resid = graph.sub(pred, support_targets)?;
        let data_grad = graph.matmul(support_features, resid)?;
        let mut g = graph.scale(data_grad, 2.0 / m as f64);
        if lambda1 > 0.0 {
            let ridge = graph.scale(w, 2.0 * lambda1);
            g = graph.add(g, ridge)?;
        }
        if let Some(div) = diversity {
            // eigenvector of the smallest eigenvalue at the live weights
            let mut rows = buffer_rows.clone();
            rows.push(graph.value(w).data().to_vec());
            let stack =
                WeightStack::from_rows(&rows).expect("buffer and iterate are finite");
            let info = sigma_min_grad(&stack, n_rows);
            diversity_degenerate |= info.degenerate;
            let v_col = graph.constant(Tensor::column(&info.eigvec));
            let v_row = graph.transpose(v_col);
            let wv = graph.matmul(v_row, w)?;
            let pull = graph.matmul(v_col, wv)?;
            let term = graph.scale(pull, -div.lambda3 * 2.0 / n_rows as f64);
            g = graph.add(g, term)?;
        }

        match inner.optimizer {
            InnerOptimizer::Sgd => {
                let scaled = graph.scale(g, inner.lr);
                w = graph.sub(w, scaled)?;
            }
            InnerOptimizer::Adam => {
                let (c1, c2) = adam_coeffs(step);
                let g_sq = graph.square(g);
                let m1_decay = graph.scale(m1, ADAM_BETA1);
                let g_part = graph.scale(g, 1.0 - ADAM_BETA1);
                m1 = graph.add(m1_decay, g_part)?;
                let m2_decay = graph.scale(m2, ADAM_BETA2);
                let g_sq_part = graph.scale(g_sq, 1.0 - ADAM_BETA2);
                m2 = graph.add(m2_decay, g_sq_part)?;

                let m_hat = graph.scale(m1, c1);
                let v_hat = graph.scale(m2, c2);
                let v_root = graph.sqrt(v_hat)?;
                let denom = graph.add(v_root, eps_node)?;
                let update = graph.div(m_hat, denom)?;
                let scaled = graph.scale(update, inner.lr);
                w = graph.sub(w, scaled)?;
            }
        }
    }

    Ok(InnerAdaptation {
        w,
        diversity_warmup,
        diversity_degenerate,
    })
}

/// Per-task record of the meta-training loop (JSON-lines schema).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_index: usize,
    pub query_loss: f64,
    pub w_norm: f64,
    pub sigma_min_buffer: f64,
    pub head_max_norm: f64,
}

/// What one outer step observed.
#[derive(Debug, Clone)]
pub struct OuterStepLog {
    /// Mean square query loss of the adapted head (before penalties).
    pub query_loss: f64,
    /// Full outer objective (query loss plus outer penalty).
    pub outer_loss: f64,
    /// Detached adapted head.
    pub w_star: Vec<f64>,
    /// Largest feature norm `||h(x)||` over the episode's points.
    pub head_max_norm: f64,
    pub diversity_warmup: bool,
    pub diversity_degenerate: bool,
}

/// Build the full outer objective for one episode and differentiate it:
/// returns the step log plus the gradients for the four parameter tensors
/// in `w1, b1, w2, b2` order.
pub fn outer_objective(
    h: &MetaLearnerParams,
    episode: &Episode,
    reg: &RegularizerSpec,
    buffer: &DiversityBuffer,
    inner: InnerLoop,
) -> Result<(OuterStepLog, Vec<Vec<f64>>), BilevelError> {
    if episode.support.is_empty() {
        return Err(BilevelError::EmptySupport);
    }
    if episode.query.is_empty() {
        return Err(BilevelError::EmptyQuery);
    }

    let sx: Vec<f64> = episode.support.iter().map(|p| p[0]).collect();
    let sy: Vec<f64> = episode.support.iter().map(|p| p[1]).collect();
    let qx: Vec<f64> = episode.query.iter().map(|p| p[0]).collect();
    let qy: Vec<f64> = episode.query.iter().map(|p| p[1]).collect();

    let mut graph = Graph::new();
    let nodes = h.insert_leaves(&mut graph);
    let feat_s = h.features_node(&mut graph, &nodes, &sx)?;
    let targets = graph.constant(Tensor::column(&sy));
    let adapted = inner_adapt(&mut graph, feat_s, targets, reg, buffer, inner)?;

    let feat_q = h.features_node(&mut graph, &nodes, &qx)?;
    let w_row = graph.transpose(adapted.w);
    let pred = graph.matmul(w_row, feat_q)?;
    let target_row = graph.constant(Tensor::row(&qy));
    let resid = graph.sub(pred, target_row)?;
    let sq = graph.square(resid);
    let query_loss = graph.mean(sq);
    let penalty = outer_penalty(&mut graph, &nodes, h, reg)?;
    let total = graph.add(query_loss, penalty)?;

    let grads = graph.backward(total)?;
    let param_grads: Vec<Vec<f64>> = nodes
        .all()
        .into_iter()
        .map(|id| grads.get(id).data().to_vec())
        .collect();

    let column_norm_max = |node: NodeId| {
        let t = graph.value(node);
        (0..t.cols())
            .map(|j| {
                (0..t.rows())
                    .map(|i| t.get(i, j) * t.get(i, j))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0f64, f64::max)
    };
    let head_max_norm = column_norm_max(feat_s).max(column_norm_max(feat_q));

    let log = OuterStepLog {
        query_loss: graph.value(query_loss).item(),
        outer_loss: graph.value(total).item(),
        w_star: graph.value(adapted.w).data().to_vec(),
        head_max_norm,
        diversity_warmup: adapted.diversity_warmup,
        diversity_degenerate: adapted.diversity_degenerate,
    };
    Ok((log, param_grads))
}

/// Adapt on the episode's support set, evaluate on its query set, and take
/// one outer Adam step on the feature-network weights through the unrolled
/// inner loop.
pub fn outer_step(
    h: &mut MetaLearnerParams,
    episode: &Episode,
    reg: &RegularizerSpec,
    buffer: &DiversityBuffer,
    inner: InnerLoop,
    adam: &mut AdamOptimizer,
) -> Result<OuterStepLog, BilevelError> {
    let (log, grads) = outer_objective(h, episode, reg, buffer, inner)?;

    let mut parts: Vec<Vec<f64>> = h.params().iter().map(|t| t.data().to_vec()).collect();
    {
        let mut param_refs: Vec<&mut [f64]> =
            parts.iter_mut().map(|p| p.as_mut_slice()).collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
        adam.step(&mut param_refs, &grad_refs);
    }
    h.set_params(&parts);
    Ok(log)
}

/// Everything meta-training produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MetaLearnerParams,
    pub log: Vec<TaskRecord>,
    pub buffer: DiversityBuffer,
    /// Largest `||h(x)||` observed across all training episodes.
    pub max_head_norm: f64,
    /// Largest adapted-head norm observed across tasks.
    pub max_w_norm: f64,
    /// sigma_min of the final buffer Gram matrix.
    pub final_buffer_sigma: f64,
}

/// Sequential episodic meta-training over `task_count` tasks.
pub fn meta_train(config: &TrainConfig) -> Result<TrainOutcome, BilevelError> {
    config.validate()?;
    let mut init_rng = Rng::new(Rng::derive_seed(config.seed, streams::INIT));
    let head = config.regularizer.head_activation();
    let half_width = config
        .environment
        .input_range
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let mut h = MetaLearnerParams::init_for_range(
        config.hidden_dim,
        config.feature_dim,
        head,
        half_width,
        &mut init_rng,
    );

    let mut adam = AdamOptimizer::new(config.outer_lr, &h.param_sizes());

    let buffer_size = config
        .regularizer
        .diversity
        .as_ref()
        .map(|d| d.buffer_size)
        .unwrap_or(128)
        .max(config.feature_dim);
    let mut buffer = DiversityBuffer::new(buffer_size, config.feature_dim);

    let mut log = Vec::with_capacity(config.task_count);
    let mut max_head_norm = 0.0f64;
    let mut max_w_norm = 0.0f64;
    let mut last_sigma = 0.0f64;

    let env = &config.environment;
    for t in 0..config.task_count {
        let episode = sample_indexed_episode(env, t as u64, env.support_size, env.query_size)?;
        let step_log = outer_step(
            &mut h,
            &episode,
            &config.regularizer,
            &buffer,
            config.inner_loop(),
            &mut adam,
        )?;
        let w_norm = step_log.w_star.iter().map(|v| v * v).sum::<f64>().sqrt();
        buffer.push(step_log.w_star);

        let last_task = t + 1 == config.task_count;
        if buffer.len() < config.feature_dim || t % config.sigma_log_every == 0 || last_task {
            last_sigma = buffer.sigma_min_of_contents();
        }

        max_head_norm = max_head_norm.max(step_log.head_max_norm);
        max_w_norm = max_w_norm.max(w_norm);
        log.push(TaskRecord {
            task_index: t,
            query_loss: step_log.query_loss,
            w_norm,
            sigma_min_buffer: last_sigma,
            head_max_norm: step_log.head_max_norm,
        });
    }

    let final_buffer_sigma = buffer.sigma_min_of_contents();
    Ok(TrainOutcome {
        params: h,
        log,
        buffer,
        max_head_norm,
        max_w_norm,
        final_buffer_sigma,
    })
}

/// Which optimizer the inner (task-level) adaptation unrolls.
///
/// Plain gradient descent is the default for meta-training: its update is
/// linear in the gradient, so hypergradients stay well-scaled through the
/// whole unroll. Adam's normalized update is scale-invariant in the
/// gradient far from convergence and has `1/sqrt(v)` curvature near it,
/// which starves or destabilizes the meta-signal; it remains available for
/// solving an inner problem in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerOptimizer {
    Sgd,
    Adam,
}

/// The unrolled inner optimization recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerLoop {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: InnerOptimizer,
}

/// How long meta-test adaptation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptationBudget {
    /// Adam until the inner loss improves by less than `META_TEST_TOL` over
    /// `META_TEST_PATIENCE` steps, capped at `META_TEST_MAX_STEPS`.
    Converged,
    /// Exactly this many Adam steps, mirroring the training inner loop.
    Steps(usize),
}

/// Solve the meta-test inner problem on a frozen feature map: Adam to the
/// convergence criterion (see [`adapt_learner`] for a step budget).
pub fn meta_test_adapt(
    h: &impl FeatureMap,
    support: &[[f64; 2]],
    reg: &RegularizerSpec,
) -> Result<LearnerParams, BilevelError> {
    adapt_learner(
        h,
        support,
        reg,
        AdaptationBudget::Converged,
        META_TEST_LR,
        InnerOptimizer::Adam,
    )
}

/// Plain (non-differentiable-through) optimization of
/// `(1/m) ||Z w - y||^2 + lambda2 ||w||^2` from `w = 0`.
pub fn adapt_learner(
    h: &impl FeatureMap,
    support: &[[f64; 2]],
    reg: &RegularizerSpec,
    budget: AdaptationBudget,
    lr: f64,
    optimizer: InnerOptimizer,
) -> Result<LearnerParams, BilevelError> {
    if support.is_empty() {
        return Err(BilevelError::EmptySupport);
    }
    let m = support.len();
    let dim = h.feature_dim();
    let z: Vec<Vec<f64>> = support.iter().map(|p| h.features(p[0])).collect();
    let y: Vec<f64> = support.iter().map(|p| p[1]).collect();
    let lambda2 = reg.norm_lambda(Phase::MetaTest);
    let max_steps = match budget {
        AdaptationBudget::Converged => META_TEST_MAX_STEPS,
        AdaptationBudget::Steps(k) => k,
    };

    let mut w = vec![0.0f64; dim];
    let mut adam = AdamOptimizer::new(lr, &[dim]);
    let mut grad = vec![0.0f64; dim];
    let mut resid = vec![0.0f64; m];
    let mut history: Vec<f64> = Vec::new();

    let inv_m = 1.0 / m as f64;
    for _ in 0..max_steps {
        let mut loss = 0.0;
        for i in 0..m {
            let pred: f64 = z[i].iter().zip(&w).map(|(a, b)| a * b).sum();
            resid[i] = pred - y[i];
            loss += resid[i] * resid[i];
        }
        loss *= inv_m;
        if lambda2 > 0.0 {
            loss += lambda2 * w.iter().map(|v| v * v).sum::<f64>();
        }
        for k in 0..dim {
            let mut acc = 0.0;
            for i in 0..m {
                acc += z[i][k] * resid[i];
            }
            grad[k] = 2.0 * inv_m * acc + 2.0 * lambda2 * w[k];
        }

        if budget == AdaptationBudget::Converged {
            history.push(loss);
            let steps = history.len();
            if steps > META_TEST_PATIENCE
                && history[steps - 1 - META_TEST_PATIENCE] - history[steps - 1] < META_TEST_TOL
            {
                break;
            }
        }
        match optimizer {
            InnerOptimizer::Sgd => {
                for k in 0..dim {
                    w[k] -= lr * grad[k];
                }
            }
            InnerOptimizer::Adam => adam.step(&mut [&mut w], &[grad.as_slice()]),
        }
    }

    Ok(LearnerParams { w })
}
