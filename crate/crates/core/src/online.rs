//! Follow-the-meta-leader over a sequential task stream with regret
//! tracking.
//!
//! Each round adapts a fresh task learner from zero with one gradient step
//! of size `alpha`, incurs the adapted query loss under the current
//! meta-parameters, then replaces them with the minimizer of all incurred
//! round losses so far (the meta-leader).
//!
//! Two instantiations:
//! - convex quadratic: round losses `(h - c_t)^2` with scalar `h` and
//!   `c_t ~ U[-1, 1]`; the leader is the running mean of the `c_t` and every
//!   comparator is exact, so the regret guarantee can be checked directly;
//! - feature network: sine-task episodes with the real meta-learner; the
//!   leader is found by Adam on the stored-history objective to tolerance,
//!   and comparators are flagged approximate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bilevel::{AdamOptimizer, BilevelError};
use crate::engine::{Graph, NodeId, Tensor};
use crate::model::{Activation, MetaLearnerParams};
use crate::rng::{streams, Rng};
use crate::tasks::{sample_indexed_episode, EnvironmentConfig, Episode, TaskError};

#[derive(Debug, Error)]
pub enum OnlineError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Bilevel(#[from] BilevelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instantiation {
    ConvexQuadratic,
    FeatureNetwork,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    /// Number of rounds T.
    pub horizon: usize,
    /// Inner adaptation step size alpha.
    pub inner_step_size: f64,
    pub instantiation: Instantiation,
    pub seed: u64,
    /// Stop the stored-history optimization when one epoch improves the
    /// objective by less than this.
    pub ftl_tolerance: f64,
    pub ftl_max_epochs: usize,
    /// Episode sizes for the feature-network instantiation.
    pub support_size: usize,
    pub query_size: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        OnlineConfig {
            horizon: 100,
            inner_step_size: 0.01,
            instantiation: Instantiation::ConvexQuadratic,
            seed: 0,
            ftl_tolerance: 1e-8,
            ftl_max_epochs: 2000,
            support_size: 5,
            query_size: 5,
            hidden_dim: 40,
            feature_dim: 40,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<(), OnlineError> {
        if self.horizon == 0 {
            return Err(OnlineError::Config("horizon must be >= 1".into()));
        }
        if self.horizon > 10_000 {
            return Err(OnlineError::Config(
                "horizon capped at 10000 (history memory grows linearly)".into(),
            ));
        }
        if self.inner_step_size <= 0.0 {
            return Err(OnlineError::Config("inner_step_size must be positive".into()));
        }
        if self.instantiation == Instantiation::FeatureNetwork
            && (self.support_size == 0 || self.query_size == 0)
        {
            return Err(OnlineError::Config("episode sizes must be >= 1".into()));
        }
        Ok(())
    }
}

/// Complete record of one online run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretTrace {
    /// Incurred losses `l_t(h_t)`, one per round.
    pub losses: Vec<f64>,
    /// Stored-history objective `sum_{k<=t} l_k(h_{t+1})` after each update.
    pub ftl_objective_values: Vec<f64>,
    /// `min_h sum_{k<=t} l_k(h)` per prefix (exact for the convex
    /// instantiation, the post-hoc leader value otherwise).
    pub prefix_comparators: Vec<f64>,
    /// `min_h sum_t l_t(h)` over the whole horizon.
    pub comparator: f64,
    pub comparator_exact: bool,
    /// Largest observed gradient norm of a round loss at its play point.
    pub max_grad_norm: f64,
}

/// Cumulative regret and its running average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegretSummary {
    pub regret: f64,
    /// `R_t / t` per round, with the prefix comparator at each `t`.
    pub running_average: Vec<f64>,
    /// False when the comparator came from approximate optimization.
    pub comparator_exact: bool,
}

/// Regret quantities of a finished trace.
pub fn regret(trace: &RegretTrace) -> RegretSummary {
    let mut running_average = Vec::with_capacity(trace.losses.len());
    let mut cumulative = 0.0;
    for (t, loss) in trace.losses.iter().enumerate() {
        cumulative += loss;
        let r_t = cumulative - trace.prefix_comparators[t];
        running_average.push(r_t / (t + 1) as f64);
    }
    RegretSummary {
        regret: trace.losses.iter().sum::<f64>() - trace.comparator,
        running_average,
        comparator_exact: trace.comparator_exact,
    }
}

/// Theorem-style regret ceiling `4 G^2 (1 + ln T) / tau`.
pub fn regret_ceiling(max_grad_norm: f64, horizon: usize, tau: f64) -> f64 {
    4.0 * max_grad_norm * max_grad_norm * (1.0 + (horizon as f64).ln()) / tau
}

/// `t,loss_incurred,ftl_objective_value,running_regret` rows.
pub fn trace_csv(trace: &RegretTrace) -> String {
    let mut out = String::from("t,loss_incurred,ftl_objective_value,running_regret\n");
    let mut cumulative = 0.0;
    for (t, loss) in trace.losses.iter().enumerate() {
        cumulative += loss;
        let running = cumulative - trace.prefix_comparators[t];
        out.push_str(&format!(
            "{},{},{},{}\n",
            t + 1,
            loss,
            trace.ftl_objective_values[t],
            running
        ));
    }
    out
}

/// Run the follow-the-meta-leader protocol per the config.
pub fn ftml_run(config: &OnlineConfig) -> Result<RegretTrace, OnlineError> {
    config.validate()?;
    match config.instantiation {
        Instantiation::ConvexQuadratic => {
            let stream = Rng::new(Rng::derive_seed(config.seed, streams::ONLINE));
            let costs: Vec<f64> = (0..config.horizon as u64)
                .map(|t| stream.child(t).uniform_in(-1.0, 1.0))
                .collect();
            Ok(ftml_run_convex(&costs))
        }
        Instantiation::FeatureNetwork => ftml_run_feature_network(config),
    }
}

/// The exactly solvable instantiation: losses `(h - c_t)^2` over scalar `h`
/// starting from `h_1 = 0`; the leader after round `t` is `mean(c_1..c_t)`.
pub fn ftml_run_convex(costs: &[f64]) -> RegretTrace {
    assert!(!costs.is_empty(), "at least one round");
    let mut losses = Vec::with_capacity(costs.len());
    let mut ftl_objective_values = Vec::with_capacity(costs.len());
    let mut prefix_comparators = Vec::with_capacity(costs.len());
    let mut max_grad_norm = 0.0f64;

    let mut h = 0.0f64;
    let mut cost_sum = 0.0f64;
    let mut cost_sq_sum = 0.0f64;
    for (idx, c) in costs.iter().enumerate() {
        let t = (idx + 1) as f64;
        losses.push((h - c) * (h - c));
        max_grad_norm = max_grad_norm.max((2.0 * (h - c)).abs());

        cost_sum += c;
        cost_sq_sum += c * c;
        let mean = cost_sum / t;
        // min_h sum_{k<=t} (h - c_k)^2 = sum c^2 - t mean^2, at h = mean
        let comparator = cost_sq_sum - t * mean * mean;
        prefix_comparators.push(comparator.max(0.0));
        h = mean;
        // the new leader attains the prefix minimum exactly
        ftl_objective_values.push(comparator.max(0.0));
    }

    RegretTrace {
        comparator: *prefix_comparators.last().expect("non-empty"),
        losses,
        ftl_objective_values,
        prefix_comparators,
        comparator_exact: true,
        max_grad_norm,
    }
}

struct RoundEpisode {
    support_x: Vec<f64>,
    support_y: Vec<f64>,
    query_x: Vec<f64>,
    query_y: Vec<f64>,
}

impl RoundEpisode {
    fn from_episode(ep: &Episode) -> Self {
        RoundEpisode {
            support_x: ep.support.iter().map(|p| p[0]).collect(),
            support_y: ep.support.iter().map(|p| p[1]).collect(),
            query_x: ep.query.iter().map(|p| p[0]).collect(),
            query_y: ep.query.iter().map(|p| p[1]).collect(),
        }
    }
}

/// Round loss `l_k(h)` as a graph node: one inner gradient step from zero,
/// `w = (2 alpha / m) Z^T y`, then mean square query loss.
fn round_loss_node(
    graph: &mut Graph,
    h: &MetaLearnerParams,
    nodes: &crate::model::MetaLearnerNodes,
    ep: &RoundEpisode,
    alpha: f64,
) -> Result<NodeId, BilevelError> {
    let feat_s = h.features_node(graph, nodes, &ep.support_x)?;
    let y_s = graph.constant(Tensor::column(&ep.support_y));
    let zty = graph.matmul(feat_s, y_s)?;
    let w = graph.scale(zty, 2.0 * alpha / ep.support_x.len() as f64);
    let feat_q = h.features_node(graph, nodes, &ep.query_x)?;
    let w_row = graph.transpose(w);
    let pred = graph.matmul(w_row, feat_q)?;
    let y_q = graph.constant(Tensor::row(&ep.query_y));
    let resid = graph.sub(pred, y_q)?;
    let sq = graph.square(resid);
    Ok(graph.mean(sq))
}

/// Stored-history objective `sum_{k<=t} l_k(h)` and its gradients.
fn history_objective(
    h: &MetaLearnerParams,
    history: &[RoundEpisode],
    alpha: f64,
) -> Result<(f64, Vec<Vec<f64>>), BilevelError> {
    let mut graph = Graph::new();
    let nodes = h.insert_leaves(&mut graph);
    let mut total: Option<NodeId> = None;
    for ep in history {
        let loss = round_loss_node(&mut graph, h, &nodes, ep, alpha)?;
        total = Some(match total {
            None => loss,
            Some(acc) => graph.add(acc, loss)?,
        });
    }
    let total = total.expect("non-empty history");
    let grads = graph.backward(total)?;
    let param_grads = nodes
        .all()
        .into_iter()
        .map(|id| grads.get(id).data().to_vec())
        .collect();
    Ok((graph.value(total).item(), param_grads))
}

fn ftml_run_feature_network(config: &OnlineConfig) -> Result<RegretTrace, OnlineError> {
    let env = EnvironmentConfig {
        support_size: config.support_size,
        query_size: config.query_size,
        seed: Rng::derive_seed(config.seed, streams::ONLINE),
        ..Default::default()
    };
    let mut init_rng = Rng::new(Rng::derive_seed(config.seed, streams::INIT));
    let mut h = MetaLearnerParams::init(
        config.hidden_dim,
        config.feature_dim,
        Activation::Relu,
        &mut init_rng,
    );

    let mut history: Vec<RoundEpisode> = Vec::with_capacity(config.horizon);
    let mut losses = Vec::with_capacity(config.horizon);
    let mut ftl_objective_values = Vec::with_capacity(config.horizon);
    let mut prefix_comparators = Vec::with_capacity(config.horizon);
    let mut max_grad_norm = 0.0f64;

    for t in 0..config.horizon {
        let episode =
            sample_indexed_episode(&env, t as u64, env.support_size, env.query_size)?;
        let round = RoundEpisode::from_episode(&episode);

        // incur the round loss at the current meta-parameters
        let (loss, grads) =
            history_objective(&h, std::slice::from_ref(&round), config.inner_step_size)?;
        losses.push(loss);
        let grad_norm = grads
            .iter()
            .flatten()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        max_grad_norm = max_grad_norm.max(grad_norm);

        history.push(round);

        // follow the meta-leader: optimize the stored-history objective
        let objective = ftl_minimize(&mut h, &history, config)?;
        ftl_objective_values.push(objective);
        prefix_comparators.push(objective);
    }

    Ok(RegretTrace {
        comparator: *prefix_comparators.last().expect("non-empty"),
        losses,
        ftl_objective_values,
        prefix_comparators,
        comparator_exact: false,
        max_grad_norm,
    })
}

/// Adam on the stored-history objective until an epoch improves it by less
/// than the tolerance. Returns the final objective value.
fn ftl_minimize(
    h: &mut MetaLearnerParams,
    history: &[RoundEpisode],
    config: &OnlineConfig,
) -> Result<f64, OnlineError> {
    let mut adam = AdamOptimizer::new(0.001, &h.param_sizes());
    let (mut value, mut grads) = history_objective(h, history, config.inner_step_size)?;
    for _ in 0..config.ftl_max_epochs {
        let mut parts: Vec<Vec<f64>> =
            h.params().iter().map(|t| t.data().to_vec()).collect();
        {
            let mut param_refs: Vec<&mut [f64]> =
                parts.iter_mut().map(|p| p.as_mut_slice()).collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(|g| g.as_slice()).collect();
            adam.step(&mut param_refs, &grad_refs);
        }
        h.set_params(&parts);
        let (next, next_grads) = history_objective(h, history, config.inner_step_size)?;
        let improved = value - next;
        value = next;
        grads = next_grads;
        if improved.abs() < config.ftl_tolerance {
            break;
        }
    }
    Ok(value)
}
