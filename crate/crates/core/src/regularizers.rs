//! Composable meta-regularization strategies.
//!
//! - tanh head: bounds the feature norm by switching the last activation;
//! - norm penalty: `lambda1 ||w||^2` on the inner objective at train time,
//!   `lambda2 ||w||^2` at meta-test adaptation;
//! - diversity penalty: `-lambda3 * sigma_min(P^T P / |P|)` on the inner
//!   objective, with `P` a rolling buffer of recent detached task weights
//!   plus the live task's weight as the last row (gradient flows only
//!   through the live row);
//! - distance-to-init penalty: `lambda * sum_j ||W_j - W_j^0||_F^2` on the
//!   outer objective.
//!
//! All strategies are independent and additive; the baseline has every
//! penalty identically zero.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Graph, NodeId, Tensor};
use crate::linalg::{sigma_min, WeightStack};
use crate::model::{Activation, MetaLearnerNodes, MetaLearnerParams};

#[derive(Debug, Error)]
pub enum RegularizerError {
    #[error("{name} must be non-negative, got {value}")]
    NegativeLambda { name: &'static str, value: f64 },
    #[error("diversity buffer_size {buffer_size} must be at least the feature dimension {feature_dim}")]
    BufferTooSmall { buffer_size: usize, feature_dim: usize },
    #[error("unknown strategy label '{0}'")]
    UnknownLabel(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormPenalty {
    pub lambda1: f64,
    pub lambda2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiversityPenalty {
    pub lambda3: f64,
    pub buffer_size: usize,
}

impl Default for DiversityPenalty {
    fn default() -> Self {
        DiversityPenalty {
            lambda3: 10.0,
            buffer_size: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistToInitPenalty {
    pub lambda: f64,
}

/// Which strategies are active. Strategies are combinable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerSpec {
    pub tanh_head: bool,
    pub norm: Option<NormPenalty>,
    pub diversity: Option<DiversityPenalty>,
    pub l2sp: Option<DistToInitPenalty>,
}

/// Whether a penalty is evaluated during meta-training or meta-test
/// adaptation; the norm penalty switches its coefficient between the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    MetaTest,
}

impl RegularizerSpec {
    pub fn baseline() -> Self {
        RegularizerSpec::default()
    }

    /// The paper-style experiment presets, by figure label.
    pub fn from_label(label: &str) -> Result<Self, RegularizerError> {
        let mut spec = RegularizerSpec::default();
        if label == "ReLU" {
            return Ok(spec);
        }
        for part in label.split('+') {
            match part {
                "Tanh" => spec.tanh_head = true,
                "Norm" => {
                    spec.norm = Some(NormPenalty {
                        lambda1: 1.0,
                        lambda2: 1.0,
                    })
                }
                "Diverse" => spec.diversity = Some(DiversityPenalty::default()),
                "L2-SP" => spec.l2sp = Some(DistToInitPenalty { lambda: 0.1 }),
                _ => return Err(RegularizerError::UnknownLabel(label.to_string())),
            }
        }
        Ok(spec)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.tanh_head {
            parts.push("Tanh");
        }
        if self.norm.is_some() {
            parts.push("Norm");
        }
        if self.diversity.is_some() {
            parts.push("Diverse");
        }
        if self.l2sp.is_some() {
            parts.push("L2-SP");
        }
        if parts.is_empty() {
            "ReLU".to_string()
        } else {
            parts.join("+")
        }
    }

    pub fn validate(&self, feature_dim: usize) -> Result<(), RegularizerError> {
        if let Some(n) = &self.norm {
            for (name, value) in [("lambda1", n.lambda1), ("lambda2", n.lambda2)] {
                if value < 0.0 {
                    return Err(RegularizerError::NegativeLambda { name, value });
                }
            }
        }
        if let Some(d) = &self.diversity {
            if d.lambda3 < 0.0 {
                return Err(RegularizerError::NegativeLambda {
                    name: "lambda3",
                    value: d.lambda3,
                });
            }
            if d.buffer_size < feature_dim {
                return Err(RegularizerError::BufferTooSmall {
                    buffer_size: d.buffer_size,
                    feature_dim,
                });
            }
        }
        if let Some(l) = &self.l2sp {
            if l.lambda < 0.0 {
                return Err(RegularizerError::NegativeLambda {
                    name: "lambda",
                    value: l.lambda,
                });
            }
        }
        Ok(())
    }

    /// Head activation implied by the spec.
    pub fn head_activation(&self) -> Activation {
        if self.tanh_head {
            Activation::Tanh
        } else {
            Activation::Relu
        }
    }

    /// Coefficient of `||w||^2` in the inner objective for the phase.
    pub fn norm_lambda(&self, phase: Phase) -> f64 {
        match (&self.norm, phase) {
            (Some(n), Phase::Train) => n.lambda1,
            (Some(n), Phase::MetaTest) => n.lambda2,
            (None, _) => 0.0,
        }
    }
}

/// `lambda ||w||^2` as a graph node (zero constant when inactive).
pub fn inner_penalty(
    graph: &mut Graph,
    w: NodeId,
    spec: &RegularizerSpec,
    phase: Phase,
) -> NodeId {
    let lambda = spec.norm_lambda(phase);
    if lambda == 0.0 {
        return graph.constant(Tensor::scalar(0.0));
    }
    let sq = graph.frob_sq(w);
    graph.scale(sq, lambda)
}

/// `lambda sum_j ||theta_j - theta_j^0||_F^2` over all parameter tensors,
/// as a graph node (zero when inactive).
pub fn outer_penalty(
    graph: &mut Graph,
    nodes: &MetaLearnerNodes,
    h: &MetaLearnerParams,
    spec: &RegularizerSpec,
) -> Result<NodeId, RegularizerError> {
    let Some(l2sp) = &spec.l2sp else {
        return Ok(graph.constant(Tensor::scalar(0.0)));
    };
    let mut total: Option<NodeId> = None;
    for (node, init) in nodes.all().into_iter().zip(h.initial_params()) {
        let reference = graph.constant(init.clone());
        let diff = graph.sub(node, reference)?;
        let sq = graph.frob_sq(diff);
        total = Some(match total {
            None => sq,
            Some(acc) => graph.add(acc, sq)?,
        });
    }
    Ok(graph.scale(total.expect("four parameters"), l2sp.lambda))
}

/// Ring buffer of detached task weight vectors, oldest evicted first.
#[derive(Debug, Clone)]
pub struct DiversityBuffer {
    rows: VecDeque<Vec<f64>>,
    capacity: usize,
    dim: usize,
}

impl DiversityBuffer {
    pub fn new(capacity: usize, dim: usize) -> Self {
        DiversityBuffer {
            rows: VecDeque::with_capacity(capacity),
            capacity,
            dim,
        }
    }

    pub fn push(&mut self, w: Vec<f64>) {
        debug_assert_eq!(w.len(), self.dim);
        if self.rows.len() == self.capacity {
            self.rows.pop_front();
        }
        self.rows.push_back(w);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.rows.iter().cloned().collect()
    }

    /// Can the buffer plus one live row span the feature space?
    pub fn warmed_up(&self) -> bool {
        self.rows.len() + 1 >= self.dim
    }

    /// `sigma_min(P^T P / len)` over the buffer contents alone; 0 while the
    /// buffer cannot have full rank.
    pub fn sigma_min_of_contents(&self) -> f64 {
        if self.rows.len() < self.dim {
            return 0.0;
        }
        let rows: Vec<Vec<f64>> = self.rows.iter().cloned().collect();
        let stack = WeightStack::from_rows(&rows).expect("buffer rows are finite");
        sigma_min(&stack, rows.len())
    }
}

/// Result of evaluating the diversity term.
#[derive(Debug, Clone, Copy)]
pub struct DiversityTerm {
    pub node: NodeId,
    /// Buffer plus live row cannot span the feature space yet; the term is
    /// zero with zero gradient.
    pub warmup: bool,
    /// Smallest-eigenvalue eigengap below tolerance; the gradient is one
    /// valid subgradient.
    pub degenerate: bool,
}

/// `-lambda3 * sigma_min(P^T P / |P|)`, graph-connected through the live
/// weight column only.
pub fn diversity_term(
    graph: &mut Graph,
    buffer: &DiversityBuffer,
    current_w: NodeId,
    lambda3: f64,
) -> Result<DiversityTerm, RegularizerError> {
    let warmup = !buffer.warmed_up();
    let rows = buffer.rows();
    let sig = graph.sigma_min_row(current_w, &rows)?;
    let degenerate = graph.sigma_min_degenerate(sig).unwrap_or(false);
    let node = graph.scale(sig, -lambda3);
    Ok(DiversityTerm {
        node,
        warmup,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn baseline_penalties_are_zero() {
        let spec = RegularizerSpec::baseline();
        assert_eq!(spec.label(), "ReLU");
        assert_eq!(spec.head_activation(), Activation::Relu);

        let mut g = Graph::new();
        let w = g.leaf(Tensor::column(&[3.0, 4.0]));
        let pen = inner_penalty(&mut g, w, &spec, Phase::Train);
        assert_eq!(g.value(pen).item(), 0.0);
    }

    #[test]
    fn norm_penalty_value() {
        let spec = RegularizerSpec {
            norm: Some(NormPenalty {
                lambda1: 1.0,
                lambda2: 1.0,
            }),
            ..Default::default()
        };
        let mut w = vec![0.0; 40];
        w[0] = 3.0;
        w[1] = 4.0;
        let mut g = Graph::new();
        let wn = g.leaf(Tensor::column(&w));
        let pen = inner_penalty(&mut g, wn, &spec, Phase::Train);
        assert_eq!(g.value(pen).item(), 25.0);
        let pen_test = inner_penalty(&mut g, wn, &spec, Phase::MetaTest);
        assert_eq!(g.value(pen_test).item(), 25.0);
    }

    #[test]
    fn label_round_trips() {
        for label in ["ReLU", "Tanh", "Norm", "Diverse", "Tanh+Norm", "L2-SP"] {
            let spec = RegularizerSpec::from_label(label).unwrap();
            assert_eq!(spec.label(), label);
        }
        assert!(RegularizerSpec::from_label("Sigmoid").is_err());
    }

    #[test]
    fn paper_presets_carry_stated_lambdas() {
        let norm = RegularizerSpec::from_label("Norm").unwrap().norm.unwrap();
        assert_eq!((norm.lambda1, norm.lambda2), (1.0, 1.0));
        let div = RegularizerSpec::from_label("Diverse")
            .unwrap()
            .diversity
            .unwrap();
        assert_eq!(div.lambda3, 10.0);
        let l2sp = RegularizerSpec::from_label("L2-SP").unwrap().l2sp.unwrap();
        assert_eq!(l2sp.lambda, 0.1);
        let combo = RegularizerSpec::from_label("Tanh+Norm").unwrap();
        assert!(combo.tanh_head && combo.norm.is_some());
        assert_eq!(combo.head_activation(), Activation::Tanh);
    }

    #[test]
    fn validate_rejects_bad_specs() {
        let spec = RegularizerSpec {
            norm: Some(NormPenalty {
                lambda1: -0.5,
                lambda2: 1.0,
            }),
            ..Default::default()
        };
        assert!(matches!(
            spec.validate(40),
            Err(RegularizerError::NegativeLambda { .. })
        ));

        let spec = RegularizerSpec {
            diversity: Some(DiversityPenalty {
                lambda3: 10.0,
                buffer_size: 8,
            }),
            ..Default::default()
        };
        assert!(matches!(
            spec.validate(40),
            Err(RegularizerError::BufferTooSmall { .. })
        ));
    }

    #[test]
    fn outer_penalty_zero_at_init_and_counts_deviation() {
        let mut rng = Rng::new(3);
        let spec = RegularizerSpec {
            l2sp: Some(DistToInitPenalty { lambda: 0.1 }),
            ..Default::default()
        };
        let h = MetaLearnerParams::init(3, 3, Activation::Relu, &mut rng);
        let mut g = Graph::new();
        let nodes = h.insert_leaves(&mut g);
        let pen = outer_penalty(&mut g, &nodes, &h, &spec).unwrap();
        assert_eq!(g.value(pen).item(), 0.0);

        // single entry moved by 2 -> 0.1 * 4
        let mut parts: Vec<Vec<f64>> =
            h.params().iter().map(|t| t.data().to_vec()).collect();
        parts[0][0] += 2.0;
        let mut h2 = h.clone();
        h2.set_params(&parts);
        let mut g = Graph::new();
        let nodes = h2.insert_leaves(&mut g);
        let pen = outer_penalty(&mut g, &nodes, &h2, &spec).unwrap();
        assert!((g.value(pen).item() - 0.4).abs() < 1e-12);
    }

    #[test]
    fn buffer_evicts_oldest_first() {
        let mut buf = DiversityBuffer::new(3, 2);
        for k in 0..5 {
            buf.push(vec![k as f64, 0.0]);
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.rows()[0], vec![2.0, 0.0]);
        assert_eq!(buf.rows()[2], vec![4.0, 0.0]);
    }

    #[test]
    fn duplicated_rows_give_zero_diversity_value() {
        let mut buf = DiversityBuffer::new(8, 2);
        for _ in 0..4 {
            buf.push(vec![1.0, 1.0]);
        }
        let mut g = Graph::new();
        let w = g.leaf(Tensor::column(&[1.0, 1.0]));
        let term = diversity_term(&mut g, &buf, w, 10.0).unwrap();
        assert!(!term.warmup);
        assert!(g.value(term.node).item().abs() < 1e-12);
    }

    #[test]
    fn spanning_buffer_gives_positive_sigma() {
        // scaled standard basis repeated: 41 rows spanning R^4 here scaled
        // down to dim 4 for test speed
        let dim = 4;
        let mut buf = DiversityBuffer::new(64, dim);
        for k in 0..8 {
            let mut row = vec![0.0; dim];
            row[k % dim] = 1.0 + k as f64 * 0.1;
            buf.push(row);
        }
        let mut g = Graph::new();
        let w = g.leaf(Tensor::column(&vec![0.5; dim]));
        let term = diversity_term(&mut g, &buf, w, 1.0).unwrap();
        assert!(!term.warmup);
        assert!(g.value(term.node).item() < 0.0, "sigma_min should be > 0");
        assert!(buf.sigma_min_of_contents() > 0.0);
    }

    #[test]
    fn lambda_zero_gives_identically_zero_term_and_gradient() {
        let mut buf = DiversityBuffer::new(8, 2);
        buf.push(vec![1.0, 0.0]);
        buf.push(vec![0.0, 1.0]);
        let mut g = Graph::new();
        let w = g.leaf(Tensor::column(&[0.3, 0.4]));
        let term = diversity_term(&mut g, &buf, w, 0.0).unwrap();
        assert_eq!(g.value(term.node).item(), -0.0);
        let grads = g.backward(term.node).unwrap();
        assert!(grads.get(w).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn warmup_buffer_reports_flag_and_zero_gradient() {
        let buf = DiversityBuffer::new(8, 5);
        let mut g = Graph::new();
        let w = g.leaf(Tensor::column(&[1.0, 2.0, 3.0, 4.0, 5.0]));
        let term = diversity_term(&mut g, &buf, w, 10.0).unwrap();
        assert!(term.warmup);
        assert_eq!(g.value(term.node).item(), -0.0);
        let grads = g.backward(term.node).unwrap();
        assert!(grads.get(w).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn diversity_term_is_buffer_order_invariant_and_non_positive() {
        let mut rng = Rng::new(21);
        let dim = 3;
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .collect();
        let w: Vec<f64> = (0..dim).map(|_| rng.uniform_in(-1.0, 1.0)).collect();

        let value_for = |order: &[usize]| {
            let mut buf = DiversityBuffer::new(16, dim);
            for &i in order {
                buf.push(rows[i].clone());
            }
            let mut g = Graph::new();
            let wn = g.leaf(Tensor::column(&w));
            let term = diversity_term(&mut g, &buf, wn, 7.0).unwrap();
            g.value(term.node).item()
        };

        let a = value_for(&[0, 1, 2, 3, 4, 5]);
        let b = value_for(&[5, 3, 1, 0, 4, 2]);
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        assert!(a <= 0.0);
    }
}
