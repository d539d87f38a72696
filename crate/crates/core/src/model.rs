//! The feature network `h(x) = act(W2 relu(W1 x + b1) + b2)` and the linear
//! task learner `f(z) = w . z` (no bias on the head).
//!
//! The head activation is either `relu` (baseline) or `tanh` (bounds the
//! feature norm by `sqrt(feature_dim)`). The construction-time parameter
//! snapshot backs the distance-to-initialization penalty.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{EngineError, Graph, NodeId, Tensor};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("learner dimension {learner} does not match feature dimension {features}")]
    DimMismatch { learner: usize, features: usize },
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint blob: {0}")]
    Base64(#[from] base64::DecodeError),
    #[error("checkpoint blob length {len} bytes does not match shape {rows}x{cols}")]
    BlobLength { len: usize, rows: usize, cols: usize },
    #[error("checkpoint must contain exactly 4 parameter blobs, got {0}")]
    LayerCount(usize),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

/// Parameters of the feature network, plus the immutable snapshot taken at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaLearnerParams {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    head: Activation,
    initial: [Tensor; 4],
}

/// Leaf handles for the feature network inside one graph, in parameter
/// order `w1, b1, w2, b2`.
#[derive(Debug, Clone, Copy)]
pub struct MetaLearnerNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl MetaLearnerNodes {
    pub fn all(&self) -> [NodeId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

impl MetaLearnerParams {
    /// Initialization: weights uniform fan-in
    /// (`U[-1/sqrt(fan_in), 1/sqrt(fan_in)]`); the first-layer bias places
    /// each hidden unit's kink uniformly inside
    /// `[-input_half_width, input_half_width]` (`b = -w * u`), so no unit is
    /// inactive over the whole input range. Draw order: `w1`, kinks, `w2`,
    /// `b2`.
    pub fn init_for_range(
        hidden_dim: usize,
        feature_dim: usize,
        head: Activation,
        input_half_width: f64,
        rng: &mut Rng,
    ) -> Self {
        let w1 = uniform_fan_in(hidden_dim, 1, 1, rng);
        let b1_data: Vec<f64> = w1
            .data()
            .iter()
            .map(|w| -w * rng.uniform_in(-input_half_width, input_half_width))
            .collect();
        let b1 = Tensor::new(hidden_dim, 1, b1_data).expect("shape matches");
        let w2 = uniform_fan_in(feature_dim, hidden_dim, hidden_dim, rng);
        // anchor each feature's pre-activation to be positive at one random
        // input, so no relu feature starts dead over the bounded range
        let hidden_at = |x: f64| -> Vec<f64> {
            w1.data()
                .iter()
                .zip(b1.data())
                .map(|(w, b)| (w * x + b).max(0.0))
                .collect()
        };
        let b2_data: Vec<f64> = (0..feature_dim)
            .map(|k| {
                let anchor = rng.uniform_in(-input_half_width, input_half_width);
                let hidden = hidden_at(anchor);
                let pre: f64 = w2.data()[k * hidden_dim..(k + 1) * hidden_dim]
                    .iter()
                    .zip(&hidden)
                    .map(|(a, b)| a * b)
                    .sum();
                0.1 - pre
            })
            .collect();
        let b2 = Tensor::new(feature_dim, 1, b2_data).expect("shape matches");
        Self::from_weights(w1, b1, w2, b2, head)
    }

    /// [`Self::init_for_range`] at the benchmark input range `[-5, 5]`.
    pub fn init(hidden_dim: usize, feature_dim: usize, head: Activation, rng: &mut Rng) -> Self {
        Self::init_for_range(hidden_dim, feature_dim, head, 5.0, rng)
    }

    /// The benchmark architecture: 1 -> 40 -> 40 features.
    pub fn standard(head: Activation, rng: &mut Rng) -> Self {
        Self::init(40, 40, head, rng)
    }

    pub fn from_weights(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor, head: Activation) -> Self {
        assert_eq!(w1.cols(), 1, "first layer takes a scalar input");
        assert_eq!(b1.shape(), (w1.rows(), 1), "first bias matches hidden width");
        assert_eq!(w2.cols(), w1.rows(), "layer shapes must chain");
        assert_eq!(b2.shape(), (w2.rows(), 1), "second bias matches feature width");
        MetaLearnerParams {
            initial: [w1.clone(), b1.clone(), w2.clone(), b2.clone()],
            w1,
            b1,
            w2,
            b2,
            head,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.w2.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn head(&self) -> Activation {
        self.head
    }

    /// Live parameters in `w1, b1, w2, b2` order.
    pub fn params(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    /// Construction-time snapshot in the same order.
    pub fn initial_params(&self) -> [&Tensor; 4] {
        [
            &self.initial[0],
            &self.initial[1],
            &self.initial[2],
            &self.initial[3],
        ]
    }

    /// Weight matrices only (no biases), for norm-product diagnostics.
    pub fn weight_matrices(&self) -> [&Tensor; 2] {
        [&self.w1, &self.w2]
    }

    pub fn param_sizes(&self) -> Vec<usize> {
        self.params().iter().map(|t| t.data().len()).collect()
    }

    /// Replace the live parameters (flat, in parameter order), keeping the
    /// initialization snapshot.
    pub fn set_params(&mut self, parts: &[Vec<f64>]) {
        assert_eq!(parts.len(), 4, "expected w1, b1, w2, b2");
        let shapes: Vec<(usize, usize)> =
            self.params().iter().map(|t| t.shape()).collect();
        let mut tensors = parts.iter().zip(&shapes).map(|(data, &(r, c))| {
            Tensor::new(r, c, data.clone()).expect("parameter shapes are fixed")
        });
        self.w1 = tensors.next().expect("four parts");
        self.b1 = tensors.next().expect("four parts");
        self.w2 = tensors.next().expect("four parts");
        self.b2 = tensors.next().expect("four parts");
    }

    /// Insert the parameters as leaves of `graph`.
    pub fn insert_leaves(&self, graph: &mut Graph) -> MetaLearnerNodes {
        MetaLearnerNodes {
            w1: graph.leaf(self.w1.clone()),
            b1: graph.leaf(self.b1.clone()),
            w2: graph.leaf(self.w2.clone()),
            b2: graph.leaf(self.b2.clone()),
        }
    }

    /// Feature matrix for a batch of scalar inputs, graph-connected:
    /// returns a `feature_dim x len(xs)` node whose column `j` is `h(xs[j])`.
    /// Biases broadcast across the batch via a ones row.
    pub fn features_node(
        &self,
        graph: &mut Graph,
        nodes: &MetaLearnerNodes,
        xs: &[f64],
    ) -> Result<NodeId, EngineError> {
        let x_row = graph.constant(Tensor::row(xs));
        let ones = graph.constant(Tensor::filled(1, xs.len(), 1.0));
        let wx = graph.matmul(nodes.w1, x_row)?;
        let b1_cols = graph.matmul(nodes.b1, ones)?;
        let pre1 = graph.add(wx, b1_cols)?;
        let hidden = graph.relu(pre1);
        let w2h = graph.matmul(nodes.w2, hidden)?;
        let b2_cols = graph.matmul(nodes.b2, ones)?;
        let pre2 = graph.add(w2h, b2_cols)?;
        Ok(match self.head {
            Activation::Relu => graph.relu(pre2),
            Activation::Tanh => graph.tanh(pre2),
        })
    }

    /// Plain forward pass, no graph. Returns `h(x)`.
    pub fn features(&self, x: f64) -> Vec<f64> {
        let hidden: Vec<f64> = self
            .w1
            .data()
            .iter()
            .zip(self.b1.data())
            .map(|(w, b)| (w * x + b).max(0.0))
            .collect();
        let d = self.feature_dim();
        let hdim = self.w1.rows();
        let mut out = vec![0.0; d];
        for i in 0..d {
            let row = &self.w2.data()[i * hdim..(i + 1) * hdim];
            let pre: f64 = row.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>()
                + self.b2.data()[i];
            out[i] = match self.head {
                Activation::Relu => pre.max(0.0),
                Activation::Tanh => pre.tanh(),
            };
        }
        out
    }

    /// Distance-to-initialization `sum_j ||theta_j - theta_j^0||_F^2` over
    /// all four parameter tensors.
    pub fn distance_to_init_sq(&self) -> f64 {
        self.params()
            .iter()
            .zip(self.initial_params())
            .map(|(live, init)| {
                live.data()
                    .iter()
                    .zip(init.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum()
    }

    pub fn to_checkpoint_json(&self) -> String {
        let ckpt = Checkpoint {
            activation: self.head,
            layers: self.params().iter().map(|t| blob(t)).collect(),
            initial_layers: self.initial_params().iter().map(|t| blob(t)).collect(),
        };
        serde_json::to_string_pretty(&ckpt).expect("checkpoint serialization cannot fail")
    }

    pub fn from_checkpoint_json(json: &str) -> Result<Self, ModelError> {
        let ckpt: Checkpoint = serde_json::from_str(json)?;
        if ckpt.layers.len() != 4 || ckpt.initial_layers.len() != 4 {
            return Err(ModelError::LayerCount(ckpt.layers.len()));
        }
        let live: Vec<Tensor> = ckpt
            .layers
            .iter()
            .map(unblob)
            .collect::<Result<_, _>>()?;
        let init: Vec<Tensor> = ckpt
            .initial_layers
            .iter()
            .map(unblob)
            .collect::<Result<_, _>>()?;
        let [w1, b1, w2, b2] = <[Tensor; 4]>::try_from(live).expect("length checked");
        Ok(MetaLearnerParams {
            w1,
            b1,
            w2,
            b2,
            head: ckpt.activation,
            initial: <[Tensor; 4]>::try_from(init).expect("length checked"),
        })
    }
}

fn uniform_fan_in(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.uniform_in(-bound, bound))
        .collect();
    Tensor::new(rows, cols, data).expect("shape matches generated data")
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    activation: Activation,
    /// `w1, b1, w2, b2`.
    layers: Vec<WeightBlob>,
    initial_layers: Vec<WeightBlob>,
}

/// Parameter tensor as base64-encoded little-endian f64 bytes.
#[derive(Serialize, Deserialize)]
struct WeightBlob {
    rows: usize,
    cols: usize,
    data: String,
}

fn blob(t: &Tensor) -> WeightBlob {
    let mut bytes = Vec::with_capacity(t.data().len() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    WeightBlob {
        rows: t.rows(),
        cols: t.cols(),
        data: BASE64.encode(bytes),
    }
}

fn unblob(b: &WeightBlob) -> Result<Tensor, ModelError> {
    let bytes = BASE64.decode(&b.data)?;
    if bytes.len() != b.rows * b.cols * 8 {
        return Err(ModelError::BlobLength {
            len: bytes.len(),
            rows: b.rows,
            cols: b.cols,
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk size is 8")))
        .collect();
    Tensor::new(b.rows, b.cols, data).map_err(ModelError::from)
}

/// Anything that maps a scalar input to a feature vector. Adaptation and
/// evaluation only need this surface of the meta-learner.
pub trait FeatureMap: Sync {
    fn feature_dim(&self) -> usize;
    fn features(&self, x: f64) -> Vec<f64>;
}

impl FeatureMap for MetaLearnerParams {
    fn feature_dim(&self) -> usize {
        MetaLearnerParams::feature_dim(self)
    }

    fn features(&self, x: f64) -> Vec<f64> {
        MetaLearnerParams::features(self, x)
    }
}

/// Task-specific linear learner: `f(z) = w . z`, no bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerParams {
    pub w: Vec<f64>,
}

impl LearnerParams {
    pub fn zeros(dim: usize) -> Self {
        LearnerParams { w: vec![0.0; dim] }
    }

    pub fn norm(&self) -> f64 {
        self.w.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn predict(&self, z: &[f64]) -> Result<f64, ModelError> {
        if z.len() != self.w.len() {
            return Err(ModelError::DimMismatch {
                learner: self.w.len(),
                features: z.len(),
            });
        }
        Ok(self.w.iter().zip(z).map(|(a, b)| a * b).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn zero_weights_give_zero_features_for_both_heads() {
        for head in [Activation::Relu, Activation::Tanh] {
            let h = MetaLearnerParams::from_weights(
                Tensor::zeros(3, 1),
                Tensor::zeros(3, 1),
                Tensor::zeros(3, 3),
                Tensor::zeros(3, 1),
                head,
            );
            for x in [-2.0, 0.0, 1.7] {
                assert!(h.features(x).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn tanh_head_norm_stays_below_sqrt_dim() {
        let mut rng = Rng::new(123);
        let bound = 40f64.sqrt();
        for _ in 0..50 {
            let h = MetaLearnerParams::standard(Activation::Tanh, &mut rng);
            for _ in 0..200 {
                let x = rng.uniform_in(-5.0, 5.0);
                let z = h.features(x);
                assert!(norm(&z) < bound);
            }
        }
    }

    #[test]
    fn relu_head_norm_bounded_by_frobenius_terms() {
        let mut rng = Rng::new(5);
        for _ in 0..20 {
            let h = MetaLearnerParams::standard(Activation::Relu, &mut rng);
            let [w1, b1, w2, b2] = h.params();
            for _ in 0..100 {
                let x = rng.uniform_in(-5.0, 5.0);
                let z = h.features(x);
                let cap = w2.frob_norm() * (w1.frob_norm() * x.abs() + b1.frob_norm())
                    + b2.frob_norm();
                assert!(norm(&z) <= cap + 1e-12);
            }
        }
    }

    #[test]
    fn hand_built_toy_matches_pencil_forward() {
        // 1 -> 2 -> 2, relu head
        // w1 = [2, -1]^T, b1 = [1, 0]^T, w2 = [[1, 1], [0.5, -1]], b2 = [0, 0.5]^T
        let h = MetaLearnerParams::from_weights(
            Tensor::new(2, 1, vec![2.0, -1.0]).unwrap(),
            Tensor::new(2, 1, vec![1.0, 0.0]).unwrap(),
            Tensor::new(2, 2, vec![1.0, 1.0, 0.5, -1.0]).unwrap(),
            Tensor::new(2, 1, vec![0.0, 0.5]).unwrap(),
            Activation::Relu,
        );
        // x = 3: pre1 = [7, -3], hidden = [7, 0]
        // pre2 = [7*1 + 0*1 + 0, 7*0.5 + 0*(-1) + 0.5] = [7, 4]; relu -> [7, 4]
        let z = h.features(3.0);
        assert!((z[0] - 7.0).abs() < 1e-12);
        assert!((z[1] - 4.0).abs() < 1e-12);
        // x = -1: pre1 = [-1, 1], hidden = [0, 1]
        // pre2 = [0 + 1, 0 - 1 + 0.5] = [1, -0.5]; relu -> [1, 0]
        let z = h.features(-1.0);
        assert!((z[0] - 1.0).abs() < 1e-12);
        assert_eq!(z[1], 0.0);
    }

    #[test]
    fn graph_features_match_plain_forward() {
        let mut rng = Rng::new(77);
        for head in [Activation::Relu, Activation::Tanh] {
            let h = MetaLearnerParams::init(6, 4, head, &mut rng);
            let xs = [-3.0, 0.4, 2.2];
            let mut g = Graph::new();
            let nodes = h.insert_leaves(&mut g);
            let feats = h.features_node(&mut g, &nodes, &xs).unwrap();
            let fv = g.value(feats);
            for (j, x) in xs.iter().enumerate() {
                let plain = h.features(*x);
                for i in 0..4 {
                    assert_eq!(fv.get(i, j), plain[i], "head {head:?} col {j} row {i}");
                }
            }
        }
    }

    #[test]
    fn predict_known_cases() {
        let w = LearnerParams::zeros(4);
        assert_eq!(w.predict(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 0.0);

        let mut e1 = LearnerParams::zeros(3);
        e1.w[0] = 1.0;
        assert_eq!(e1.predict(&[3.0, -1.0, 8.0]).unwrap(), 3.0);

        let w = LearnerParams {
            w: vec![0.5, -2.0],
        };
        assert!(matches!(
            w.predict(&[1.0, 2.0, 3.0]),
            Err(ModelError::DimMismatch { .. })
        ));
    }

    #[test]
    fn predict_against_independent_dot_product() {
        let mut rng = Rng::new(2);
        let w = LearnerParams {
            w: (0..7).map(|_| rng.uniform_in(-1.0, 1.0)).collect(),
        };
        let z: Vec<f64> = (0..7).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let mut expect = 0.0;
        for i in 0..7 {
            expect += w.w[i] * z[i];
        }
        assert_eq!(w.predict(&z).unwrap(), expect);
    }

    #[test]
    fn predict_is_linear_in_w() {
        let mut rng = Rng::new(8);
        let w1: Vec<f64> = (0..5).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let w2: Vec<f64> = (0..5).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let z: Vec<f64> = (0..5).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let (a, b) = (0.7, -1.3);
        let combo = LearnerParams {
            w: w1.iter().zip(&w2).map(|(p, q)| a * p + b * q).collect(),
        };
        let lhs = combo.predict(&z).unwrap();
        let rhs = a * LearnerParams { w: w1 }.predict(&z).unwrap()
            + b * LearnerParams { w: w2 }.predict(&z).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn seeded_init_is_reproducible_and_in_range() {
        let mut r1 = Rng::new(42);
        let mut r2 = Rng::new(42);
        let a = MetaLearnerParams::standard(Activation::Relu, &mut r1);
        let b = MetaLearnerParams::standard(Activation::Relu, &mut r2);
        assert_eq!(a, b);

        let [w1, b1, w2, b2] = a.params();
        assert!(w1.data().iter().all(|v| v.abs() <= 1.0));
        // kink position -b/w stays inside the input range
        for (w, b) in w1.data().iter().zip(b1.data()) {
            assert!((b / w).abs() <= 5.0 + 1e-12);
        }
        let bound2 = 1.0 / 40f64.sqrt();
        assert!(w2.data().iter().all(|v| v.abs() <= bound2));
        // b2 anchors features; its entries are bounded by the anchor math
        assert!(b2.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn every_relu_feature_is_alive_somewhere_in_range() {
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let h = MetaLearnerParams::standard(Activation::Relu, &mut rng);
            let mut max_feature = vec![0.0f64; 40];
            for k in 0..2001 {
                let x = -5.0 + 10.0 * k as f64 / 2000.0;
                for (m, z) in max_feature.iter_mut().zip(h.features(x)) {
                    *m = m.max(z);
                }
            }
            assert!(
                max_feature.iter().all(|&v| v > 0.0),
                "a feature is dead across the input range"
            );
        }
    }

    #[test]
    fn distance_to_init_zero_at_construction() {
        let mut rng = Rng::new(4);
        let h = MetaLearnerParams::standard(Activation::Tanh, &mut rng);
        assert_eq!(h.distance_to_init_sq(), 0.0);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let mut rng = Rng::new(31);
        let mut h = MetaLearnerParams::standard(Activation::Tanh, &mut rng);
        // perturb live parameters away from the snapshot
        let parts: Vec<Vec<f64>> = h
            .params()
            .iter()
            .map(|t| t.data().iter().map(|v| v + 0.25).collect())
            .collect();
        h.set_params(&parts);

        let json = h.to_checkpoint_json();
        let back = MetaLearnerParams::from_checkpoint_json(&json).unwrap();
        assert_eq!(back, h);
        assert!(back.distance_to_init_sq() > 0.0);
    }
}
