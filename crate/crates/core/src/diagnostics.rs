//! Numeric theory diagnostics: empirical Gaussian/Rademacher complexity,
//! discrepancy divergence between support and query samples, and a
//! term-by-term assembly of the transfer-error bound.
//!
//! Complexity estimators take a supremum oracle for the function class.
//! Closed-form oracles (linear ball, singleton) are exact per draw; the
//! feature-network class oracle maximizes by projected gradient ascent and
//! is explicitly a lower bound.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{grad_check, Graph, NodeId, Tensor};
use crate::linalg::{eigh_small, WeightStack};
use crate::model::FeatureMap;
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("Monte-Carlo estimation needs at least 2 draws, got {0}")]
    TooFewDraws(usize),
    #[error("exhaustive sign enumeration supports at most {max} sign slots, got {got}")]
    EnumerationTooLarge { max: usize, got: usize },
    #[error("sample is empty")]
    EmptySample,
    #[error("delta must lie in (0, 1), got {0}")]
    BadDelta(f64),
}

/// Supremum of the weighted empirical sum over a function class.
pub trait SupOracle {
    /// Output dimension `r` of the class members.
    fn output_dim(&self) -> usize;

    /// `sup_e (1/N) sum_i sum_k weights[i][k] * e_k(data[i])`.
    fn sup(&self, weights: &[Vec<f64>], data: &[Vec<f64>]) -> f64;

    /// False when the supremum is approximated from below.
    fn is_exact(&self) -> bool {
        true
    }
}

/// Linear functions `{x -> w . x : ||w|| <= radius}`; the supremum has the
/// closed form `(radius/N) ||sum_i g_i x_i||`.
#[derive(Debug, Clone, Copy)]
pub struct LinearBallOracle {
    pub radius: f64,
}

impl SupOracle for LinearBallOracle {
    fn output_dim(&self) -> usize {
        1
    }

    fn sup(&self, weights: &[Vec<f64>], data: &[Vec<f64>]) -> f64 {
        let n = data.len();
        let dim = data[0].len();
        let mut acc = vec![0.0f64; dim];
        for (g, x) in weights.iter().zip(data) {
            for (a, v) in acc.iter_mut().zip(x) {
                *a += g[0] * v;
            }
        }
        let norm = acc.iter().map(|v| v * v).sum::<f64>().sqrt();
        self.radius * norm / n as f64
    }
}

/// A one-element class: no supremum to take.
pub struct SingletonOracle<F: Fn(&[f64]) -> Vec<f64>> {
    pub func: F,
    pub output_dim: usize,
}

impl<F: Fn(&[f64]) -> Vec<f64>> SupOracle for SingletonOracle<F> {
    fn output_dim(&self) -> usize {
        self.output_dim
    }

    fn sup(&self, weights: &[Vec<f64>], data: &[Vec<f64>]) -> f64 {
        let n = data.len();
        let mut total = 0.0;
        for (g, x) in weights.iter().zip(data) {
            let e = (self.func)(x);
            total += g.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>();
        }
        total / n as f64
    }
}

/// Feature-network class over scalar inputs with Frobenius-ball weight
/// constraints, maximized by projected gradient ascent. A lower bound.
#[derive(Debug, Clone)]
pub struct FeatureClassOracle {
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub w1_bound: f64,
    pub w2_bound: f64,
    pub tanh_head: bool,
    pub restarts: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl FeatureClassOracle {
    fn objective_and_grads(
        &self,
        w1: &[f64],
        w2: &[f64],
        g_const: &Tensor,
        xs: &[f64],
    ) -> (f64, Vec<f64>, Vec<f64>) {
        let mut graph = Graph::new();
        let w1_node = graph.leaf(Tensor::new(self.hidden_dim, 1, w1.to_vec()).unwrap());
        let w2_node = graph.leaf(
            Tensor::new(self.feature_dim, self.hidden_dim, w2.to_vec()).unwrap(),
        );
        let x_row = graph.constant(Tensor::row(xs));
        let pre1 = graph.matmul(w1_node, x_row).unwrap();
        let hidden = graph.relu(pre1);
        let pre2 = graph.matmul(w2_node, hidden).unwrap();
        let feats = if self.tanh_head {
            graph.tanh(pre2)
        } else {
            graph.relu(pre2)
        };
        // <G, F> = (||G + F||_F^2 - ||G||_F^2 - ||F||_F^2) / 2
        let g_node = graph.constant(g_const.clone());
        let g_sq = graph.frob_sq(g_node);
        let sum = graph.add(g_node, feats).unwrap();
        let sum_sq = graph.frob_sq(sum);
        let f_sq = graph.frob_sq(feats);
        let twice = graph.sub(sum_sq, g_sq).unwrap();
        let twice = graph.sub(twice, f_sq).unwrap();
        let obj = graph.scale(twice, 0.5 / xs.len() as f64);
        let grads = graph.backward(obj).unwrap();
        (
            graph.value(obj).item(),
            grads.get(w1_node).data().to_vec(),
            grads.get(w2_node).data().to_vec(),
        )
    }
}

fn project_ball(w: &mut [f64], radius: f64) {
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > radius {
        let scale = if radius == 0.0 { 0.0 } else { radius / norm };
        for v in w.iter_mut() {
            *v *= scale;
        }
    }
}

impl SupOracle for FeatureClassOracle {
    fn output_dim(&self) -> usize {
        self.feature_dim
    }

    fn sup(&self, weights: &[Vec<f64>], data: &[Vec<f64>]) -> f64 {
        let xs: Vec<f64> = data.iter().map(|x| x[0]).collect();
        let n = xs.len();
        let mut g_data = vec![0.0; self.feature_dim * n];
        for (i, g) in weights.iter().enumerate() {
            for k in 0..self.feature_dim {
                g_data[k * n + i] = g[k];
            }
        }
        let g_const = Tensor::new(self.feature_dim, n, g_data).unwrap();

        let mut best = f64::NEG_INFINITY;
        let root = Rng::new(self.seed);
        for restart in 0..self.restarts as u64 {
            let mut rng = root.child(restart);
            let mut w1: Vec<f64> = (0..self.hidden_dim)
                .map(|_| rng.uniform_in(-1.0, 1.0))
                .collect();
            let mut w2: Vec<f64> = (0..self.feature_dim * self.hidden_dim)
                .map(|_| rng.uniform_in(-1.0, 1.0))
                .collect();
            project_ball(&mut w1, self.w1_bound);
            project_ball(&mut w2, self.w2_bound);

            let (mut value, mut g1, mut g2) =
                self.objective_and_grads(&w1, &w2, &g_const, &xs);
            let mut step = 0.25 * self.w1_bound.max(self.w2_bound).max(1e-3);
            for _ in 0..self.iterations {
                let mut c1 = w1.clone();
                let mut c2 = w2.clone();
                for (p, g) in c1.iter_mut().zip(&g1) {
                    *p += step * g;
                }
                for (p, g) in c2.iter_mut().zip(&g2) {
                    *p += step * g;
                }
                project_ball(&mut c1, self.w1_bound);
                project_ball(&mut c2, self.w2_bound);
                let (cand, cg1, cg2) = self.objective_and_grads(&c1, &c2, &g_const, &xs);
                if cand > value {
                    (w1, w2, value, g1, g2) = (c1, c2, cand, cg1, cg2);
                    step *= 1.25;
                } else {
                    step *= 0.5;
                    if step < 1e-12 {
                        break;
                    }
                }
            }
            best = best.max(value);
        }
        best
    }

    fn is_exact(&self) -> bool {
        false
    }
}

/// Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub samples: usize,
    /// True when the supremum oracle only lower-bounds the true sup.
    pub lower_bound: bool,
}

fn monte_carlo_complexity<D>(
    oracle: &impl SupOracle,
    data: &[Vec<f64>],
    n_mc: usize,
    rng: &Rng,
    mut draw: D,
) -> Result<ComplexityEstimate, DiagnosticsError>
where
    D: FnMut(&mut Rng) -> f64,
{
    if n_mc < 2 {
        return Err(DiagnosticsError::TooFewDraws(n_mc));
    }
    if data.is_empty() {
        return Err(DiagnosticsError::EmptySample);
    }
    let r = oracle.output_dim();
    let mut values = Vec::with_capacity(n_mc);
    for j in 0..n_mc as u64 {
        // per-draw stream: parallel evaluation would reproduce this exactly
        let mut stream = rng.child(j);
        let weights: Vec<Vec<f64>> = (0..data.len())
            .map(|_| (0..r).map(|_| draw(&mut stream)).collect())
            .collect();
        values.push(oracle.sup(&weights, data));
    }
    let mean = values.iter().sum::<f64>() / n_mc as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / (n_mc as f64 - 1.0);
    Ok(ComplexityEstimate {
        estimate: mean,
        stderr: (var / n_mc as f64).sqrt(),
        samples: n_mc,
        lower_bound: !oracle.is_exact(),
    })
}

/// Empirical Gaussian complexity by Monte Carlo over standard-normal draws.
pub fn gaussian_complexity(
    oracle: &impl SupOracle,
    data: &[Vec<f64>],
    n_mc: usize,
    rng: &Rng,
) -> Result<ComplexityEstimate, DiagnosticsError> {
    monte_carlo_complexity(oracle, data, n_mc, rng, |r| r.normal())
}

/// Empirical Rademacher complexity by Monte Carlo over uniform sign draws.
pub fn rademacher_complexity(
    oracle: &impl SupOracle,
    data: &[Vec<f64>],
    n_mc: usize,
    rng: &Rng,
) -> Result<ComplexityEstimate, DiagnosticsError> {
    monte_carlo_complexity(oracle, data, n_mc, rng, |r| r.sign())
}

/// Exact empirical Rademacher complexity by enumerating all sign patterns.
/// Requires `N * output_dim <= 20`.
pub fn rademacher_exact(
    oracle: &impl SupOracle,
    data: &[Vec<f64>],
) -> Result<f64, DiagnosticsError> {
    if data.is_empty() {
        return Err(DiagnosticsError::EmptySample);
    }
    let slots = data.len() * oracle.output_dim();
    if slots > 20 {
        return Err(DiagnosticsError::EnumerationTooLarge {
            max: 20,
            got: slots,
        });
    }
    let r = oracle.output_dim();
    let patterns = 1u64 << slots;
    let mut total = 0.0;
    for bits in 0..patterns {
        let weights: Vec<Vec<f64>> = (0..data.len())
            .map(|i| {
                (0..r)
                    .map(|k| {
                        if bits >> (i * r + k) & 1 == 1 {
                            1.0
                        } else {
                            -1.0
                        }
                    })
                    .collect()
            })
            .collect();
        total += oracle.sup(&weights, data);
    }
    Ok(total / patterns as f64)
}

fn mean_square_loss(w: &[f64], sample: &[(Vec<f64>, f64)]) -> f64 {
    let mut total = 0.0;
    for (z, y) in sample {
        let pred: f64 = w.iter().zip(z).map(|(a, b)| a * b).sum();
        total += (pred - y) * (pred - y);
    }
    total / sample.len() as f64
}

fn mean_square_loss_grad(w: &[f64], sample: &[(Vec<f64>, f64)], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (z, y) in sample {
        let pred: f64 = w.iter().zip(z).map(|(a, b)| a * b).sum();
        let coeff = 2.0 * (pred - y);
        for (o, zi) in out.iter_mut().zip(z) {
            *o += coeff * zi;
        }
    }
    let inv = 1.0 / sample.len() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
}

/// Discrepancy divergence between support and query samples over the
/// learner ball `{w : ||w|| <= m_bound}`:
/// `sup_w |mean query loss - mean support loss|`, approximated by projected
/// gradient ascent from 16 restarts (restart 0 at `w = 0`). A lower bound
/// on the true supremum.
pub fn discrepancy(
    support: &[[f64; 2]],
    query: &[[f64; 2]],
    m_bound: f64,
    feature_map: &impl FeatureMap,
    rng: &Rng,
) -> Result<f64, DiagnosticsError> {
    if support.is_empty() || query.is_empty() {
        return Err(DiagnosticsError::EmptySample);
    }
    let dim = feature_map.feature_dim();
    let lift = |pairs: &[[f64; 2]]| -> Vec<(Vec<f64>, f64)> {
        pairs
            .iter()
            .map(|[x, y]| (feature_map.features(*x), *y))
            .collect()
    };
    let support = lift(support);
    let query = lift(query);

    let gap = |w: &[f64]| mean_square_loss(w, &query) - mean_square_loss(w, &support);

    let restarts = 16u64;
    let mut best = 0.0f64;
    let mut gq = vec![0.0; dim];
    let mut gs = vec![0.0; dim];
    for restart in 0..restarts {
        let mut stream = rng.child(restart);
        let mut w: Vec<f64> = if restart == 0 {
            vec![0.0; dim]
        } else {
            let mut v: Vec<f64> = (0..dim).map(|_| stream.normal()).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            let target = m_bound * stream.uniform();
            let scale = if norm == 0.0 { 0.0 } else { target / norm };
            v.iter_mut().for_each(|a| *a *= scale);
            v
        };
        let mut value = gap(&w).abs();
        let mut step = 0.25 * m_bound.max(1e-6);
        for _ in 0..300 {
            let sign = gap(&w).signum();
            mean_square_loss_grad(&w, &query, &mut gq);
            mean_square_loss_grad(&w, &support, &mut gs);
            let mut cand = w.clone();
            for k in 0..dim {
                cand[k] += step * sign * (gq[k] - gs[k]);
            }
            project_ball(&mut cand, m_bound);
            let cand_value = gap(&cand).abs();
            if cand_value > value {
                w = cand;
                value = cand_value;
                step *= 1.25;
            } else {
                step *= 0.5;
                if step < 1e-14 {
                    break;
                }
            }
        }
        best = best.max(value);
    }
    Ok(best)
}

/// Worst finite-difference deviation of one op's analytic gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteEntry {
    pub op: String,
    pub max_rel_error: f64,
    pub points: usize,
}

fn suite_points(rng: &mut Rng, dim: usize, lo: f64, hi: f64, signed: bool) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let v = rng.uniform_in(lo, hi);
            if signed && rng.sign() < 0.0 {
                -v
            } else {
                v
            }
        })
        .collect()
}

/// Central finite-difference checks for every differentiable engine op plus
/// the sigma_min gradient, at `points` seeded random points each, away from
/// kinks. sigma_min points are filtered to eigengap above `1e-3` and use a
/// larger step because the eigensolver tolerance dominates smaller ones.
pub fn gradient_suite(points: usize, seed: u64) -> Vec<GradSuiteEntry> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    let dim = 4;

    let mut run = |name: &str,
                   rng: &mut Rng,
                   lo: f64,
                   hi: f64,
                   signed: bool,
                   step: f64,
                   build: &dyn Fn(&mut Graph, NodeId) -> Result<NodeId, crate::engine::EngineError>| {
        let mut worst = 0.0f64;
        for _ in 0..points {
            let point = suite_points(rng, dim, lo, hi, signed);
            let err = grad_check(build, &point, step).expect("suite functions are finite");
            worst = worst.max(err);
        }
        out.push(GradSuiteEntry {
            op: name.to_string(),
            max_rel_error: worst,
            points,
        });
    };

    let mixer = Tensor::new(
        3,
        dim,
        (0..3 * dim).map(|k| 0.3 + 0.1 * k as f64).collect(),
    )
    .unwrap();

    // quadratic test functions carry a large constant offset so that no
    // gradient coordinate can land near zero, where the per-coordinate
    // relative error would measure only finite-difference noise
    {
        let mixer = mixer.clone();
        run(
            "matmul_lhs",
            &mut rng,
            0.2,
            2.0,
            true,
            1e-6,
            &move |g, leaf| {
                let row = g.transpose(leaf);
                let c = g.constant(mixer.clone());
                let ct = g.transpose(c);
                let prod = g.matmul(row, ct)?;
                let offset = g.constant(Tensor::filled(1, 3, 20.0));
                let shifted = g.add(prod, offset)?;
                Ok(g.frob_sq(shifted))
            },
        );
    }
    {
        let mixer = mixer.clone();
        run(
            "matmul_rhs",
            &mut rng,
            0.2,
            2.0,
            true,
            1e-6,
            &move |g, leaf| {
                let c = g.constant(mixer.clone());
                let prod = g.matmul(c, leaf)?;
                let offset = g.constant(Tensor::filled(3, 1, 20.0));
                let shifted = g.add(prod, offset)?;
                Ok(g.frob_sq(shifted))
            },
        );
    }
    run(
        "transpose",
        &mut rng,
        0.2,
        2.0,
        true,
        1e-6,
        &|g, leaf| {
            let row = g.transpose(leaf);
            let t = g.tanh(row);
            let c = g.constant(Tensor::column(&[0.7, -0.4, 1.1, 0.2]));
            g.matmul(t, c)
        },
    );
    // offsets exceed the point range so x + c stays away from zero
    run("add", &mut rng, 0.2, 2.0, true, 1e-6, &|g, leaf| {
        let c = g.constant(Tensor::column(&[3.0, -4.0, 2.5, 5.0]));
        let s = g.add(leaf, c)?;
        Ok(g.frob_sq(s))
    });
    run("sub", &mut rng, 0.2, 2.0, true, 1e-6, &|g, leaf| {
        let c = g.constant(Tensor::column(&[3.0, -4.0, 2.5, 5.0]));
        let s = g.sub(c, leaf)?;
        Ok(g.frob_sq(s))
    });
    run("scale", &mut rng, 0.2, 2.0, true, 1e-6, &|g, leaf| {
        let s = g.scale(leaf, -1.7);
        Ok(g.frob_sq(s))
    });
    run("relu", &mut rng, 0.2, 2.0, true, 1e-7, &|g, leaf| {
        let r = g.relu(leaf);
        Ok(g.frob_sq(r))
    });
    run("tanh", &mut rng, 0.2, 2.0, true, 1e-6, &|g, leaf| {
        let t = g.tanh(leaf);
        Ok(g.sum(t))
    });
    run("square", &mut rng, 0.2, 2.0, true, 1e-6, &|g, leaf| {
        let s = g.square(leaf);
        Ok(g.sum(s))
    });
    run("sqrt", &mut rng, 0.5, 3.0, false, 1e-6, &|g, leaf| {
        let s = g.sqrt(leaf)?;
        Ok(g.sum(s))
    });
    run("div_num", &mut rng, 0.2, 2.0, true, 1e-6, &|g, leaf| {
        let c = g.constant(Tensor::column(&[1.5, -2.0, 0.7, 3.0]));
        let q = g.div(leaf, c)?;
        Ok(g.sum(q))
    });
    run("div_denom", &mut rng, 0.5, 2.0, true, 1e-6, &|g, leaf| {
        let c = g.constant(Tensor::column(&[1.5, -2.0, 0.7, 3.0]));
        let q = g.div(c, leaf)?;
        Ok(g.sum(q))
    });
    run("sum", &mut rng, 0.2, 2.0, true, 1e-6, &|g, leaf| {
        let s = g.sum(leaf);
        let offset = g.constant(Tensor::scalar(25.0));
        let shifted = g.add(s, offset)?;
        Ok(g.frob_sq(shifted))
    });
    run("frob_sq", &mut rng, 0.2, 2.0, true, 1e-6, &|g, leaf| {
        Ok(g.frob_sq(leaf))
    });
    run("mean", &mut rng, 0.2, 2.0, true, 1e-6, &|g, leaf| {
        let m = g.mean(leaf);
        let offset = g.constant(Tensor::scalar(25.0));
        let shifted = g.add(m, offset)?;
        Ok(g.frob_sq(shifted))
    });

    // sigma_min over a fixed seeded buffer, points filtered by eigengap.
    // Error is measured relative to the gradient's max-norm: eigenvector
    // coordinates can be arbitrarily close to zero, where a per-coordinate
    // ratio is dominated by finite-difference noise for any implementation.
    let mut buffer_rng = Rng::new(seed ^ 0x51f7);
    let buffer: Vec<Vec<f64>> = (0..8)
        .map(|_| (0..dim).map(|_| buffer_rng.uniform_in(-1.0, 1.0)).collect())
        .collect();
    let sigma_of = |w: &[f64]| -> f64 {
        let mut rows = buffer.clone();
        rows.push(w.to_vec());
        let stack = WeightStack::from_rows(&rows).unwrap();
        crate::linalg::sigma_min(&stack, rows.len())
    };
    let mut worst = 0.0f64;
    let mut accepted = 0;
    while accepted < points {
        let point = suite_points(&mut rng, dim, 0.2, 1.5, true);
        let mut rows = buffer.clone();
        rows.push(point.clone());
        let stack = WeightStack::from_rows(&rows).unwrap();
        let decomp = eigh_small(&stack.gram(rows.len()));
        if decomp.values[1] - decomp.values[0] <= 1e-3 {
            continue;
        }
        accepted += 1;

        let mut graph = Graph::new();
        let leaf = graph.leaf(Tensor::column(&point));
        let node = graph
            .sigma_min_row(leaf, &buffer)
            .expect("suite shapes are consistent");
        let grads = graph.backward(node).expect("scalar root");
        let analytic = grads.get(leaf).data().to_vec();

        // step balances fd truncation (curvature grows as 1/eigengap)
        // against the eigensolver tolerance noise floor
        let step = 1e-5;
        let mut fd = vec![0.0f64; dim];
        let mut work = point.clone();
        for (k, slot) in fd.iter_mut().enumerate() {
            let h = step * point[k].abs().max(1.0);
            work[k] = point[k] + h;
            let plus = sigma_of(&work);
            work[k] = point[k] - h;
            let minus = sigma_of(&work);
            work[k] = point[k];
            *slot = (plus - minus) / (2.0 * h);
        }
        let scale = analytic
            .iter()
            .chain(&fd)
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let err = analytic
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).abs() / scale)
            .fold(0.0f64, f64::max);
        worst = worst.max(err);
    }
    out.push(GradSuiteEntry {
        op: "sigma_min".to_string(),
        max_rel_error: worst,
        points,
    });

    out
}

/// Constants of the transfer-error bound that cannot be measured; absent
/// entries get defaults and a flag in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct BoundConstants {
    /// Learner-ball radius M.
    pub m_bound: Option<f64>,
    /// Loss bound B.
    pub loss_bound: Option<f64>,
    /// Confidence level delta in (0, 1).
    pub delta: Option<f64>,
    /// Input bound R.
    pub input_bound: Option<f64>,
    /// Lipschitz constant of the adapted learner with respect to the
    /// meta-learner.
    pub lipschitz_f: Option<f64>,
    /// Lipschitz constant of the loss.
    pub loss_lipschitz: Option<f64>,
}

/// Measured quantities feeding the bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Live Frobenius norms of the meta-learner weight matrices.
    pub frob_norms: Vec<f64>,
    pub feature_dim: usize,
    pub tanh_head: bool,
    /// Largest observed `||h(x)||`.
    pub max_head_norm: f64,
    /// Largest observed adapted-head norm.
    pub max_w_norm: f64,
    /// sigma_min of the task-weight Gram matrix.
    pub sigma_min: f64,
    pub task_count: usize,
    pub support_size: usize,
    pub query_size: usize,
    /// Meta-test support size.
    pub test_support_size: usize,
}

/// Itemized transfer-error bound. Every term is non-negative; the total is
/// an upper bound, not a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// `M / sigma_min(K)`; infinite when the Gram matrix is singular.
    pub diversity_constant: f64,
    pub meta_learner_complexity: f64,
    pub learner_complexity: f64,
    pub confidence_nt: f64,
    pub confidence_m: f64,
    /// `Dis(D^val) <= 4 M max ||h(x)||`.
    pub dis_estimate: f64,
    pub dis_term: f64,
    pub meta_test_learner_complexity: f64,
    pub meta_test_confidence: f64,
    /// `n_t T / sum n_t`, identically 1 with equal query sizes.
    pub beta_t: f64,
    pub total: f64,
    /// Observed feature-norm maximum.
    pub head_norm_observed: f64,
    /// Head-dependent cap: `sqrt(d_L)` for tanh, `R prod ||W_k||_F` for relu.
    pub head_norm_cap: f64,
    /// The product bound `R prod ||W_k||_F` regardless of head.
    pub head_norm_product_bound: f64,
    pub constants: ResolvedConstants,
    pub flags: Vec<String>,
}

/// The constants actually used, after defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConstants {
    pub m_bound: f64,
    pub loss_bound: f64,
    pub delta: f64,
    pub input_bound: f64,
    pub lipschitz_f: f64,
    pub loss_lipschitz: f64,
}

/// Evaluate each displayed term of the transfer-error bound.
pub fn bound_report(
    inputs: &BoundInputs,
    constants: &BoundConstants,
) -> Result<BoundReport, DiagnosticsError> {
    let delta = constants.delta.unwrap_or(0.05);
    if !(0.0 < delta && delta < 1.0) {
        return Err(DiagnosticsError::BadDelta(delta));
    }

    let mut flags = Vec::new();
    let m_bound = match constants.m_bound {
        Some(v) => v,
        None => {
            flags.push("m_bound estimated from max observed ||w*|| (data-dependent)".into());
            inputs.max_w_norm
        }
    };
    let input_bound = match constants.input_bound {
        Some(v) => v,
        None => {
            flags.push("input_bound defaulted to 5 (input range half-width)".into());
            5.0
        }
    };
    let loss_bound = match constants.loss_bound {
        Some(v) => v,
        None => {
            // |y| <= amplitude cap 5, predictions within M * max||h||
            let cap = (5.0 + m_bound * inputs.max_head_norm).powi(2);
            flags.push("loss_bound estimated as (5 + M max||h||)^2 (data-dependent)".into());
            cap
        }
    };
    let lipschitz_f = match constants.lipschitz_f {
        Some(v) => v,
        None => {
            flags.push("lipschitz_f defaulted to 1.0 (unverified)".into());
            1.0
        }
    };
    let loss_lipschitz = match constants.loss_lipschitz {
        Some(v) => v,
        None => {
            flags.push("loss_lipschitz defaulted to 1.0 (unverified)".into());
            1.0
        }
    };

    let layer_count = inputs.frob_norms.len() as f64;
    let frob_product: f64 = inputs.frob_norms.iter().product();
    let n = inputs.query_size as f64;
    let t = inputs.task_count as f64;
    let m = inputs.support_size as f64;
    let m_test = inputs.test_support_size as f64;
    let d_l = inputs.feature_dim as f64;
    let nt = n * t;

    let golowich =
        input_bound * ((2.0 * 2.0f64.ln() * layer_count).sqrt() + 1.0) * frob_product
            / nt.sqrt();
    let meta_learner_complexity = 768.0
        * loss_lipschitz
        * (4.0 * nt).ln()
        * lipschitz_f
        * 2.0
        * d_l
        * nt.ln().sqrt()
        * golowich;
    let learner_complexity =
        6.0 * loss_lipschitz * m_bound * inputs.max_head_norm / m.sqrt();
    let log_conf = (2.0 / delta).ln();
    let confidence_nt = 6.0 * loss_bound * (log_conf / (2.0 * nt)).sqrt();
    let confidence_m = 6.0 * loss_bound * (log_conf / m).sqrt();
    let dis_estimate = 4.0 * m_bound * inputs.max_head_norm;
    let dis_term = 12.0 * loss_lipschitz * dis_estimate / (nt * nt);
    let meta_test_learner_complexity =
        6.0 * loss_lipschitz * m_bound * inputs.max_head_norm / m_test.sqrt();
    let meta_test_confidence = 6.0 * loss_bound * (log_conf / m_test).sqrt();

    let diversity_constant = if inputs.sigma_min > 0.0 {
        m_bound / inputs.sigma_min
    } else {
        flags.push("sigma_min is 0: diversity constant is infinite".into());
        f64::INFINITY
    };

    let train_side = meta_learner_complexity
        + learner_complexity
        + confidence_nt
        + confidence_m
        + dis_term;
    let total =
        diversity_constant * train_side + meta_test_learner_complexity + meta_test_confidence;

    let head_norm_product_bound = input_bound * frob_product;
    let head_norm_cap = if inputs.tanh_head {
        d_l.sqrt()
    } else {
        head_norm_product_bound
    };

    Ok(BoundReport {
        diversity_constant,
        meta_learner_complexity,
        learner_complexity,
        confidence_nt,
        confidence_m,
        dis_estimate,
        dis_term,
        meta_test_learner_complexity,
        meta_test_confidence,
        beta_t: 1.0,
        total,
        head_norm_observed: inputs.max_head_norm,
        head_norm_cap,
        head_norm_product_bound,
        constants: ResolvedConstants {
            m_bound,
            loss_bound,
            delta,
            input_bound,
            lipschitz_f,
            loss_lipschitz,
        },
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Activation, MetaLearnerParams};

    fn unit_vectors(n: usize, dim: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let mut v = vec![0.0; dim];
                v[i % dim] = 1.0;
                v
            })
            .collect()
    }

    #[test]
    fn singleton_class_estimate_is_near_zero() {
        let oracle = SingletonOracle {
            func: |x: &[f64]| vec![x[0] * 0.5 + 1.0],
            output_dim: 1,
        };
        let data: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let rng = Rng::new(5);
        let est = gaussian_complexity(&oracle, &data, 4000, &rng).unwrap();
        assert!(
            est.estimate.abs() < 3.0 * est.stderr.max(1e-9),
            "estimate {} stderr {}",
            est.estimate,
            est.stderr
        );
        assert!(!est.lower_bound);
    }

    #[test]
    fn linear_class_single_point_matches_expected_abs_normal() {
        // sup over ||w|| <= 1 of g * w.x on one point = |g| ||x||;
        // E|g| = sqrt(2/pi)
        let x = vec![3.0, 4.0];
        let oracle = LinearBallOracle { radius: 1.0 };
        let rng = Rng::new(9);
        let est = gaussian_complexity(&oracle, &[x], 20_000, &rng).unwrap();
        let expect = 5.0 * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (est.estimate - expect).abs() < 3.0 * est.stderr,
            "estimate {} expect {expect} stderr {}",
            est.estimate,
            est.stderr
        );
    }

    #[test]
    fn doubling_radius_doubles_linear_class_sup_per_draw() {
        let data = unit_vectors(6, 3);
        let weights: Vec<Vec<f64>> = (0..6).map(|i| vec![(i as f64) - 2.5]).collect();
        let one = LinearBallOracle { radius: 1.0 }.sup(&weights, &data);
        let two = LinearBallOracle { radius: 2.0 }.sup(&weights, &data);
        assert_eq!(two, 2.0 * one);
    }

    #[test]
    fn gaussian_vs_rademacher_relation_on_linear_class() {
        let data = unit_vectors(10, 4);
        let oracle = LinearBallOracle { radius: 1.5 };
        let rng = Rng::new(77);
        let gauss = gaussian_complexity(&oracle, &data, 8000, &rng.child(0)).unwrap();
        let rade = rademacher_complexity(&oracle, &data, 8000, &rng.child(1)).unwrap();
        let margin = 3.0 * (gauss.stderr + rade.stderr);
        assert!(
            gauss.estimate >= (2.0 / 3.0) * rade.estimate - margin,
            "gauss {} rade {}",
            gauss.estimate,
            rade.estimate
        );
    }

    #[test]
    fn exhaustive_rademacher_matches_independent_enumeration() {
        // orthonormal data: every sign pattern has sup = (M/N) sqrt(N)
        let n = 12;
        let data = unit_vectors(n, n);
        let oracle = LinearBallOracle { radius: 1.0 };
        let exact = rademacher_exact(&oracle, &data).unwrap();

        // independent oracle: enumerate patterns, maximize w over the ball
        // directly as ||sum_i s_i x_i|| / N
        let mut total = 0.0;
        for bits in 0u64..(1 << n) {
            let mut acc = vec![0.0f64; n];
            for (i, x) in data.iter().enumerate() {
                let s = if bits >> i & 1 == 1 { 1.0 } else { -1.0 };
                for k in 0..n {
                    acc[k] += s * x[k];
                }
            }
            total += acc.iter().map(|v| v * v).sum::<f64>().sqrt() / n as f64;
        }
        let oracle_value = total / (1u64 << n) as f64;
        assert!((exact - oracle_value).abs() < 1e-10);
        assert!((exact - 1.0 / (n as f64).sqrt()).abs() < 1e-10);
    }

    #[test]
    fn enumeration_guard_rejects_large_instances() {
        let data = unit_vectors(30, 30);
        let oracle = LinearBallOracle { radius: 1.0 };
        assert!(matches!(
            rademacher_exact(&oracle, &data),
            Err(DiagnosticsError::EnumerationTooLarge { .. })
        ));
    }

    #[test]
    fn too_few_draws_is_an_error() {
        let oracle = LinearBallOracle { radius: 1.0 };
        let data = unit_vectors(3, 3);
        assert!(matches!(
            gaussian_complexity(&oracle, &data, 1, &Rng::new(0)),
            Err(DiagnosticsError::TooFewDraws(1))
        ));
    }

    #[test]
    fn feature_class_oracle_lower_bounds_and_flags() {
        let oracle = FeatureClassOracle {
            hidden_dim: 4,
            feature_dim: 3,
            w1_bound: 1.5,
            w2_bound: 1.5,
            tanh_head: true,
            restarts: 3,
            iterations: 40,
            seed: 4,
        };
        let data: Vec<Vec<f64>> = vec![vec![-1.0], vec![0.5], vec![2.0]];
        let rng = Rng::new(8);
        let est = gaussian_complexity(&oracle, &data, 12, &rng).unwrap();
        assert!(est.lower_bound);
        assert!(est.estimate.is_finite());
        // the supremum over a class containing h=0 is non-negative per draw
        let weights: Vec<Vec<f64>> = (0..3).map(|_| vec![1.0, -1.0, 0.5]).collect();
        assert!(oracle.sup(&weights, &data) >= -1e-12);
    }

    struct IdentityMap {
        dim: usize,
    }

    impl FeatureMap for IdentityMap {
        fn feature_dim(&self) -> usize {
            self.dim
        }

        fn features(&self, x: f64) -> Vec<f64> {
            let mut z = vec![0.0; self.dim];
            z[0] = x;
            z
        }
    }

    #[test]
    fn discrepancy_identical_multisets_is_exactly_zero() {
        let mut rng = Rng::new(6);
        let h = MetaLearnerParams::standard(Activation::Tanh, &mut rng);
        let sample: Vec<[f64; 2]> = (0..6)
            .map(|_| [rng.uniform_in(-5.0, 5.0), rng.uniform_in(-2.0, 2.0)])
            .collect();
        let d = discrepancy(&sample, &sample, 2.0, &h, &Rng::new(3)).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn discrepancy_radius_zero_compares_mean_squared_targets() {
        let h = IdentityMap { dim: 1 };
        let support = [[0.0, 1.0], [0.0, 3.0]]; // mean y^2 = 5
        let query = [[0.0, 2.0], [0.0, 2.0]]; // mean y^2 = 4
        let d = discrepancy(&support, &query, 0.0, &h, &Rng::new(1)).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discrepancy_one_dimensional_matches_grid_search() {
        let h = IdentityMap { dim: 1 };
        let support = [[1.0, 0.3], [-2.0, 1.1]];
        let query = [[0.5, -0.7], [3.0, 0.4]];
        let m_bound = 1.5;
        let d = discrepancy(&support, &query, m_bound, &h, &Rng::new(2)).unwrap();

        // dense grid oracle over w in [-M, M]
        let grid = 100_000;
        let mut best = 0.0f64;
        for k in 0..=grid {
            let w = -m_bound + 2.0 * m_bound * k as f64 / grid as f64;
            let s: f64 = support
                .iter()
                .map(|[x, y]| (w * x - y) * (w * x - y))
                .sum::<f64>()
                / 2.0;
            let q: f64 = query
                .iter()
                .map(|[x, y]| (w * x - y) * (w * x - y))
                .sum::<f64>()
                / 2.0;
            best = best.max((q - s).abs());
        }
        assert!(
            (d - best).abs() < 1e-4,
            "ascent {d} vs grid {best} (ascent may only undershoot: {})",
            best - d
        );
    }

    fn sample_inputs() -> BoundInputs {
        BoundInputs {
            frob_norms: vec![2.0, 3.0],
            feature_dim: 40,
            tanh_head: true,
            max_head_norm: 5.5,
            max_w_norm: 2.2,
            sigma_min: 0.04,
            task_count: 1000,
            support_size: 5,
            query_size: 5,
            test_support_size: 5,
        }
    }

    #[test]
    fn bound_report_terms_are_non_negative_and_monotone() {
        let inputs = sample_inputs();
        let report = bound_report(&inputs, &BoundConstants::default()).unwrap();
        for term in [
            report.meta_learner_complexity,
            report.learner_complexity,
            report.confidence_nt,
            report.confidence_m,
            report.dis_term,
            report.meta_test_learner_complexity,
            report.meta_test_confidence,
        ] {
            assert!(term >= 0.0);
        }
        assert_eq!(report.beta_t, 1.0);

        // growing a Frobenius norm never shrinks the meta-learner term
        let mut bigger = inputs.clone();
        bigger.frob_norms[0] *= 2.0;
        let report2 = bound_report(&bigger, &BoundConstants::default()).unwrap();
        assert!(report2.meta_learner_complexity >= report.meta_learner_complexity);

        // growing T never grows the 1/sqrt(nT) terms
        let mut more_tasks = inputs.clone();
        more_tasks.task_count *= 10;
        let report3 = bound_report(&more_tasks, &BoundConstants::default()).unwrap();
        assert!(report3.meta_learner_complexity <= report.meta_learner_complexity);
        assert!(report3.confidence_nt <= report.confidence_nt);
    }

    #[test]
    fn bound_report_zero_weights_zero_meta_term() {
        let mut inputs = sample_inputs();
        inputs.frob_norms = vec![0.0, 0.0];
        let report = bound_report(&inputs, &BoundConstants::default()).unwrap();
        assert_eq!(report.meta_learner_complexity, 0.0);
    }

    #[test]
    fn bound_report_tanh_cap_below_product_bound() {
        let inputs = sample_inputs(); // product bound 5 * 6 = 30 > sqrt(40)
        let report = bound_report(&inputs, &BoundConstants::default()).unwrap();
        assert!(report.head_norm_observed <= 40f64.sqrt());
        assert!(report.head_norm_cap < report.head_norm_product_bound);
        assert!((report.head_norm_cap - 40f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn bound_report_rejects_bad_delta() {
        let inputs = sample_inputs();
        let constants = BoundConstants {
            delta: Some(1.5),
            ..Default::default()
        };
        assert!(matches!(
            bound_report(&inputs, &constants),
            Err(DiagnosticsError::BadDelta(_))
        ));
    }

    #[test]
    fn bound_report_flags_defaults() {
        let inputs = sample_inputs();
        let report = bound_report(&inputs, &BoundConstants::default()).unwrap();
        assert!(report.flags.iter().any(|f| f.contains("m_bound")));
        assert!(report.flags.iter().any(|f| f.contains("lipschitz_f")));

        let constants = BoundConstants {
            m_bound: Some(1.0),
            loss_bound: Some(100.0),
            delta: Some(0.05),
            input_bound: Some(5.0),
            lipschitz_f: Some(1.0),
            loss_lipschitz: Some(1.0),
        };
        let report = bound_report(&inputs, &constants).unwrap();
        assert!(report.flags.is_empty());
    }

    #[test]
    fn gradient_suite_passes_tolerance_on_a_small_sweep() {
        let entries = gradient_suite(10, 42);
        assert!(entries.iter().any(|e| e.op == "sigma_min"));
        assert!(entries.len() >= 15);
        for e in &entries {
            assert!(
                e.max_rel_error < 1e-5,
                "{} exceeded tolerance: {}",
                e.op,
                e.max_rel_error
            );
        }
    }

    #[test]
    fn monte_carlo_reproducible_under_fixed_seed() {
        let oracle = LinearBallOracle { radius: 1.0 };
        let data = unit_vectors(5, 5);
        let a = gaussian_complexity(&oracle, &data, 500, &Rng::new(11)).unwrap();
        let b = gaussian_complexity(&oracle, &data, 500, &Rng::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stderr_shrinks_with_sample_count() {
        let oracle = LinearBallOracle { radius: 1.0 };
        let data = unit_vectors(6, 6);
        let small = gaussian_complexity(&oracle, &data, 200, &Rng::new(3)).unwrap();
        let large = gaussian_complexity(&oracle, &data, 20_000, &Rng::new(3)).unwrap();
        assert!(large.stderr < small.stderr / 5.0);
    }
}
