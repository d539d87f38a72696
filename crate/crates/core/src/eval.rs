//! Transfer-error protocol: adapt the frozen meta-learner on each meta-test
//! task's support set, measure mean square loss on its query set, average
//! over tasks, and aggregate over seeds into per-cell reports.
//!
//! Meta-test tasks are evaluated by a worker pool with per-task RNG streams;
//! results are collected and reduced in task-index order, so the mean is
//! independent of worker count.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bilevel::{
    adapt_learner, meta_train, AdaptationBudget, BilevelError, InnerOptimizer, TrainConfig,
};
use crate::model::FeatureMap;
use crate::regularizers::{RegularizerError, RegularizerSpec};
use crate::rng::{streams, Rng};
use crate::tasks::{sample_indexed_episode, EnvironmentConfig, TaskError};

/// How meta-test tasks adapt their heads during evaluation. The default
/// mirrors the training inner loop, so the transfer error measures exactly
/// the adaptation the meta-learner was optimized for.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationProtocol {
    pub budget: AdaptationBudget,
    pub lr: f64,
    pub optimizer: InnerOptimizer,
}

impl Default for AdaptationProtocol {
    fn default() -> Self {
        let train = TrainConfig::default();
        AdaptationProtocol {
            budget: AdaptationBudget::Steps(train.inner_steps),
            lr: train.inner_lr,
            optimizer: train.inner_optimizer,
        }
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("n_test_tasks must be >= 1")]
    NoTestTasks,
    #[error(transparent)]
    Bilevel(#[from] BilevelError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Regularizer(#[from] RegularizerError),
    #[error("grid io at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("grid cell parse at {path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
}

/// One meta-test pass of a frozen feature map over fresh tasks.
#[derive(Debug, Clone)]
pub struct TransferEvaluation {
    /// Mean query loss over the task pool.
    pub mean_error: f64,
    /// Per-task query losses in task-index order.
    pub per_task: Vec<f64>,
    /// Mean adapted-head norm over tasks.
    pub mean_w_norm: f64,
    /// Largest feature norm seen over all evaluated points.
    pub max_head_norm: f64,
}

/// Adapt on each of `n_test_tasks` fresh tasks and average the query loss.
pub fn transfer_error(
    h: &impl FeatureMap,
    env: &EnvironmentConfig,
    n_test_tasks: usize,
    reg: &RegularizerSpec,
    protocol: AdaptationProtocol,
) -> Result<TransferEvaluation, EvalError> {
    if n_test_tasks == 0 {
        return Err(EvalError::NoTestTasks);
    }
    env.validate()?;

    let per_task: Vec<(f64, f64, f64)> = (0..n_test_tasks as u64)
        .into_par_iter()
        .map(|index| -> Result<(f64, f64, f64), EvalError> {
            let episode =
                sample_indexed_episode(env, index, env.support_size, env.query_size)?;
            let learner = adapt_learner(
                h,
                &episode.support,
                reg,
                protocol.budget,
                protocol.lr,
                protocol.optimizer,
            )?;
            let mut loss = 0.0;
            let mut head_max = 0.0f64;
            for [x, y] in &episode.query {
                let z = h.features(*x);
                head_max = head_max.max(z.iter().map(|v| v * v).sum::<f64>().sqrt());
                let pred: f64 = z.iter().zip(&learner.w).map(|(a, b)| a * b).sum();
                loss += (pred - y) * (pred - y);
            }
            loss /= episode.query.len() as f64;
            Ok((loss, learner.norm(), head_max))
        })
        .collect::<Result<Vec<_>, _>>()?;

    // fixed-order reduction
    let losses: Vec<f64> = per_task.iter().map(|t| t.0).collect();
    let mean_error = losses.iter().sum::<f64>() / losses.len() as f64;
    let mean_w_norm = per_task.iter().map(|t| t.1).sum::<f64>() / per_task.len() as f64;
    let max_head_norm = per_task.iter().map(|t| t.2).fold(0.0f64, f64::max);

    Ok(TransferEvaluation {
        mean_error,
        per_task: losses,
        mean_w_norm,
        max_head_norm,
    })
}

/// Aggregated diagnostics for one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDiagnostics {
    /// Mean adapted-head norm at meta-test, averaged over seeds.
    pub mean_w_norm: f64,
    /// Largest feature norm over training and evaluation, max over seeds.
    pub max_head_norm: f64,
    /// sigma_min of the final training buffer, averaged over seeds.
    pub final_buffer_sigma: f64,
}

/// Per-cell transfer-error summary: one strategy at one (T, m, n), over a
/// seed set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub strategy: String,
    pub task_count: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub seeds: Vec<u64>,
    pub per_seed_errors: Vec<f64>,
    pub mean_error: f64,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std_error: f64,
    pub diagnostics: ReportDiagnostics,
}

impl TransferReport {
    pub fn recompute_mean(&self) -> f64 {
        self.per_seed_errors.iter().sum::<f64>() / self.per_seed_errors.len() as f64
    }
}

fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Full factorial sweep description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub strategies: Vec<String>,
    pub task_counts: Vec<usize>,
    /// (support, query) size pairs.
    pub shot_query: Vec<[usize; 2]>,
    pub seeds: Vec<u64>,
    /// Meta-test task pool size per cell and seed.
    pub test_tasks: usize,
    /// Override the meta-test support size (defaults to the cell's m).
    pub test_support_size: Option<usize>,
    /// Override the meta-test query size (defaults to the cell's n).
    pub test_query_size: Option<usize>,
    /// Meta-test adaptation procedure.
    pub adaptation: AdaptationProtocol,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            strategies: ["ReLU", "Tanh", "Norm", "Diverse", "Tanh+Norm"]
                .map(String::from)
                .to_vec(),
            task_counts: vec![100, 1000, 3333, 10000],
            shot_query: vec![[1, 5], [5, 1], [5, 5]],
            seeds: vec![0, 1, 2],
            test_tasks: 600,
            test_support_size: None,
            test_query_size: None,
            adaptation: AdaptationProtocol::default(),
        }
    }
}

impl GridSpec {
    /// Cells in execution order.
    pub fn cells(&self) -> Vec<(String, usize, usize, usize)> {
        let mut out = Vec::new();
        for strategy in &self.strategies {
            for &t in &self.task_counts {
                for &[m, n] in &self.shot_query {
                    out.push((strategy.clone(), t, m, n));
                }
            }
        }
        out
    }
}

/// Train one cell for one master seed and meta-test it.
#[allow(clippy::too_many_arguments)]
pub fn run_cell_seed(
    strategy: &RegularizerSpec,
    task_count: usize,
    m: usize,
    n: usize,
    master_seed: u64,
    test_tasks: usize,
    test_m: usize,
    test_n: usize,
    protocol: AdaptationProtocol,
) -> Result<(f64, TransferEvaluation, f64, f64), EvalError> {
    let config = TrainConfig::for_cell(strategy.clone(), task_count, m, n, master_seed);
    let outcome = meta_train(&config)?;
    let test_env = EnvironmentConfig {
        support_size: test_m,
        query_size: test_n,
        seed: Rng::derive_seed(master_seed, streams::TEST_TASKS),
        ..Default::default()
    };
    let eval = transfer_error(&outcome.params, &test_env, test_tasks, strategy, protocol)?;
    let train_head_norm = outcome.max_head_norm;
    Ok((
        eval.mean_error,
        eval,
        outcome.final_buffer_sigma,
        train_head_norm,
    ))
}

/// Compute one grid cell across its seed set.
pub fn run_cell(
    label: &str,
    task_count: usize,
    m: usize,
    n: usize,
    spec: &GridSpec,
) -> Result<TransferReport, EvalError> {
    let reg = RegularizerSpec::from_label(label)?;
    let test_m = spec.test_support_size.unwrap_or(m);
    let test_n = spec.test_query_size.unwrap_or(n);

    let mut per_seed_errors = Vec::with_capacity(spec.seeds.len());
    let mut w_norms = Vec::new();
    let mut head_norms = Vec::new();
    let mut sigmas = Vec::new();
    for &seed in &spec.seeds {
        let (err, eval, sigma, train_head) = run_cell_seed(
            &reg,
            task_count,
            m,
            n,
            seed,
            spec.test_tasks,
            test_m,
            test_n,
            spec.adaptation,
        )?;
        per_seed_errors.push(err);
        w_norms.push(eval.mean_w_norm);
        head_norms.push(eval.max_head_norm.max(train_head));
        sigmas.push(sigma);
    }

    let mean_error = per_seed_errors.iter().sum::<f64>() / per_seed_errors.len() as f64;
    let std_error = sample_std(&per_seed_errors);
    Ok(TransferReport {
        strategy: label.to_string(),
        task_count,
        support_size: m,
        query_size: n,
        seeds: spec.seeds.clone(),
        per_seed_errors,
        mean_error,
        std_error,
        diagnostics: ReportDiagnostics {
            mean_w_norm: w_norms.iter().sum::<f64>() / w_norms.len() as f64,
            max_head_norm: head_norms.iter().copied().fold(0.0f64, f64::max),
            final_buffer_sigma: sigmas.iter().sum::<f64>() / sigmas.len() as f64,
        },
    })
}

fn cell_path(out_dir: &Path, label: &str, t: usize, m: usize, n: usize) -> PathBuf {
    out_dir.join(format!("cell_{label}_T{t}_m{m}_n{n}.json"))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> EvalError + '_ {
    move |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Run every cell of the grid, skipping cells whose result file already
/// exists (idempotent resume). Returns reports in execution order.
pub fn run_grid(spec: &GridSpec, out_dir: &Path) -> Result<Vec<TransferReport>, EvalError> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut reports = Vec::new();
    for (label, t, m, n) in spec.cells() {
        let path = cell_path(out_dir, &label, t, m, n);
        let report = if path.exists() {
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            serde_json::from_str(&text).map_err(|source| EvalError::Parse {
                path: path.clone(),
                source,
            })?
        } else {
            let report = run_cell(&label, t, m, n, spec)?;
            let mut file = fs::File::create(&path).map_err(io_err(&path))?;
            let body =
                serde_json::to_string_pretty(&report).expect("report serialization");
            file.write_all(body.as_bytes()).map_err(io_err(&path))?;
            file.write_all(b"\n").map_err(io_err(&path))?;
            report
        };
        reports.push(report);
    }
    Ok(reports)
}

/// `strategy,T,m,n,seed,transfer_error` rows for a set of reports.
pub fn results_csv(reports: &[TransferReport]) -> String {
    let mut out = String::from("strategy,T,m,n,seed,transfer_error\n");
    for r in reports {
        for (seed, err) in r.seeds.iter().zip(&r.per_seed_errors) {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.strategy, r.task_count, r.support_size, r.query_size, seed, err
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bilevel::meta_test_adapt;
    use crate::model::{Activation, MetaLearnerParams};
    use crate::rng::Rng;

    /// Idealized feature map whose first coordinate is the target shape of
    /// one fixed task, so some head solves that task exactly.
    struct OracleMap {
        beta: f64,
        dim: usize,
    }

    impl FeatureMap for OracleMap {
        fn feature_dim(&self) -> usize {
            self.dim
        }

        fn features(&self, x: f64) -> Vec<f64> {
            let mut z = vec![0.0; self.dim];
            z[0] = (self.beta * x).sin();
            z
        }
    }

    fn fixed_task_env(alpha: f64, beta: f64, m: usize, n: usize, seed: u64) -> EnvironmentConfig {
        // effectively a point mass on one task
        EnvironmentConfig {
            amplitude_range: [alpha, alpha + 1e-12],
            frequency_range: [beta, beta + 1e-12],
            support_size: m,
            query_size: n,
            seed,
            ..Default::default()
        }
    }

    fn converged() -> AdaptationProtocol {
        // matches meta_test_adapt: Adam to the convergence rule
        AdaptationProtocol {
            budget: AdaptationBudget::Converged,
            optimizer: InnerOptimizer::Adam,
            ..Default::default()
        }
    }

    #[test]
    fn zero_test_tasks_is_an_error() {
        let h = OracleMap { beta: 1.0, dim: 4 };
        let env = EnvironmentConfig::default();
        assert!(matches!(
            transfer_error(&h, &env, 0, &RegularizerSpec::baseline(), converged()),
            Err(EvalError::NoTestTasks)
        ));
    }

    #[test]
    fn oracle_feature_map_reaches_interpolation_accuracy() {
        let (alpha, beta) = (2.3, 1.1);
        let h = OracleMap { beta, dim: 40 };
        let env = fixed_task_env(alpha, beta, 64, 16, 5);
        let eval =
            transfer_error(&h, &env, 20, &RegularizerSpec::baseline(), converged()).unwrap();
        assert!(
            eval.mean_error < 1e-6,
            "oracle transfer error {}",
            eval.mean_error
        );
    }

    #[test]
    fn transfer_error_is_non_negative_and_order_independent() {
        let mut rng = Rng::new(3);
        let h = MetaLearnerParams::standard(Activation::Tanh, &mut rng);
        let env = EnvironmentConfig {
            seed: 11,
            ..Default::default()
        };
        let reg = RegularizerSpec::baseline();
        let eval = transfer_error(&h, &env, 40, &reg, converged()).unwrap();
        assert!(eval.mean_error >= 0.0);
        assert!(eval.per_task.iter().all(|&l| l >= 0.0));

        // serial oracle: same tasks evaluated one by one
        let mut serial = Vec::new();
        for i in 0..40u64 {
            let ep = sample_indexed_episode(&env, i, 5, 5).unwrap();
            let w = meta_test_adapt(&h, &ep.support, &reg).unwrap();
            let loss: f64 = ep
                .query
                .iter()
                .map(|[x, y]| {
                    let pred: f64 = h
                        .features(*x)
                        .iter()
                        .zip(&w.w)
                        .map(|(a, b)| a * b)
                        .sum();
                    (pred - y) * (pred - y)
                })
                .sum::<f64>()
                / 5.0;
            serial.push(loss);
        }
        assert_eq!(eval.per_task, serial);
        let serial_mean = serial.iter().sum::<f64>() / serial.len() as f64;
        assert_eq!(eval.mean_error, serial_mean);
    }

    #[test]
    fn trained_beats_untrained_on_fresh_tasks() {
        let config = TrainConfig::for_cell(RegularizerSpec::baseline(), 400, 5, 5, 3);
        let outcome = meta_train(&config).unwrap();

        let mut rng = Rng::new(Rng::derive_seed(3, streams::INIT));
        let untrained = MetaLearnerParams::standard(Activation::Relu, &mut rng);

        let test_env = EnvironmentConfig {
            seed: Rng::derive_seed(3, streams::TEST_TASKS),
            ..Default::default()
        };
        let reg = RegularizerSpec::baseline();
        let trained_err =
            transfer_error(&outcome.params, &test_env, 100, &reg, Default::default())
                .unwrap()
                .mean_error;
        let untrained_err =
            transfer_error(&untrained, &test_env, 100, &reg, Default::default())
                .unwrap()
                .mean_error;
        assert!(
            trained_err < untrained_err,
            "trained {trained_err} vs untrained {untrained_err}"
        );
    }

    #[test]
    fn grid_enumerates_full_factorial() {
        let spec = GridSpec::default();
        assert_eq!(spec.cells().len(), 5 * 4 * 3);
        assert_eq!(
            spec.cells().len() * spec.seeds.len(),
            180,
            "paper sweep is 180 runs"
        );
    }

    #[test]
    fn report_mean_matches_recomputation_and_std_is_sane() {
        let report = TransferReport {
            strategy: "ReLU".into(),
            task_count: 100,
            support_size: 5,
            query_size: 5,
            seeds: vec![0, 1, 2],
            per_seed_errors: vec![0.5, 0.7, 0.6],
            mean_error: 0.6,
            std_error: sample_std(&[0.5, 0.7, 0.6]),
            diagnostics: ReportDiagnostics {
                mean_w_norm: 1.0,
                max_head_norm: 2.0,
                final_buffer_sigma: 0.0,
            },
        };
        assert!((report.recompute_mean() - report.mean_error).abs() < 1e-12);
        assert!(report.std_error >= 0.0);
        assert!((report.std_error - 0.1).abs() < 1e-12);
    }

    #[test]
    fn grid_resume_reuses_existing_cell_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec {
            strategies: vec!["ReLU".into()],
            task_counts: vec![20],
            shot_query: vec![[2, 2]],
            seeds: vec![0],
            test_tasks: 10,
            ..Default::default()
        };
        let first = run_grid(&spec, dir.path()).unwrap();
        assert_eq!(first.len(), 1);

        // poison the stored report; resume must return the stored value
        let path = dir
            .path()
            .join("cell_ReLU_T20_m2_n2.json");
        let mut poisoned = first[0].clone();
        poisoned.mean_error = -1234.5;
        std::fs::write(
            &path,
            serde_json::to_string_pretty(&poisoned).unwrap(),
        )
        .unwrap();
        let second = run_grid(&spec, dir.path()).unwrap();
        assert_eq!(second[0].mean_error, -1234.5, "cell must not be recomputed");
    }

    #[test]
    fn results_csv_schema() {
        let report = TransferReport {
            strategy: "Tanh".into(),
            task_count: 1000,
            support_size: 5,
            query_size: 5,
            seeds: vec![0, 1],
            per_seed_errors: vec![0.25, 0.5],
            mean_error: 0.375,
            std_error: 0.1767766952966369,
            diagnostics: ReportDiagnostics {
                mean_w_norm: 1.0,
                max_head_norm: 2.0,
                final_buffer_sigma: 0.0,
            },
        };
        let csv = results_csv(&[report]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "strategy,T,m,n,seed,transfer_error");
        assert_eq!(lines.next().unwrap(), "Tanh,1000,5,5,0,0.25");
        assert_eq!(lines.next().unwrap(), "Tanh,1000,5,5,1,0.5");
    }
}
