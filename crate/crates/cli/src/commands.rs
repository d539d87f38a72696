//! Command implementations. Every output file embeds the resolved config
//! hash and the build identifier; a completed output with a different hash
//! is never silently overwritten.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use metalearn_core::bilevel::meta_train;
use metalearn_core::diagnostics::{
    bound_report, gaussian_complexity, gradient_suite, rademacher_complexity, BoundInputs,
    BoundReport, ComplexityEstimate, GradSuiteEntry, LinearBallOracle,
};
use metalearn_core::eval::{results_csv, run_grid, transfer_error, TransferReport};
use metalearn_core::model::{Activation, MetaLearnerParams};
use metalearn_core::online::{ftml_run, regret, regret_ceiling, trace_csv, Instantiation};
use metalearn_core::rng::{streams, Rng};

use crate::config::{build_id, ExperimentConfig};

const GRAD_TOLERANCE: f64 = 1e-5;
const GRAD_POINTS: usize = 100;

fn ensure_output_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
}

/// Write unless an identical file already exists; a different existing file
/// is an error rather than an overwrite.
fn write_guarded(path: &Path, content: &str) -> Result<()> {
    if path.exists() {
        let existing = fs::read_to_string(path)
            .with_context(|| format!("reading existing {}", path.display()))?;
        if existing == content {
            return Ok(());
        }
        bail!(
            "{} already exists with different content; remove it or use a fresh output_dir",
            path.display()
        );
    }
    fs::write(path, content).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainStats {
    max_head_norm: f64,
    max_w_norm: f64,
    final_buffer_sigma: f64,
    final_query_loss: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainManifest {
    config_hash: String,
    build: String,
    seed: u64,
    head: Activation,
    strategy: String,
    task_count: usize,
    support_size: usize,
    query_size: usize,
    checkpoint_file: String,
    log_file: String,
    stats: TrainStats,
    config: ExperimentConfig,
}

fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.json")
}

fn load_manifest(dir: &Path) -> Result<TrainManifest> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path).with_context(|| {
        format!(
            "reading {} (run the train command into this output_dir first)",
            path.display()
        )
    })?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn cmd_train(config: &ExperimentConfig) -> Result<()> {
    ensure_output_dir(&config.output_dir)?;
    let hash = config.hash();
    let manifest_file = manifest_path(&config.output_dir);
    if manifest_file.exists() {
        let manifest = load_manifest(&config.output_dir)?;
        if manifest.config_hash == hash {
            println!(
                "train: already complete in {} (config {hash})",
                config.output_dir.display()
            );
            return Ok(());
        }
        bail!(
            "{} holds a run with config {}; refusing to overwrite with config {hash}",
            config.output_dir.display(),
            manifest.config_hash
        );
    }

    let train_config = config.train_config();
    let outcome = meta_train(&train_config)?;

    let checkpoint = outcome.params.to_checkpoint_json();
    write_guarded(&config.output_dir.join("checkpoint.json"), &checkpoint)?;

    let mut log = String::new();
    for record in &outcome.log {
        log.push_str(&serde_json::to_string(record)?);
        log.push('\n');
    }
    write_guarded(&config.output_dir.join("train_log.jsonl"), &log)?;

    let manifest = TrainManifest {
        config_hash: hash.clone(),
        build: build_id(),
        seed: config.seed,
        head: outcome.params.head(),
        strategy: config.regularizer.label(),
        task_count: train_config.task_count,
        support_size: train_config.environment.support_size,
        query_size: train_config.environment.query_size,
        checkpoint_file: "checkpoint.json".into(),
        log_file: "train_log.jsonl".into(),
        stats: TrainStats {
            max_head_norm: outcome.max_head_norm,
            max_w_norm: outcome.max_w_norm,
            final_buffer_sigma: outcome.final_buffer_sigma,
            final_query_loss: outcome.log.last().map(|r| r.query_loss).unwrap_or(f64::NAN),
        },
        config: config.clone(),
    };
    let body = serde_json::to_string_pretty(&manifest)?;
    write_guarded(&manifest_file, &format!("{body}\n"))?;

    println!(
        "train: {} tasks done, checkpoint at {} (config {hash})",
        train_config.task_count,
        config.output_dir.join("checkpoint.json").display()
    );
    Ok(())
}

fn load_checkpoint(dir: &Path, manifest: &TrainManifest) -> Result<MetaLearnerParams> {
    let path = dir.join(&manifest.checkpoint_file);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    MetaLearnerParams::from_checkpoint_json(&text)
        .with_context(|| format!("parsing checkpoint {}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
struct EvalResult {
    config_hash: String,
    build: String,
    head: Activation,
    strategy: String,
    test_tasks: usize,
    support_size: usize,
    query_size: usize,
    transfer_error: f64,
    mean_w_norm: f64,
    max_head_norm: f64,
}

/// Skip when an output with this config hash is already present; refuse to
/// clobber an output from a different config.
fn resume_guard<T: for<'de> Deserialize<'de>>(
    path: &Path,
    hash: &str,
    extract_hash: impl Fn(&T) -> String,
) -> Result<bool> {
    if !path.exists() {
        return Ok(false);
    }
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let parsed: T =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let existing = extract_hash(&parsed);
    if existing == hash {
        println!("{}: already complete (config {hash})", path.display());
        return Ok(true);
    }
    bail!(
        "{} holds results for config {existing}; refusing to overwrite with config {hash}",
        path.display()
    );
}

pub fn cmd_eval(config: &ExperimentConfig) -> Result<()> {
    ensure_output_dir(&config.output_dir)?;
    let hash = config.hash();
    let result_path = config.output_dir.join("eval_result.json");
    if resume_guard::<EvalResult>(&result_path, &hash, |r| r.config_hash.clone())? {
        return Ok(());
    }

    let manifest = load_manifest(&config.output_dir)?;
    let requested_head = config.regularizer.head_activation();
    if manifest.head != requested_head {
        bail!(
            "checkpoint was trained with a {:?} head; the eval regularizer implies {:?} \
             (strategy '{}' vs checkpoint strategy '{}')",
            manifest.head,
            requested_head,
            config.regularizer.label(),
            manifest.strategy
        );
    }
    let params = load_checkpoint(&config.output_dir, &manifest)?;

    let test_env = config.test_environment();
    let eval = transfer_error(
        &params,
        &test_env,
        config.eval.test_tasks,
        &config.regularizer,
        config.eval.adaptation,
    )?;

    let result = EvalResult {
        config_hash: hash.clone(),
        build: build_id(),
        head: manifest.head,
        strategy: config.regularizer.label(),
        test_tasks: config.eval.test_tasks,
        support_size: test_env.support_size,
        query_size: test_env.query_size,
        transfer_error: eval.mean_error,
        mean_w_norm: eval.mean_w_norm,
        max_head_norm: eval.max_head_norm,
    };
    let body = serde_json::to_string_pretty(&result)?;
    write_guarded(&result_path, &format!("{body}\n"))?;
    println!(
        "eval: transfer error {:.6} over {} tasks -> {}",
        eval.mean_error,
        config.eval.test_tasks,
        result_path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct GridSummary {
    config_hash: String,
    build: String,
    reports: Vec<TransferReport>,
}

/// Plot-ready rows for one (m, n) panel: strategy, T, mean, std.
fn figure_csv(reports: &[TransferReport], m: usize, n: usize) -> String {
    let mut out = String::from("strategy,T,mean,std\n");
    for r in reports {
        if r.support_size == m && r.query_size == n {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.strategy, r.task_count, r.mean_error, r.std_error
            ));
        }
    }
    out
}

pub fn cmd_grid(config: &ExperimentConfig) -> Result<()> {
    let grid_dir = config.output_dir.join("grid");
    ensure_output_dir(&grid_dir)?;
    let hash = config.hash();

    let reports = run_grid(&config.grid, &grid_dir)?;

    // derived artifacts are regenerated from the cells each run
    fs::write(grid_dir.join("results.csv"), results_csv(&reports))
        .with_context(|| "writing results.csv".to_string())?;
    let summary = GridSummary {
        config_hash: hash.clone(),
        build: build_id(),
        reports: reports.clone(),
    };
    fs::write(
        grid_dir.join("summary.json"),
        format!("{}\n", serde_json::to_string_pretty(&summary)?),
    )
    .with_context(|| "writing summary.json".to_string())?;
    for &[m, n] in &config.grid.shot_query {
        fs::write(
            grid_dir.join(format!("fig_m{m}_n{n}.csv")),
            figure_csv(&reports, m, n),
        )
        .with_context(|| "writing figure csv".to_string())?;
    }

    println!(
        "grid: {} cells complete -> {}",
        reports.len(),
        grid_dir.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct DiagnoseResult {
    config_hash: String,
    build: String,
    bound: BoundReport,
    learner_class_gaussian: ComplexityEstimate,
    learner_class_rademacher: ComplexityEstimate,
}

pub fn cmd_diagnose(config: &ExperimentConfig) -> Result<()> {
    ensure_output_dir(&config.output_dir)?;
    let hash = config.hash();
    let result_path = config.output_dir.join("bound_report.json");
    if resume_guard::<DiagnoseResult>(&result_path, &hash, |r| r.config_hash.clone())? {
        return Ok(());
    }

    let manifest = load_manifest(&config.output_dir)?;
    let params = load_checkpoint(&config.output_dir, &manifest)?;
    let [w1, w2] = params.weight_matrices();

    let inputs = BoundInputs {
        frob_norms: vec![w1.frob_norm(), w2.frob_norm()],
        feature_dim: params.feature_dim(),
        tanh_head: params.head() == Activation::Tanh,
        max_head_norm: manifest.stats.max_head_norm,
        max_w_norm: manifest.stats.max_w_norm,
        sigma_min: manifest.stats.final_buffer_sigma,
        task_count: manifest.task_count,
        support_size: manifest.support_size,
        query_size: manifest.query_size,
        test_support_size: config
            .eval
            .support_size
            .unwrap_or(config.environment.support_size),
    };
    let bound = bound_report(&inputs, &config.diagnostics.constants)?;

    // complexity of the learner ball over features of sampled inputs
    let mut sample_rng = Rng::new(Rng::derive_seed(config.seed, streams::DIAGNOSTICS));
    let data: Vec<Vec<f64>> = (0..config.diagnostics.sample_points)
        .map(|_| {
            let x = sample_rng.uniform_in(
                config.environment.input_range[0],
                config.environment.input_range[1],
            );
            params.features(x)
        })
        .collect();
    let oracle = LinearBallOracle {
        radius: bound.constants.m_bound,
    };
    let mc_rng = Rng::new(Rng::derive_seed(config.seed, streams::DIAGNOSTICS).wrapping_add(1));
    let gaussian =
        gaussian_complexity(&oracle, &data, config.diagnostics.mc_draws, &mc_rng.child(0))?;
    let rademacher =
        rademacher_complexity(&oracle, &data, config.diagnostics.mc_draws, &mc_rng.child(1))?;

    let result = DiagnoseResult {
        config_hash: hash.clone(),
        build: build_id(),
        bound,
        learner_class_gaussian: gaussian,
        learner_class_rademacher: rademacher,
    };
    let body = serde_json::to_string_pretty(&result)?;
    write_guarded(&result_path, &format!("{body}\n"))?;
    println!(
        "diagnose: bound total {:.4e} -> {}",
        result.bound.total,
        result_path.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct OnlineResult {
    config_hash: String,
    build: String,
    instantiation: Instantiation,
    horizon: usize,
    regret: f64,
    comparator_exact: bool,
    max_grad_norm: f64,
    /// `4 G^2 (1 + ln T) / tau` with `tau = 2`; only checked for the convex
    /// instantiation where the constants are certifiable.
    regret_ceiling: Option<f64>,
    ceiling_satisfied: Option<bool>,
}

pub fn cmd_online(config: &ExperimentConfig) -> Result<()> {
    ensure_output_dir(&config.output_dir)?;
    let hash = config.hash();
    let result_path = config.output_dir.join("online_result.json");
    if resume_guard::<OnlineResult>(&result_path, &hash, |r| r.config_hash.clone())? {
        return Ok(());
    }

    let online_config = config.online_config();
    let trace = ftml_run(&online_config)?;
    let summary = regret(&trace);

    let (ceiling, ok) = match online_config.instantiation {
        Instantiation::ConvexQuadratic => {
            let ceiling = regret_ceiling(trace.max_grad_norm, online_config.horizon, 2.0);
            (Some(ceiling), Some(summary.regret <= ceiling))
        }
        Instantiation::FeatureNetwork => (None, None),
    };

    write_guarded(&config.output_dir.join("online_trace.csv"), &trace_csv(&trace))?;
    let result = OnlineResult {
        config_hash: hash.clone(),
        build: build_id(),
        instantiation: online_config.instantiation,
        horizon: online_config.horizon,
        regret: summary.regret,
        comparator_exact: summary.comparator_exact,
        max_grad_norm: trace.max_grad_norm,
        regret_ceiling: ceiling,
        ceiling_satisfied: ok,
    };
    let body = serde_json::to_string_pretty(&result)?;
    write_guarded(&result_path, &format!("{body}\n"))?;

    println!(
        "online: T={} regret {:.6} -> {}",
        online_config.horizon,
        summary.regret,
        result_path.display()
    );
    if ok == Some(false) {
        bail!(
            "regret {} exceeds the guarantee ceiling {}",
            summary.regret,
            ceiling.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct GradcheckResult {
    config_hash: String,
    build: String,
    tolerance: f64,
    points_per_op: usize,
    entries: Vec<GradSuiteEntry>,
    pass: bool,
}

pub fn cmd_gradcheck(config: &ExperimentConfig) -> Result<()> {
    ensure_output_dir(&config.output_dir)?;
    let hash = config.hash();
    let result_path = config.output_dir.join("gradcheck.json");
    if resume_guard::<GradcheckResult>(&result_path, &hash, |r| r.config_hash.clone())? {
        return Ok(());
    }

    let entries = gradient_suite(GRAD_POINTS, config.seed);
    let pass = entries.iter().all(|e| e.max_rel_error < GRAD_TOLERANCE);
    for e in &entries {
        println!(
            "gradcheck: {:<12} max rel error {:>12.3e}  {}",
            e.op,
            e.max_rel_error,
            if e.max_rel_error < GRAD_TOLERANCE {
                "ok"
            } else {
                "FAIL"
            }
        );
    }

    let result = GradcheckResult {
        config_hash: hash.clone(),
        build: build_id(),
        tolerance: GRAD_TOLERANCE,
        points_per_op: GRAD_POINTS,
        entries,
        pass,
    };
    let body = serde_json::to_string_pretty(&result)?;
    write_guarded(&result_path, &format!("{body}\n"))?;
    if !pass {
        bail!("gradient checks failed (tolerance {GRAD_TOLERANCE})");
    }
    println!("gradcheck: all ops within {GRAD_TOLERANCE}");
    Ok(())
}
