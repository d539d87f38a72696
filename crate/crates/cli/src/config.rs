//! Experiment configuration: JSON file with defaults for every field,
//! dotted-path command-line overrides, and a stable content hash embedded
//! in every output file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use metalearn_core::bilevel::{InnerOptimizer, TrainConfig};
use metalearn_core::diagnostics::BoundConstants;
use metalearn_core::eval::{AdaptationProtocol, GridSpec};
use metalearn_core::online::OnlineConfig;
use metalearn_core::regularizers::RegularizerSpec;
use metalearn_core::rng::{streams, Rng};
use metalearn_core::tasks::EnvironmentConfig;

/// Task distribution and episode sizes; the task-pool seed is derived from
/// the master seed per command, so it is not a field here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentSection {
    pub amplitude_range: [f64; 2],
    pub frequency_range: [f64; 2],
    pub input_range: [f64; 2],
    pub support_size: usize,
    pub query_size: usize,
}

impl Default for EnvironmentSection {
    fn default() -> Self {
        let base = EnvironmentConfig::default();
        EnvironmentSection {
            amplitude_range: base.amplitude_range,
            frequency_range: base.frequency_range,
            input_range: base.input_range,
            support_size: base.support_size,
            query_size: base.query_size,
        }
    }
}

impl EnvironmentSection {
    pub fn to_config(&self, seed: u64, support_size: usize, query_size: usize) -> EnvironmentConfig {
        EnvironmentConfig {
            amplitude_range: self.amplitude_range,
            frequency_range: self.frequency_range,
            input_range: self.input_range,
            support_size,
            query_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub task_count: usize,
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub inner_optimizer: InnerOptimizer,
    pub outer_lr: f64,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub sigma_log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let base = TrainConfig::default();
        TrainSection {
            task_count: base.task_count,
            inner_steps: base.inner_steps,
            inner_lr: base.inner_lr,
            inner_optimizer: base.inner_optimizer,
            outer_lr: base.outer_lr,
            hidden_dim: base.hidden_dim,
            feature_dim: base.feature_dim,
            sigma_log_every: base.sigma_log_every,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Meta-test task pool size.
    pub test_tasks: usize,
    /// Override the meta-test support size (defaults to the environment's).
    pub support_size: Option<usize>,
    /// Override the meta-test query size (defaults to the environment's).
    pub query_size: Option<usize>,
    /// Meta-test adaptation procedure (default mirrors the training inner
    /// loop; `{"budget": "converged"}` solves each inner problem outright).
    pub adaptation: AdaptationProtocol,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            test_tasks: 600,
            support_size: None,
            query_size: None,
            adaptation: AdaptationProtocol::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub constants: BoundConstants,
    /// Monte-Carlo draws for the complexity estimates.
    pub mc_draws: usize,
    /// Number of sampled inputs whose features form the complexity data set.
    pub sample_points: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        DiagnosticsSection {
            constants: BoundConstants::default(),
            mc_draws: 1000,
            sample_points: 64,
        }
    }
}

/// Online section: the core config minus its seed, which the master seed
/// supplies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineSection {
    pub horizon: usize,
    pub inner_step_size: f64,
    pub instantiation: metalearn_core::online::Instantiation,
    pub ftl_tolerance: f64,
    pub ftl_max_epochs: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub hidden_dim: usize,
    pub feature_dim: usize,
}

impl Default for OnlineSection {
    fn default() -> Self {
        let base = OnlineConfig::default();
        OnlineSection {
            horizon: base.horizon,
            inner_step_size: base.inner_step_size,
            instantiation: base.instantiation,
            ftl_tolerance: base.ftl_tolerance,
            ftl_max_epochs: base.ftl_max_epochs,
            support_size: base.support_size,
            query_size: base.query_size,
            hidden_dim: base.hidden_dim,
            feature_dim: base.feature_dim,
        }
    }
}

/// The whole experiment file. Unknown keys are rejected; every field has a
/// default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; per-command streams are derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub environment: EnvironmentSection,
    pub train: TrainSection,
    pub regularizer: RegularizerSpec,
    pub eval: EvalSection,
    pub grid: GridSpec,
    pub diagnostics: DiagnosticsSection,
    pub online: OnlineSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            environment: EnvironmentSection::default(),
            train: TrainSection::default(),
            regularizer: RegularizerSpec::default(),
            eval: EvalSection::default(),
            grid: GridSpec::default(),
            diagnostics: DiagnosticsSection::default(),
            online: OnlineSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Load from an optional file, then apply `path=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value: serde_json::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => serde_json::to_value(ExperimentConfig::default())?,
        };
        for entry in overrides {
            apply_override(&mut value, entry)?;
        }
        let config: ExperimentConfig = serde_json::from_value(value)
            .context("config validation (unknown or ill-typed field)")?;
        if config.output_dir.as_os_str().is_empty() {
            bail!("output_dir must not be empty");
        }
        Ok(config)
    }

    /// Stable content hash of the resolved config (FNV-1a over compact JSON).
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        for byte in text.as_bytes() {
            hash ^= u64::from(*byte);
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{hash:016x}")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            task_count: self.train.task_count,
            inner_steps: self.train.inner_steps,
            inner_lr: self.train.inner_lr,
            inner_optimizer: self.train.inner_optimizer,
            outer_lr: self.train.outer_lr,
            hidden_dim: self.train.hidden_dim,
            feature_dim: self.train.feature_dim,
            regularizer: self.regularizer.clone(),
            seed: self.seed,
            environment: self.environment.to_config(
                Rng::derive_seed(self.seed, streams::TRAIN_TASKS),
                self.environment.support_size,
                self.environment.query_size,
            ),
            sigma_log_every: self.train.sigma_log_every,
        }
    }

    pub fn test_environment(&self) -> EnvironmentConfig {
        self.environment.to_config(
            Rng::derive_seed(self.seed, streams::TEST_TASKS),
            self.eval.support_size.unwrap_or(self.environment.support_size),
            self.eval.query_size.unwrap_or(self.environment.query_size),
        )
    }

    pub fn online_config(&self) -> OnlineConfig {
        OnlineConfig {
            horizon: self.online.horizon,
            inner_step_size: self.online.inner_step_size,
            instantiation: self.online.instantiation,
            seed: self.seed,
            ftl_tolerance: self.online.ftl_tolerance,
            ftl_max_epochs: self.online.ftl_max_epochs,
            support_size: self.online.support_size,
            query_size: self.online.query_size,
            hidden_dim: self.online.hidden_dim,
            feature_dim: self.online.feature_dim,
        }
    }
}

/// Apply one `dotted.path=value` override to the config JSON tree. The
/// value parses as JSON when possible, else as a bare string.
fn apply_override(root: &mut serde_json::Value, entry: &str) -> Result<()> {
    let Some((path, raw)) = entry.split_once('=') else {
        bail!("override '{entry}' must look like path.to.field=value");
    };
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));

    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, segment) in segments.iter().enumerate() {
        let map = cursor
            .as_object_mut()
            .with_context(|| format!("override path '{path}' crosses a non-object at '{segment}'"))?;
        if i + 1 == segments.len() {
            map.insert(segment.to_string(), value);
            return Ok(());
        }
        cursor = map
            .entry(segment.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment");
}

pub fn build_id() -> String {
    format!("{}-{}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}
