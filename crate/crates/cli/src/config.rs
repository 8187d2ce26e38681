//! Run configuration: built-in defaults, overridden by a TOML file, overridden
//! by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ncp_core::denoiser::Arch;
use ncp_core::objectives::{ObjectiveConfig, ObjectiveKind};
use ncp_core::schedule::{ScheduleSpec, VarianceSchedule};
use ncp_core::train_eval::{PretrainConfig, ToyTask, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub embed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            embed: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n_prompts: usize,
    pub samples_per_prompt: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_prompts: 2000,
            samples_per_prompt: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Held-out prompts per win-rate comparison.
    pub prompts: usize,
    /// Sampling steps; the full schedule when absent.
    pub sampling_steps: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompts: 500,
            sampling_steps: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagConfig {
    /// Pairs in the batch used for gradient checks.
    pub pairs: usize,
    pub coords: usize,
    pub tolerance: f64,
    /// Random reward triples in the cancellation report.
    pub triples: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            pairs: 4,
            coords: 64,
            tolerance: ncp_core::gradcheck::DEFAULT_TOLERANCE,
            triples: 32,
        }
    }
}

/// Pinned settings of the equal-budget comparison run by the acceptance suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    pub seeds: Vec<u64>,
    /// CPU seconds of training per run.
    pub budget_seconds: f64,
    pub min_win_rate_vs_sft: f64,
    pub min_win_rate_filtered_vs_raw: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3],
            budget_seconds: 5.0,
            min_win_rate_vs_sft: 0.55,
            min_win_rate_filtered_vs_raw: 0.5,
        }
    }
}

/// Default input and output locations; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub items: Option<PathBuf>,
    pub base: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: ToyTask,
    pub schedule: ScheduleSpec,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub diag: DiagConfig,
    pub study: StudyConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            task: ToyTask::default(),
            schedule: ScheduleSpec {
                timesteps: 100,
                beta_start: 1e-3,
                beta_end: 0.2,
            },
            model: ModelConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            train: TrainConfig {
                steps: 2000,
                objective: ObjectiveConfig {
                    beta_t_product: 20.0,
                    ..ObjectiveConfig::new(ObjectiveKind::NcpDpo)
                },
                ..TrainConfig::default()
            },
            eval: EvalConfig::default(),
            diag: DiagConfig::default(),
            study: StudyConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                Self::from_toml(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.schedule()?;
        self.arch().validate()?;
        self.train.validate()?;
        if self.data.samples_per_prompt < 2 {
            bail!("data.samples_per_prompt must be at least 2");
        }
        if self.eval.prompts == 0 {
            bail!("eval.prompts must be positive");
        }
        if let Some(n) = self.eval.sampling_steps.or(self.train.eval_sampling_steps) {
            if n == 0 || n > self.schedule.timesteps {
                bail!(
                    "sampling steps must lie in [1, {}]",
                    self.schedule.timesteps
                );
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<VarianceSchedule> {
        Ok(VarianceSchedule::from_spec(&self.schedule)?)
    }

    pub fn arch(&self) -> Arch {
        Arch {
            input_dim: self.task.dim,
            hidden: self.model.hidden,
            embed: self.model.embed,
            conditions: self.task.num_conditions,
            timesteps: self.schedule.timesteps,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}
