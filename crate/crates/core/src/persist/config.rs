//! JSON run configuration. Every key is optional; unknown keys are
//! rejected. Defaults are the reference pretraining and finetuning values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::model::{Preset, PromptAttnSource};
use crate::pretrain::TrainPlan;
use crate::tasks::{TaskKind, TaskSpec};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub dropout: f64,
    pub prompt_attn_source: PromptAttnSource,
    pub min_count: u64,

    pub mask_rate: f64,
    pub overlap: f64,
    pub lr: f64,
    pub batch: usize,
    pub accum: usize,
    pub temperature: f64,
    pub max_steps: u64,
    pub mcm_per_cl: usize,
    pub shuffle_columns: bool,
    pub checkpoint_every: u64,

    pub finetune_lr: f64,
    pub finetune_batch: usize,
    pub finetune_steps: u64,
    pub eval_every: u64,
    pub dev_fraction: f64,
    pub max_len: usize,

    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let plan = TrainPlan::default();
        let task = TaskSpec::new(TaskKind::Classify, "");
        Self {
            preset: Preset::Tiny,
            seed: 0,
            dropout: 0.1,
            prompt_attn_source: PromptAttnSource::Tabunit,
            min_count: 1,
            mask_rate: plan.mask_rate,
            overlap: plan.overlap,
            lr: plan.lr,
            batch: plan.batch,
            accum: plan.accum,
            temperature: plan.temperature,
            max_steps: plan.max_steps,
            mcm_per_cl: plan.mcm_per_cl,
            shuffle_columns: plan.shuffle_columns,
            checkpoint_every: plan.checkpoint_every,
            finetune_lr: task.lr,
            finetune_batch: task.batch,
            finetune_steps: task.steps,
            eval_every: task.eval_every,
            dev_fraction: task.dev_fraction,
            max_len: task.max_len,
            data: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let c: RunConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train_plan()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::Invalid("dropout must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(ConfigError::Invalid(
                "dev_fraction must lie in [0, 1)".into(),
            ));
        }
        if self.finetune_batch == 0 || !(self.finetune_lr > 0.0) || self.max_len == 0 {
            return Err(ConfigError::Invalid(
                "finetune_batch, finetune_lr and max_len must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn train_plan(&self) -> TrainPlan {
        TrainPlan {
            mask_rate: self.mask_rate,
            overlap: self.overlap,
            lr: self.lr,
            batch: self.batch,
            accum: self.accum,
            temperature: self.temperature,
            max_steps: self.max_steps,
            seed: self.seed,
            mcm_per_cl: self.mcm_per_cl,
            shuffle_columns: self.shuffle_columns,
            checkpoint_every: self.checkpoint_every,
        }
    }

    pub fn task_spec(&self, kind: TaskKind, target: &str) -> TaskSpec {
        TaskSpec {
            lr: self.finetune_lr,
            batch: self.finetune_batch,
            steps: self.finetune_steps,
            eval_every: self.eval_every,
            dev_fraction: self.dev_fraction,
            max_len: self.max_len,
            seed: self.seed,
            ..TaskSpec::new(kind, target)
        }
    }
}
