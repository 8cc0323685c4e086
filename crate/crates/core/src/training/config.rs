use serde::{Deserialize, Serialize};

use crate::adapters::AdapterConfig;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::heads::HeadConfig;
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Samples generated per task; 80% train, 20% test.
    pub samples_per_task: usize,
    pub base_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            samples_per_task: 100,
            base_seed: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Fraction of patches zeroed for the reconstruction pretext.
    pub mask_ratio: f64,
    pub optim: OptimConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 200,
            batch_size: 4,
            mask_ratio: 0.5,
            optim: OptimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Samples per task per step; one step visits all four tasks.
    pub batch_size: usize,
    pub optim: OptimConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 3,
            steps_per_epoch: 100,
            batch_size: 6,
            optim: OptimConfig::default(),
        }
    }
}

/// Everything that determines a pretraining or fine-tuning run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub adapter: AdapterConfig,
    pub heads: HeadConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub exec: ExecMode,
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            adapter: self.adapter.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.pretrain.optim.validate()?;
        self.finetune.optim.validate()?;
        if self.finetune.epochs == 0 || self.finetune.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be at least 1".into()));
        }
        if !(0.0 < self.pretrain.mask_ratio && self.pretrain.mask_ratio < 1.0) {
            return Err(Error::Config(format!(
                "mask_ratio must lie in (0, 1), got {}",
                self.pretrain.mask_ratio
            )));
        }
        if self.data.samples_per_task < crate::synthdata::MIN_SPLIT {
            return Err(Error::Config(format!(
                "samples_per_task must be at least {}",
                crate::synthdata::MIN_SPLIT
            )));
        }
        Ok(())
    }

    /// Disables prompting ("w/o TAP").
    pub fn without_prompts(mut self) -> Self {
        self.adapter.prompted_tasks.clear();
        self
    }

    /// Injects LoRA into every layer ("w/o SLF").
    pub fn without_selection(mut self) -> Self {
        self.adapter.frozen_ratio = 0.0;
        self
    }

    /// Trains the heads only: no prompts and no LoRA.
    pub fn heads_only(mut self) -> Self {
        self.adapter.prompted_tasks.clear();
        self.adapter.frozen_ratio = 1.0;
        self
    }

    /// A small configuration for fast tests.
    pub fn micro() -> Self {
        let m = ModelConfig::micro();
        TrainConfig {
            seed: 7,
            encoder: m.encoder,
            adapter: m.adapter,
            heads: m.heads,
            data: DataConfig {
                samples_per_task: 10,
                base_seed: 500,
            },
            pretrain: PretrainConfig {
                steps: 5,
                batch_size: 2,
                ..PretrainConfig::default()
            },
            finetune: FinetuneConfig {
                epochs: 2,
                steps_per_epoch: 3,
                batch_size: 2,
                ..FinetuneConfig::default()
            },
            exec: ExecMode::Parallel,
        }
    }
}
