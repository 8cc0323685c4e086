use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::adapters::{count_trainable, AccountingReport};
use crate::error::{Error, Result};
use crate::exec;
use crate::metrics::MetricsReport;
use crate::model::{stream_rng, TapSlfModel};
use crate::numkernel::Tensor;
use crate::params::ParamStore;
use crate::synthdata::TaskSample;
use crate::task::Task;

use super::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, RngState};
use super::config::TrainConfig;
use super::optim::AdamW;
use super::{evaluate, reduce_gradients, sample_gradients, touched, Dataset};

const STREAM_TRAIN: u64 = 10;

fn scaled(mut t: Tensor, s: f64) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v *= s);
    t
}

/// Losses of one round-robin step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    /// Sum of the four per-task batch means.
    pub loss: f64,
    /// Batch-mean loss of each task in [`Task::ALL`] order.
    pub task_losses: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub mean_loss: f64,
    pub metrics: MetricsReport,
}

/// Multi-task fine-tuning. One step samples a batch for every task in
/// round-robin order, sums the four batch-mean losses and applies a single
/// AdamW update to the trainable parameters.
#[derive(Clone, Debug)]
pub struct Finetuner {
    cfg: TrainConfig,
    model: TapSlfModel,
    optim: AdamW,
    rng: ChaCha8Rng,
    step: u64,
}

/// Rebuilds the model stored in a fine-tuned checkpoint.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<TapSlfModel> {
    if ck.meta.kind != CheckpointKind::Finetuned {
        return Err(Error::Config("expected a fine-tuned checkpoint, got a backbone".into()));
    }
    let mut model = TapSlfModel::new(&ck.meta.config.model(), ck.meta.config.seed)?;
    ck.load_into(model.store_mut())?;
    Ok(model)
}

impl Finetuner {
    /// Starts from the adapter and head initialization for `cfg.seed` and,
    /// if given, the backbone tensors of `backbone`.
    pub fn new(cfg: &TrainConfig, backbone: Option<&ParamStore>) -> Result<Self> {
        cfg.validate()?;
        let mut model = TapSlfModel::new(&cfg.model(), cfg.seed)?;
        if let Some(src) = backbone {
            model.load_backbone(src)?;
        }
        let optim = AdamW::new(model.store(), cfg.finetune.optim.clone())?;
        Ok(Finetuner {
            cfg: cfg.clone(),
            model,
            optim,
            rng: stream_rng(cfg.seed, STREAM_TRAIN),
            step: 0,
        })
    }

    /// Resumes exactly where `ck` left off: parameters, moments, step count
    /// and sampler state.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let model = model_from_checkpoint(ck)?;
        let cfg = ck.meta.config.clone();
        let optim = AdamW::restore(cfg.finetune.optim.clone(), ck.meta.step, ck.moments()?)?;
        Ok(Finetuner {
            rng: ck.meta.rng.restore()?,
            step: ck.meta.step,
            cfg,
            model,
            optim,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &TapSlfModel {
        &self.model
    }

    pub fn into_model(self) -> TapSlfModel {
        self.model
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optim
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn accounting(&self) -> AccountingReport {
        count_trainable(&self.model)
    }

    /// One round-robin step on freshly sampled batches.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepStats> {
        let b = self.cfg.finetune.batch_size;
        let mut items = Vec::with_capacity(4 * b);
        for task in Task::ALL {
            let train = &data.split(task).train;
            for _ in 0..b {
                items.push((task, &train[self.rng.random_range(0..train.len())]));
            }
        }
        self.step_on(&items)
    }

    /// One optimizer step on an explicit batch: per-task mean losses are
    /// summed, and parameters no sample reaches are left untouched.
    pub fn step_on(&mut self, items: &[(Task, &TaskSample)]) -> Result<StepStats> {
        let mut per_task = [0usize; 4];
        for (task, _) in items {
            per_task[task.index()] += 1;
        }
        let ids = self.model.store().trainable_ids();
        let model = &self.model;
        let results = exec::try_map_indexed(self.cfg.exec, items.len(), |i| {
            let (task, sample) = items[i];
            sample_gradients(model, &ids, task, sample)
        })?;
        let mut task_losses = [0.0; 4];
        let mut grads = Vec::with_capacity(results.len());
        for ((task, _), (loss, g)) in items.iter().zip(results) {
            let n = per_task[task.index()] as f64;
            task_losses[task.index()] += loss / n;
            grads.push(g.into_iter().map(|t| t.map(|t| scaled(t, 1.0 / n))).collect());
        }
        let grads = reduce_gradients(grads, 1.0);
        self.optim.step(self.model.store_mut(), &touched(ids, grads))?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: task_losses.iter().sum(),
            task_losses,
        })
    }

    /// Runs every configured epoch, evaluating on the test splits after
    /// each one. `on_step` sees every step, `on_epoch` every epoch summary.
    pub fn run(
        &mut self,
        data: &Dataset,
        mut on_step: impl FnMut(&StepStats),
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<Vec<EpochRecord>> {
        let mut records = Vec::with_capacity(self.cfg.finetune.epochs);
        for epoch in 0..self.cfg.finetune.epochs {
            let mut total = 0.0;
            for _ in 0..self.cfg.finetune.steps_per_epoch {
                let s = self.train_step(data)?;
                total += s.loss;
                on_step(&s);
            }
            let metrics = evaluate(&self.model, data, &Task::ALL, self.cfg.exec)?;
            let record = EpochRecord {
                epoch: epoch + 1,
                step: self.step,
                mean_loss: total / self.cfg.finetune.steps_per_epoch.max(1) as f64,
                metrics,
            };
            on_epoch(&record);
            records.push(record);
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            kind: CheckpointKind::Finetuned,
            config: self.cfg.clone(),
            step: self.step,
            rng: RngState::capture(self.cfg.seed, &self.rng),
        };
        Checkpoint::capture(meta, self.model.store(), Some(&self.optim))
    }
}
