//! Losses, AdamW, checkpoints, pretext pretraining, round-robin multi-task
//! fine-tuning and test-split evaluation.

mod checkpoint;
mod config;
mod finetune;
mod gradcheck;
mod loss;
mod optim;
mod pretrain;

pub use checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta, RngState, MAGIC, VERSION};
pub use config::{DataConfig, FinetuneConfig, OptimConfig, PretrainConfig, TrainConfig};
pub use finetune::{model_from_checkpoint, EpochRecord, Finetuner, StepStats};
pub use gradcheck::{model_gradient_check, ModelCheck};
pub use loss::{cls_loss, det_loss, reg_loss, seg_loss, task_loss, DICE_SMOOTH};
pub use optim::{adamw_step, AdamW, Moments};
pub use pretrain::{pretrain_backbone, PretrainOutcome, Pretrainer};

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::exec::{self, ExecMode};
use crate::metrics::{self, MetricsReport};
use crate::model::{Prediction, TapSlfModel};
use crate::numkernel::{Tape, Tensor};
use crate::params::ParamId;
use crate::synthdata::{self, Split, Target, TaskSample};
use crate::task::Task;

/// Train/test splits for every task.
#[derive(Clone, Debug)]
pub struct Dataset {
    splits: BTreeMap<Task, Split>,
}

impl Dataset {
    /// Task `t` draws seeds from `base_seed + 1_000_000·index(t)` onward so the
    /// four tasks never share an image.
    pub fn generate(cfg: &DataConfig, image_size: usize, mode: ExecMode) -> Result<Self> {
        let mut splits = BTreeMap::new();
        for task in Task::ALL {
            let base = cfg.base_seed + 1_000_000 * task.index() as u64;
            splits.insert(task, synthdata::gen_split(task, cfg.samples_per_task, base, image_size, mode)?);
        }
        Ok(Dataset { splits })
    }

    pub fn split(&self, task: Task) -> &Split {
        &self.splits[&task]
    }
}

/// Loss and per-parameter gradients of one sample, listed in the order of
/// `ids`. Parameters the loss does not reach get `None`.
pub fn sample_gradients(
    model: &TapSlfModel,
    ids: &[ParamId],
    task: Task,
    sample: &TaskSample,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let bound = model.store().bind_trainable(&mut tape);
    let out = model.forward(&mut tape, &bound, task, &sample.image)?;
    let loss = task_loss(&mut tape, task, out.output, &sample.target)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    Ok((value, ids.iter().map(|&id| grads.get(bound.var(id))).collect()))
}

/// Sums per-item gradients in index order and scales by `weight`. A
/// parameter stays `None` only if no item reached it.
pub(crate) fn reduce_gradients(items: Vec<Vec<Option<Tensor>>>, weight: f64) -> Vec<Option<Tensor>> {
    let mut iter = items.into_iter();
    let Some(mut acc) = iter.next() else {
        return Vec::new();
    };
    for item in iter {
        for (a, g) in acc.iter_mut().zip(item) {
            match (a.as_mut(), g) {
                (Some(a), Some(g)) => {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
                (None, Some(g)) => *a = Some(g),
                (_, None) => {}
            }
        }
    }
    for a in acc.iter_mut().flatten() {
        for x in a.data_mut() {
            *x *= weight;
        }
    }
    acc
}

/// Pairs reduced gradients with their ids, dropping untouched parameters.
pub(crate) fn touched(ids: Vec<ParamId>, grads: Vec<Option<Tensor>>) -> Vec<(ParamId, Tensor)> {
    ids.into_iter().zip(grads).filter_map(|(id, g)| g.map(|g| (id, g))).collect()
}

/// Scores `model` on the given samples of one task and fills the matching
/// columns of `report`. AUC is left empty when the labels hold one class.
pub fn evaluate_task(
    model: &TapSlfModel,
    task: Task,
    samples: &[TaskSample],
    mode: ExecMode,
    report: &mut MetricsReport,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Metric(format!("no {task} samples to evaluate")));
    }
    let preds = exec::try_map_indexed(mode, samples.len(), |i| model.predict(task, &samples[i].image))?;
    let size = model.config().encoder.image_size;
    let heads = &model.config().heads;
    let n = samples.len() as f64;
    match task {
        Task::Seg => {
            let (mut dsc, mut hd) = (0.0, 0.0);
            for (p, s) in preds.iter().zip(samples) {
                let (Prediction::Seg { mask }, Target::Mask(gt)) = (p, &s.target) else {
                    return Err(Error::Contract("segmentation sample without a mask".into()));
                };
                dsc += metrics::dsc(mask, gt, heads.seg_classes)?;
                hd += metrics::hd95(mask, gt, size, size, heads.seg_classes)?;
            }
            report.dsc = Some(dsc / n);
            report.hd95 = Some(hd / n);
        }
        Task::Cls => {
            let (mut probs, mut labels, mut gts) = (Vec::new(), Vec::new(), Vec::new());
            for (p, s) in preds.iter().zip(samples) {
                let (Prediction::Cls { label, probs: pr }, Target::Class(gt)) = (p, &s.target) else {
                    return Err(Error::Contract("classification sample without a label".into()));
                };
                probs.push(pr.clone());
                labels.push(*label);
                gts.push(*gt);
            }
            report.auc = match metrics::roc_auc_multiclass(&probs, &gts, heads.cls_classes) {
                Ok(v) => Some(v),
                Err(Error::Metric(_)) => None,
                Err(e) => return Err(e),
            };
            let (f1, mcc) = metrics::f1_mcc(&labels, &gts, heads.cls_classes)?;
            report.f1 = Some(f1);
            report.mcc = Some(mcc);
        }
        Task::Det => {
            let mut boxes = Vec::new();
            let mut gts = Vec::new();
            for (p, s) in preds.iter().zip(samples) {
                let (Prediction::Det { bbox }, Target::Box(gt)) = (p, &s.target) else {
                    return Err(Error::Contract("detection sample without a box".into()));
                };
                boxes.push(*bbox);
                gts.push(*gt);
            }
            report.miou = Some(metrics::box_miou(&boxes, &gts)?);
        }
        Task::Reg => {
            let mut values = Vec::new();
            let mut gts = Vec::new();
            for (p, s) in preds.iter().zip(samples) {
                let (Prediction::Reg { value }, Target::Scalar(gt)) = (p, &s.target) else {
                    return Err(Error::Contract("regression sample without a target".into()));
                };
                values.push(*value);
                gts.push(*gt);
            }
            report.mre = Some(metrics::mre(&values, &gts)?);
        }
    }
    report.counts.insert(task, samples.len());
    Ok(())
}

/// Evaluates the listed tasks on their test splits.
pub fn evaluate(model: &TapSlfModel, data: &Dataset, tasks: &[Task], mode: ExecMode) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    for &task in tasks {
        evaluate_task(model, task, &data.split(task).test, mode, &mut report)?;
    }
    Ok(report)
}
