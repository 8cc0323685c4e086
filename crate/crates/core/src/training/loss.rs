//! Per-task training objectives recorded on the tape.

use crate::error::{Error, Result};
use crate::numkernel::{Tape, Tensor, Var};
use crate::synthdata::Target;
use crate::task::Task;

/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

fn one_hot(labels: &[u8], n_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * n_classes];
    for (i, &c) in labels.iter().enumerate() {
        let c = c as usize;
        if c >= n_classes {
            return Err(Error::Contract(format!("label {c} out of range for {n_classes} classes")));
        }
        data[i * n_classes + c] = 1.0;
    }
    Tensor::new(vec![labels.len(), n_classes], data)
}

/// Mean cross-entropy of row-wise logits against one-hot rows.
fn cross_entropy(tape: &mut Tape, logits: Var, onehot: Var) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.mul(logp, onehot)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / rows as f64)
}

/// `0.5·(1 − mean soft Dice over foreground classes) + 0.5·CE` for
/// `[P×C]` logits against a length-`P` mask.
pub fn seg_loss(tape: &mut Tape, logits: Var, mask: &[u8]) -> Result<Var> {
    let (p, c) = match *tape.shape(logits) {
        [p, c] => (p, c),
        ref s => return Err(Error::Contract(format!("seg logits must be a matrix, got {s:?}"))),
    };
    if p != mask.len() || c < 2 {
        return Err(Error::dim("seg_loss", &[p, c], &[mask.len(), c.max(2)]));
    }
    let onehot = one_hot(mask, c)?;
    let fg_gt: Vec<f64> = (1..c)
        .map(|k| onehot.data().iter().skip(k).step_by(c).sum())
        .collect();
    let onehot = tape.constant(onehot);
    let ce = cross_entropy(tape, logits, onehot)?;

    let probs = tape.softmax_rows(logits)?;
    let probs_fg = tape.slice_cols(probs, 1, c)?;
    let gt_fg = tape.slice_cols(onehot, 1, c)?;
    let inter = tape.mul(probs_fg, gt_fg)?;
    let inter = tape.mean_rows(inter)?;
    let inter = tape.scale(inter, 2.0 * p as f64)?;
    let num = tape.add_scalar(inter, DICE_SMOOTH)?;
    let pred_sum = tape.mean_rows(probs_fg)?;
    let pred_sum = tape.scale(pred_sum, p as f64)?;
    let gt_sum = tape.constant(Tensor::new(vec![1, c - 1], fg_gt)?);
    let den = tape.add(pred_sum, gt_sum)?;
    let den = tape.add_scalar(den, DICE_SMOOTH)?;
    let dice = tape.div(num, den)?;
    let dice = tape.mean(dice)?;
    let dice_loss = tape.scale(dice, -0.5)?;
    let dice_loss = tape.add_scalar(dice_loss, 0.5)?;
    let ce = tape.scale(ce, 0.5)?;
    tape.add(dice_loss, ce)
}

/// Cross-entropy of `[1×C]` logits against `label`.
pub fn cls_loss(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let c = tape.shape(logits)[1];
    if label >= c {
        return Err(Error::Contract(format!("label {label} out of range for {c} classes")));
    }
    let mut row = vec![0.0; c];
    row[label] = 1.0;
    let onehot = tape.constant(Tensor::new(vec![1, c], row)?);
    cross_entropy(tape, logits, onehot)
}

fn corners(tape: &mut Tape, b: Var) -> Result<[Var; 4]> {
    let cx = tape.slice_cols(b, 0, 1)?;
    let cy = tape.slice_cols(b, 1, 2)?;
    let w = tape.slice_cols(b, 2, 3)?;
    let h = tape.slice_cols(b, 3, 4)?;
    let hw = tape.scale(w, 0.5)?;
    let hh = tape.scale(h, 0.5)?;
    Ok([
        tape.sub(cx, hw)?,
        tape.sub(cy, hh)?,
        tape.add(cx, hw)?,
        tape.add(cy, hh)?,
    ])
}

/// `0.5·mean|pred − gt| + 0.5·(1 − IoU)` for `(cx, cy, w, h)` boxes.
pub fn det_loss(tape: &mut Tape, pred: Var, target: &[f64; 4]) -> Result<Var> {
    if tape.shape(pred) != [1, 4] {
        return Err(Error::dim("det_loss", tape.shape(pred), &[1, 4]));
    }
    let gt = tape.constant(Tensor::new(vec![1, 4], target.to_vec())?);
    let diff = tape.sub(pred, gt)?;
    let l1 = tape.abs(diff)?;
    let l1 = tape.mean(l1)?;

    let [px0, py0, px1, py1] = corners(tape, pred)?;
    let [gx0, gy0, gx1, gy1] = corners(tape, gt)?;
    let lo_x = tape.maximum(px0, gx0)?;
    let hi_x = tape.minimum(px1, gx1)?;
    let lo_y = tape.maximum(py0, gy0)?;
    let hi_y = tape.minimum(py1, gy1)?;
    let iw = tape.sub(hi_x, lo_x)?;
    let iw = tape.relu(iw)?;
    let ih = tape.sub(hi_y, lo_y)?;
    let ih = tape.relu(ih)?;
    let inter = tape.mul(iw, ih)?;
    let pw = tape.slice_cols(pred, 2, 3)?;
    let ph = tape.slice_cols(pred, 3, 4)?;
    let parea = tape.mul(pw, ph)?;
    let garea = target[2] * target[3];
    let union = tape.add_scalar(parea, garea)?;
    let union = tape.sub(union, inter)?;
    let iou = tape.div(inter, union)?;
    let iou = tape.sum(iou)?;
    let iou_loss = tape.scale(iou, -0.5)?;
    let iou_loss = tape.add_scalar(iou_loss, 0.5)?;
    let l1 = tape.scale(l1, 0.5)?;
    tape.add(l1, iou_loss)
}

/// Squared error of a `[1×1]` prediction.
pub fn reg_loss(tape: &mut Tape, pred: Var, target: f64) -> Result<Var> {
    let t = tape.constant(Tensor::new(vec![1, 1], vec![target])?);
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d)?;
    tape.sum(sq)
}

/// Dispatches to the objective matching `task`; the target variant must
/// agree with the task.
pub fn task_loss(tape: &mut Tape, task: Task, output: Var, target: &Target) -> Result<Var> {
    match (task, target) {
        (Task::Seg, Target::Mask(m)) => seg_loss(tape, output, m),
        (Task::Cls, Target::Class(c)) => cls_loss(tape, output, *c),
        (Task::Det, Target::Box(b)) => det_loss(tape, output, b),
        (Task::Reg, Target::Scalar(v)) => reg_loss(tape, output, *v),
        (task, target) => Err(Error::Contract(format!("{task} cannot be trained on {target:?}"))),
    }
}
