//! Segmentation, classification, detection and regression metrics plus the
//! report table they feed.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::Task;

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dim(op, &[a], &[b]));
    }
    Ok(())
}

/// Macro Dice over foreground classes `1..n_classes`. A class absent from
/// both masks scores 1.
pub fn dsc(pred: &[u8], gt: &[u8], n_classes: usize) -> Result<f64> {
    same_len("dsc", pred.len(), gt.len())?;
    if n_classes < 2 {
        return Err(Error::Metric("dsc needs a foreground class".into()));
    }
    let mut total = 0.0;
    for c in 1..n_classes as u8 {
        let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
        for (&a, &b) in pred.iter().zip(gt) {
            p += (a == c) as usize;
            g += (b == c) as usize;
            both += (a == c && b == c) as usize;
        }
        total += if p + g == 0 {
            1.0
        } else {
            2.0 * both as f64 / (p + g) as f64
        };
    }
    Ok(total / (n_classes - 1) as f64)
}

/// Pixels of `region` with a 4-neighbour outside the region or the image.
pub fn boundary(region: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !region[y * w + x] {
                continue;
            }
            let edge = x == 0
                || y == 0
                || x + 1 == w
                || y + 1 == h
                || !region[y * w + x - 1]
                || !region[y * w + x + 1]
                || !region[(y - 1) * w + x]
                || !region[(y + 1) * w + x];
            out[y * w + x] = edge;
        }
    }
    out
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let first = match f.iter().position(|x| x.is_finite()) {
        Some(i) => i,
        None => {
            out.iter_mut().for_each(|o| *o = f64::INFINITY);
            return;
        }
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true`
/// pixel of `features`.
pub fn squared_distance_transform(features: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = features
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        edt_1d(&col, &mut col_out);
        for y in 0..h {
            grid[y * w + x] = col_out[y];
        }
    }
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        edt_1d(&grid[y * w..(y + 1) * w], &mut row_out);
        grid[y * w..(y + 1) * w].copy_from_slice(&row_out);
    }
    grid
}

/// Value at index `ceil(0.95·n) − 1` of the ascending sort.
pub fn percentile95(mut values: Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let idx = ((95 * values.len()).div_ceil(100)).max(1) - 1;
    values[idx]
}

fn directed_p95(from: &[bool], to_sq_dist: &[f64]) -> f64 {
    let d: Vec<f64> = from
        .iter()
        .zip(to_sq_dist)
        .filter(|(&f, _)| f)
        .map(|(_, &sq)| sq.sqrt())
        .collect();
    percentile95(d)
}

/// HD95 of a single binary region pair.
pub fn hd95_binary(pred: &[bool], gt: &[bool], h: usize, w: usize) -> Result<f64> {
    same_len("hd95", pred.len(), gt.len())?;
    same_len("hd95", pred.len(), h * w)?;
    let (pe, ge) = (pred.iter().any(|&v| v), gt.iter().any(|&v| v));
    match (pe, ge) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => {
            let (a, b) = ((h - 1) as f64, (w - 1) as f64);
            return Ok((a * a + b * b).sqrt());
        }
        _ => {}
    }
    let bp = boundary(pred, h, w);
    let bg = boundary(gt, h, w);
    let dp = squared_distance_transform(&bp, h, w);
    let dg = squared_distance_transform(&bg, h, w);
    Ok(directed_p95(&bp, &dg).max(directed_p95(&bg, &dp)))
}

/// Macro HD95 (pixels) over foreground classes `1..n_classes`.
pub fn hd95(pred: &[u8], gt: &[u8], h: usize, w: usize, n_classes: usize) -> Result<f64> {
    same_len("hd95", pred.len(), gt.len())?;
    if n_classes < 2 {
        return Err(Error::Metric("hd95 needs a foreground class".into()));
    }
    let mut total = 0.0;
    for c in 1..n_classes as u8 {
        let p: Vec<bool> = pred.iter().map(|&v| v == c).collect();
        let g: Vec<bool> = gt.iter().map(|&v| v == c).collect();
        total += hd95_binary(&p, &g, h, w)?;
    }
    Ok(total / (n_classes - 1) as f64)
}

/// Binary ROC AUC via the Mann–Whitney statistic with midranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    same_len("roc_auc", scores.len(), labels.len())?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric("roc_auc needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l).map(|(r, _)| r).sum();
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Binary AUC on class-1 probabilities for two classes, macro one-vs-rest
/// otherwise. `probs[i]` holds the class distribution of sample `i`.
pub fn roc_auc_multiclass(probs: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64> {
    same_len("roc_auc", probs.len(), labels.len())?;
    if n_classes == 2 {
        let scores: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let l: Vec<bool> = labels.iter().map(|&c| c == 1).collect();
        return roc_auc(&scores, &l);
    }
    let mut total = 0.0;
    for c in 0..n_classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let l: Vec<bool> = labels.iter().map(|&x| x == c).collect();
        total += roc_auc(&scores, &l)?;
    }
    Ok(total / n_classes as f64)
}

/// Confusion matrix `m[truth][pred]`.
pub fn confusion(pred: &[usize], gt: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    same_len("confusion", pred.len(), gt.len())?;
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &g) in pred.iter().zip(gt) {
        if p >= n_classes || g >= n_classes {
            return Err(Error::Metric(format!("label out of range for {n_classes} classes")));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

/// Macro F1 and multiclass MCC; zero denominators yield 0.
pub fn f1_mcc(pred: &[usize], gt: &[usize], n_classes: usize) -> Result<(f64, f64)> {
    let m = confusion(pred, gt, n_classes)?;
    let mut f1 = 0.0;
    for (c, row) in m.iter().enumerate() {
        let tp = row[c] as f64;
        let fp = m.iter().map(|r| r[c]).sum::<usize>() as f64 - tp;
        let fn_ = row.iter().sum::<usize>() as f64 - tp;
        let den = 2.0 * tp + fp + fn_;
        f1 += if den == 0.0 { 0.0 } else { 2.0 * tp / den };
    }
    f1 /= n_classes as f64;

    let s = pred.len() as f64;
    let correct: f64 = (0..n_classes).map(|c| m[c][c] as f64).sum();
    let p_k: Vec<f64> = (0..n_classes)
        .map(|k| (0..n_classes).map(|g| m[g][k]).sum::<usize>() as f64)
        .collect();
    let t_k: Vec<f64> = (0..n_classes).map(|k| m[k].iter().sum::<usize>() as f64).collect();
    let num = correct * s - p_k.iter().zip(&t_k).map(|(p, t)| p * t).sum::<f64>();
    let den = ((s * s - p_k.iter().map(|p| p * p).sum::<f64>())
        * (s * s - t_k.iter().map(|t| t * t).sum::<f64>()))
    .sqrt();
    let mcc = if den == 0.0 { 0.0 } else { num / den };
    Ok((f1, mcc))
}

/// IoU of two `(cx, cy, w, h)` boxes; zero union gives 0.
pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let (ax0, ax1) = (a[0] - a[2] / 2.0, a[0] + a[2] / 2.0);
    let (ay0, ay1) = (a[1] - a[3] / 2.0, a[1] + a[3] / 2.0);
    let (bx0, bx1) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
    let (by0, by1) = (b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn box_miou(pred: &[[f64; 4]], gt: &[[f64; 4]]) -> Result<f64> {
    same_len("box_miou", pred.len(), gt.len())?;
    if pred.is_empty() {
        return Err(Error::Metric("box_miou of zero boxes".into()));
    }
    Ok(pred.iter().zip(gt).map(|(p, g)| box_iou(p, g)).sum::<f64>() / pred.len() as f64)
}

/// Mean relative error in percent, `100·mean(|ŷ−y| / max(|y|, 1e-6))`.
pub fn mre(preds: &[f64], targets: &[f64]) -> Result<f64> {
    same_len("mre", preds.len(), targets.len())?;
    if preds.is_empty() {
        return Err(Error::Metric("mre of an empty sequence".into()));
    }
    let total: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).abs() / t.abs().max(1e-6))
        .sum();
    Ok(100.0 * total / preds.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Higher,
    Lower,
}

/// Report columns in their fixed order.
pub const COLUMNS: [(&str, Direction); 7] = [
    ("DSC", Direction::Higher),
    ("HD95", Direction::Lower),
    ("AUC", Direction::Higher),
    ("F1", Direction::Higher),
    ("MCC", Direction::Higher),
    ("mIoU", Direction::Higher),
    ("MRE", Direction::Lower),
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: Option<f64>,
    pub hd95: Option<f64>,
    pub auc: Option<f64>,
    pub f1: Option<f64>,
    pub mcc: Option<f64>,
    pub miou: Option<f64>,
    pub mre: Option<f64>,
    pub counts: BTreeMap<Task, usize>,
}

impl MetricsReport {
    pub fn values(&self) -> [Option<f64>; 7] {
        [self.dsc, self.hd95, self.auc, self.f1, self.mcc, self.miou, self.mre]
    }

    /// Machine-readable `key = value` lines; absent metrics are omitted.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for ((name, dir), v) in COLUMNS.iter().zip(self.values()) {
            if let Some(v) = v {
                let arrow = if *dir == Direction::Higher { "up" } else { "down" };
                let _ = writeln!(s, "{} = {v:.6}  # {arrow}", name.to_lowercase());
            }
        }
        for (task, n) in &self.counts {
            let _ = writeln!(s, "n_{task} = {n}");
        }
        s
    }

    pub fn csv_header() -> String {
        let cols: Vec<String> = COLUMNS.iter().map(|(n, _)| n.to_string()).collect();
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let cells: Vec<String> = self
            .values()
            .iter()
            .map(|v| v.map(|x| format!("{x:.6}")).unwrap_or_default())
            .collect();
        cells.join(",")
    }
}

/// Aligned plain-text table with one row per labelled report. With
/// `all_columns` false, columns empty in every row are dropped.
pub fn render_table(label_header: &str, rows: &[(String, MetricsReport)], all_columns: bool) -> String {
    let keep: Vec<usize> = (0..COLUMNS.len())
        .filter(|&c| all_columns || rows.iter().any(|(_, r)| r.values()[c].is_some()))
        .collect();
    let label_w = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain(std::iter::once(label_header.len()))
        .max()
        .unwrap_or(0);
    let cell_w = 10;
    let mut out = format!("{label_header:<label_w$}");
    for &c in &keep {
        let (name, dir) = COLUMNS[c];
        let head = format!("{name} {}", if dir == Direction::Higher { "↑" } else { "↓" });
        let _ = write!(out, "  {head:>cell_w$}");
    }
    out.push('\n');
    for (label, report) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for &c in &keep {
            let cell = match report.values()[c] {
                Some(v) => format!("{v:.4}"),
                None => "-".to_string(),
            };
            let _ = write!(out, "  {cell:>cell_w$}");
        }
        out.push('\n');
    }
    out
}
