//! Slow, direct reference implementations used to cross-check the library.
//! Each one follows the textbook definition with no shared code.

#![allow(dead_code)]

use std::collections::HashSet;

use tapslf::adapters::ProjKind;
use tapslf::model::ModelConfig;

pub fn dice(pred: &[u8], gt: &[u8], n_classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 1..n_classes as u8 {
        let p: HashSet<usize> = (0..pred.len()).filter(|&i| pred[i] == c).collect();
        let g: HashSet<usize> = (0..gt.len()).filter(|&i| gt[i] == c).collect();
        let both = p.intersection(&g).count();
        total += if p.is_empty() && g.is_empty() {
            1.0
        } else {
            2.0 * both as f64 / (p.len() + g.len()) as f64
        };
    }
    total / (n_classes - 1) as f64
}

fn inside(region: &[bool], h: usize, w: usize, y: i64, x: i64) -> bool {
    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && region[y as usize * w + x as usize]
}

fn boundary_points(region: &[bool], h: usize, w: usize) -> Vec<(i64, i64)> {
    let mut pts = Vec::new();
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !inside(region, h, w, y, x) {
                continue;
            }
            let nbrs = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)];
            if nbrs.iter().any(|&(ny, nx)| !inside(region, h, w, ny, nx)) {
                pts.push((y, x));
            }
        }
    }
    pts
}

/// Smallest sorted value whose rank `k` (1-based) satisfies `k/n ≥ 0.95`.
fn p95(mut d: Vec<f64>) -> f64 {
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = d.len();
    let k = (1..=n).find(|&k| 100 * k >= 95 * n).unwrap();
    d[k - 1]
}

fn directed(from: &[(i64, i64)], to: &[(i64, i64)]) -> f64 {
    let d = from
        .iter()
        .map(|&(y, x)| {
            to.iter()
                .map(|&(ty, tx)| (((y - ty).pow(2) + (x - tx).pow(2)) as f64).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    p95(d)
}

pub fn hd95(pred: &[u8], gt: &[u8], h: usize, w: usize, n_classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 1..n_classes as u8 {
        let p: Vec<bool> = pred.iter().map(|&v| v == c).collect();
        let g: Vec<bool> = gt.iter().map(|&v| v == c).collect();
        let bp = boundary_points(&p, h, w);
        let bg = boundary_points(&g, h, w);
        total += match (bp.is_empty(), bg.is_empty()) {
            (true, true) => 0.0,
            (true, false) | (false, true) => (((h - 1).pow(2) + (w - 1).pow(2)) as f64).sqrt(),
            _ => directed(&bp, &bg).max(directed(&bg, &bp)),
        };
    }
    total / (n_classes - 1) as f64
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

pub fn macro_f1(pred: &[usize], gt: &[usize], n_classes: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..n_classes {
        let tp = pred.iter().zip(gt).filter(|&(&p, &g)| p == c && g == c).count() as f64;
        let pp = pred.iter().filter(|&&p| p == c).count() as f64;
        let gp = gt.iter().filter(|&&g| g == c).count() as f64;
        let precision = if pp == 0.0 { 0.0 } else { tp / pp };
        let recall = if gp == 0.0 { 0.0 } else { tp / gp };
        total += if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
    }
    total / n_classes as f64
}

/// Pearson correlation of the flattened one-hot indicator matrices.
pub fn mcc(pred: &[usize], gt: &[usize], n_classes: usize) -> f64 {
    let n = pred.len();
    let onehot = |labels: &[usize]| -> Vec<f64> {
        let mut v = vec![0.0; n * n_classes];
        for (i, &l) in labels.iter().enumerate() {
            v[i * n_classes + l] = 1.0;
        }
        v
    };
    let x = onehot(pred);
    let y = onehot(gt);
    // Column-centred covariance summed over classes.
    let cov = |a: &[f64], b: &[f64]| -> f64 {
        let mut s = 0.0;
        for k in 0..n_classes {
            let ma = (0..n).map(|i| a[i * n_classes + k]).sum::<f64>() / n as f64;
            let mb = (0..n).map(|i| b[i * n_classes + k]).sum::<f64>() / n as f64;
            for i in 0..n {
                s += (a[i * n_classes + k] - ma) * (b[i * n_classes + k] - mb);
            }
        }
        s
    };
    let den = (cov(&x, &x) * cov(&y, &y)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        cov(&x, &y) / den
    }
}

/// IoU by coordinate compression: the plane is cut along every box edge and
/// each cell is assigned to the boxes containing its centre.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let rect = |r: &[f64; 4]| (r[0] - r[2] / 2.0, r[1] - r[3] / 2.0, r[0] + r[2] / 2.0, r[1] + r[3] / 2.0);
    let (ra, rb) = (rect(a), rect(b));
    let mut xs = [ra.0, ra.2, rb.0, rb.2];
    let mut ys = [ra.1, ra.3, rb.1, rb.3];
    xs.sort_by(|p, q| p.partial_cmp(q).unwrap());
    ys.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let within = |r: (f64, f64, f64, f64), x: f64, y: f64| r.0 < x && x < r.2 && r.1 < y && y < r.3;
    let (mut inter, mut union) = (0.0, 0.0);
    for i in 0..3 {
        for j in 0..3 {
            let (w, h) = (xs[i + 1] - xs[i], ys[j + 1] - ys[j]);
            if w <= 0.0 || h <= 0.0 {
                continue;
            }
            let (mx, my) = ((xs[i] + xs[i + 1]) / 2.0, (ys[j] + ys[j + 1]) / 2.0);
            let (ia, ib) = (within(ra, mx, my), within(rb, mx, my));
            if ia && ib {
                inter += w * h;
            }
            if ia || ib {
                union += w * h;
            }
        }
    }
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn mre_percent(preds: &[f64], targets: &[f64]) -> f64 {
    let mut s = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        let denom = if t.abs() < 1e-6 { 1e-6 } else { t.abs() };
        s += (p - t).abs() / denom;
    }
    100.0 * s / preds.len() as f64
}

/// Trainable and total parameter counts obtained by listing every tensor the
/// configuration implies and multiplying out its shape.
pub fn enumerate_params(cfg: &ModelConfig) -> (usize, usize) {
    let e = &cfg.encoder;
    let a = &cfg.adapter;
    let h = &cfg.heads;
    let d = e.d_model;
    let pd = e.patch_size * e.patch_size * e.channels;
    let l = (e.image_size / e.patch_size).pow(2);
    let mut frozen: Vec<Vec<usize>> = vec![vec![d, pd], vec![d], vec![l, d], vec![e.max_prompts, d]];
    for _ in 0..e.n_layers {
        frozen.extend([vec![d], vec![d]]);
        for _ in 0..4 {
            frozen.extend([vec![d, d], vec![d]]);
        }
        frozen.extend([vec![d], vec![d]]);
        frozen.extend([vec![e.mlp_hidden, d], vec![e.mlp_hidden], vec![d, e.mlp_hidden], vec![d]]);
    }
    frozen.extend([vec![d], vec![d]]);

    let mut trainable: Vec<Vec<usize>> = Vec::new();
    for _ in &a.prompted_tasks {
        trainable.push(vec![a.n_prompts, d]);
    }
    let n_frozen = (a.frozen_ratio * e.n_layers as f64 + 1e-9).floor() as usize;
    for _layer in n_frozen..e.n_layers {
        for _kind in [ProjKind::Query, ProjKind::Key, ProjKind::Value, ProjKind::Output] {
            trainable.push(vec![a.rank, d]);
            trainable.push(vec![d, a.rank]);
        }
    }
    let mut taps: Vec<usize> = [e.n_layers / 4, e.n_layers / 2, 3 * e.n_layers / 4, e.n_layers - 1].to_vec();
    taps.sort();
    taps.dedup();
    for _ in &taps {
        trainable.extend([vec![h.fpn_width, d], vec![h.fpn_width]]);
    }
    trainable.extend([vec![h.seg_classes, h.fpn_width], vec![h.seg_classes]]);
    trainable.extend([vec![h.cls_classes, d], vec![h.cls_classes]]);
    trainable.extend([vec![1, d], vec![1]]);
    trainable.extend([vec![h.det_hidden, d], vec![h.det_hidden], vec![4, h.det_hidden], vec![4]]);

    let count = |v: &[Vec<usize>]| v.iter().map(|s| s.iter().product::<usize>()).sum::<usize>();
    let t = count(&trainable);
    (t, t + count(&frozen))
}
