mod common;

use common::oracles;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tapslf::metrics;

const SEEDS: u64 = 500;

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<u8> {
    // Mix sparse and blobby masks so empty classes occur often enough.
    let p_fg = rng.random_range(0.0..0.7);
    (0..h * w)
        .map(|_| if rng.random_bool(p_fg) { rng.random_range(1..3) } else { 0 })
        .collect()
}

#[test]
fn dsc_and_hd95_match_brute_force() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let a = random_mask(&mut rng, h, w);
        let b = random_mask(&mut rng, h, w);
        let d = metrics::dsc(&a, &b, 3).unwrap();
        assert!(close(d, oracles::dice(&a, &b, 3)), "seed {seed}");
        let hd = metrics::hd95(&a, &b, h, w, 3).unwrap();
        assert_eq!(hd, oracles::hd95(&a, &b, h, w, 3), "seed {seed}");
    }
}

#[test]
fn auc_matches_pair_counting() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(2..=10);
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        labels[0] = true;
        labels[n - 1] = false;
        let got = metrics::roc_auc(&scores, &labels).unwrap();
        assert!(close(got, oracles::auc(&scores, &labels)), "seed {seed}");
    }
}

#[test]
fn f1_and_mcc_match_definitions() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=10);
        let c = rng.random_range(2..=4);
        let p: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let g: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let (f1, mcc) = metrics::f1_mcc(&p, &g, c).unwrap();
        assert!(close(f1, oracles::macro_f1(&p, &g, c)), "seed {seed}");
        assert!(close(mcc, oracles::mcc(&p, &g, c)), "seed {seed}: {mcc}");
    }
}

#[test]
fn miou_matches_cell_decomposition() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=10);
        let mut boxes = || -> Vec<[f64; 4]> {
            (0..n)
                .map(|_| {
                    let w = rng.random_range(0.0..0.6);
                    let h = rng.random_range(0.0..0.6);
                    [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), w, h]
                })
                .collect()
        };
        let (p, g) = (boxes(), boxes());
        let expected = p.iter().zip(&g).map(|(a, b)| oracles::iou(a, b)).sum::<f64>() / n as f64;
        assert!(close(metrics::box_miou(&p, &g).unwrap(), expected), "seed {seed}");
    }
}

#[test]
fn mre_matches_per_sample_sum() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..=10);
        let t: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let (got, want) = (metrics::mre(&p, &t).unwrap(), oracles::mre_percent(&p, &t));
        assert!((got - want).abs() <= 1e-9 * want.abs().max(1.0), "seed {seed}");
    }
}

#[test]
fn dice_hand_case() {
    // |P| = 4, |G| = 6, |P ∩ G| = 3 on a 4×4 grid.
    let mut p = vec![0u8; 16];
    let mut g = vec![0u8; 16];
    for i in [0, 1, 2, 3] {
        p[i] = 1;
    }
    for i in [1, 2, 3, 4, 5, 6] {
        g[i] = 1;
    }
    assert!((metrics::dsc(&p, &g, 2).unwrap() - 0.6).abs() < 1e-15);
}

#[test]
fn iou_hand_case() {
    let iou = metrics::box_iou(&[0.5, 0.5, 0.5, 0.5], &[0.625, 0.5, 0.5, 0.5]);
    assert!((iou - 0.6).abs() < 1e-12, "{iou}");
}

#[test]
fn auc_tie_cases() {
    assert_eq!(metrics::roc_auc(&[0.3; 6], &[true, false, true, false, true, false]).unwrap(), 0.5);
    let scores = [0.1, 0.4, 0.4, 0.8, 0.4, 0.9];
    let labels = [false, true, false, true, true, false];
    // Pairs (pos, neg): 0.4 vs {0.1 win, 0.4 tie, 0.9 loss}, 0.8 vs {win, win, loss},
    // 0.4 vs {win, tie, loss} → (1 + 0.5 + 2 + 1 + 0.5) / 9.
    assert!((metrics::roc_auc(&scores, &labels).unwrap() - 5.0 / 9.0).abs() < 1e-12);
}

#[test]
fn three_class_confusion_hand_case() {
    let gt = [0, 0, 0, 1, 1, 1, 2, 2, 2];
    let pred = [0, 0, 1, 1, 1, 2, 2, 2, 0];
    let (f1, mcc) = metrics::f1_mcc(&pred, &gt, 3).unwrap();
    assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    // (c·s − Σ p_k·t_k) / √((s² − Σ p_k²)(s² − Σ t_k²)) = (54 − 27) / 54.
    assert!((mcc - 0.5).abs() < 1e-12);
    let complement = [false, true, true, false];
    let truth = [true, false, false, true];
    let to_idx = |v: &[bool]| v.iter().map(|&b| b as usize).collect::<Vec<_>>();
    assert_eq!(metrics::f1_mcc(&to_idx(&complement), &to_idx(&truth), 2).unwrap().1, -1.0);
}

#[test]
fn hd95_declared_conventions() {
    let empty = vec![0u8; 32 * 32];
    let mut one = empty.clone();
    one[5] = 1;
    assert_eq!(metrics::hd95(&empty, &one, 32, 32, 2).unwrap(), (2.0f64 * 31.0 * 31.0).sqrt());
    assert_eq!(metrics::hd95(&empty, &empty, 32, 32, 2).unwrap(), 0.0);
    let mut a = vec![0u8; 64];
    let mut b = vec![0u8; 64];
    a[2 * 8 + 1] = 1;
    b[2 * 8 + 4] = 1;
    assert_eq!(metrics::hd95(&a, &b, 8, 8, 2).unwrap(), oracles::hd95(&a, &b, 8, 8, 2));
    assert_eq!(metrics::hd95(&a, &b, 8, 8, 2).unwrap(), 3.0);
}

#[test]
fn mre_single_sample() {
    assert!((metrics::mre(&[1.1], &[1.0]).unwrap() - 10.0).abs() < 1e-12);
}
