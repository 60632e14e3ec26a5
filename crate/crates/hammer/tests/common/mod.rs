//! Shared helpers for the integration suites: tiny synthetic batches with
//! full annotation coverage, and brute-force metric oracles kept deliberately
//! independent of the library implementations.

#![allow(dead_code)]

use hammer::types::{BBox, Image, MediaPair, Split};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Hand-built pair on a small image, bypassing the world generator so any
/// image size / token layout can be exercised.
pub fn synthetic_pair(
    id: &str,
    image_size: usize,
    n_tokens: usize,
    vocab_size: usize,
    y_bin: u8,
    y_mul: [u8; 4],
    y_box: BBox,
    fake_positions: &[usize],
    rng: &mut ChaCha8Rng,
) -> MediaPair {
    let mut image = Image::new(image_size, image_size);
    for v in &mut image.data {
        *v = rng.gen_range(0.0..1.0);
    }
    let tokens: Vec<usize> = (0..n_tokens).map(|_| rng.gen_range(1..vocab_size)).collect();
    let mut y_tok = vec![0u8; n_tokens];
    for &p in fake_positions {
        y_tok[p] = 1;
    }
    MediaPair { id: id.to_string(), image, tokens, y_bin, y_mul, y_box, y_tok, split: Split::Train }
}

/// A mixed batch covering every annotation case: pristine, image-manipulated,
/// text-manipulated, and a mixed pair.
pub fn mixed_tiny_batch(image_size: usize, vocab_size: usize, seed: u64) -> Vec<MediaPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![
        synthetic_pair("a0", image_size, 3, vocab_size, 0, [0; 4], BBox::ZERO, &[], &mut rng),
        synthetic_pair(
            "a1",
            image_size,
            3,
            vocab_size,
            1,
            [1, 0, 0, 0],
            BBox::new(0.1, 0.2, 0.5, 0.6),
            &[],
            &mut rng,
        ),
        synthetic_pair("a2", image_size, 4, vocab_size, 1, [0, 0, 1, 0], BBox::ZERO, &[1, 2], &mut rng),
        synthetic_pair(
            "a3",
            image_size,
            2,
            vocab_size,
            1,
            [0, 1, 0, 1],
            BBox::new(0.3, 0.3, 0.8, 0.7),
            &[0],
            &mut rng,
        ),
        synthetic_pair("a4", image_size, 3, vocab_size, 0, [0; 4], BBox::ZERO, &[], &mut rng),
    ]
}

// ---------------------------------------------------------------------------
// brute-force oracles
// ---------------------------------------------------------------------------

/// AUC by exhaustive pairwise comparison.
pub fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &y)| y == 0).map(|(s, _)| *s).collect();
    let mut total = 0.0;
    for p in &pos {
        for n in &neg {
            total += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    total / (pos.len() * neg.len()) as f64
}

/// EER by exhaustive threshold sweep with naive recounting, then linear
/// interpolation at the crossing.
pub fn eer_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let n_pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();

    let rates = |t: f64, inclusive: bool| -> (f64, f64) {
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (s, &y) in scores.iter().zip(labels) {
            let pred_fake = if inclusive { *s >= t } else { *s > t };
            if pred_fake && y == 0 {
                fp += 1.0;
            }
            if !pred_fake && y == 1 {
                fn_ += 1.0;
            }
        }
        (fp / n_neg, fn_ / n_pos)
    };

    let mut points = vec![(1.0f64, 0.0f64)];
    for &t in &thresholds {
        points.push(rates(t, true));
    }
    points.push((0.0, 1.0));

    for w in points.windows(2) {
        let (a, b) = (w[0], w[1]);
        let da = a.1 - a.0;
        let db = b.1 - b.0;
        if db >= 0.0 {
            if db == 0.0 {
                return b.0;
            }
            if da == 0.0 {
                return a.0;
            }
            let s = -da / (db - da);
            return a.0 + s * (b.0 - a.0);
        }
    }
    0.0
}

pub fn accuracy_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut ok = 0usize;
    for (s, &y) in scores.iter().zip(labels) {
        let pred = if *s >= 0.5 { 1 } else { 0 };
        if pred == y {
            ok += 1;
        }
    }
    ok as f64 / labels.len() as f64
}

/// Average precision by explicitly walking the precision-recall curve with
/// full recounting at every rank.
pub fn ap_oracle(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 1..=order.len() {
        // recount precision/recall from scratch at cutoff k
        let mut tp = 0usize;
        for &idx in &order[..k] {
            if labels[idx] == 1 {
                tp += 1;
            }
        }
        let precision = tp as f64 / k as f64;
        let recall = tp as f64 / n_pos as f64;
        if labels[order[k - 1]] == 1 {
            ap += (recall - prev_recall) * precision;
        }
        prev_recall = recall;
    }
    Some(ap)
}

/// Per-class and micro F1 by naive recounting.
pub fn f1_oracle(preds: &[bool], labels: &[u8]) -> f64 {
    let tp = preds.iter().zip(labels).filter(|(&p, &y)| p && y == 1).count() as f64;
    let fp = preds.iter().zip(labels).filter(|(&p, &y)| p && y == 0).count() as f64;
    let fn_ = preds.iter().zip(labels).filter(|(&p, &y)| !p && y == 1).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let precision = tp / (tp + fp);
    let recall = tp / (tp + fn_);
    2.0 * precision * recall / (precision + recall)
}

/// Interval-arithmetic IoU written independently of the library path.
pub fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let overlap = |a1: f64, a2: f64, b1: f64, b2: f64| -> f64 {
        let lo = if a1 > b1 { a1 } else { b1 };
        let hi = if a2 < b2 { a2 } else { b2 };
        if hi > lo {
            hi - lo
        } else {
            0.0
        }
    };
    let area = |x: &BBox| (x.x2 - x.x1).max(0.0) * (x.y2 - x.y1).max(0.0);
    let (aa, ab) = (area(a), area(b));
    if aa == 0.0 && ab == 0.0 {
        return 1.0;
    }
    if aa == 0.0 || ab == 0.0 {
        return 0.0;
    }
    let inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
    inter / (aa + ab - inter)
}

pub fn giou_oracle(a: &BBox, b: &BBox) -> f64 {
    let overlap = |a1: f64, a2: f64, b1: f64, b2: f64| -> f64 {
        let lo = if a1 > b1 { a1 } else { b1 };
        let hi = if a2 < b2 { a2 } else { b2 };
        if hi > lo {
            hi - lo
        } else {
            0.0
        }
    };
    let area = |x: &BBox| (x.x2 - x.x1).max(0.0) * (x.y2 - x.y1).max(0.0);
    let (aa, ab) = (area(a), area(b));
    let hull_w = a.x2.max(b.x2) - a.x1.min(b.x1);
    let hull_h = a.y2.max(b.y2) - a.y1.min(b.y1);
    let hull = hull_w.max(0.0) * hull_h.max(0.0);
    if aa == 0.0 && ab == 0.0 {
        if a == b {
            return 1.0;
        }
        return if hull > 0.0 { -1.0 } else { 0.0 };
    }
    let inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
    let union = aa + ab - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let penalty = if hull > 0.0 { (hull - union) / hull } else { 0.0 };
    iou - penalty
}

pub fn random_bbox(rng: &mut ChaCha8Rng) -> BBox {
    let x1 = rng.gen_range(0.0..0.8);
    let y1 = rng.gen_range(0.0..0.8);
    BBox::new(x1, y1, rng.gen_range(x1..1.0), rng.gen_range(y1..1.0))
}
