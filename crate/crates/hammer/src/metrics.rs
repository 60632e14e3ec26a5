//! Evaluation metrics: binary detection (AUC / EER / ACC), multi-label
//! classification (mAP / CF1 / OF1), image grounding (IoU mean / 50 / 75),
//! and token grounding (precision / recall / F1). Every routine here has a
//! brute-force oracle in the test suite.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::grounding::iou_boxes;
use crate::types::{BBox, ManipType, MediaPair, Prediction};

pub use crate::model::grounding::giou_boxes as giou;
pub use crate::model::grounding::iou_boxes as iou;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("need both classes present, got {pos} positives / {neg} negatives")]
    SingleClass { pos: usize, neg: usize },
    #[error("prediction/label length mismatch: {preds} vs {labels}")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("empty input")]
    Empty,
}

/// Mann-Whitney AUC: P(score_fake > score_real) + 0.5 P(tie), computed via
/// average ranks so ties are exact.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch { preds: scores.len(), labels: labels.len() });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass { pos: n_pos, neg: n_neg });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // average ranks over tie groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1..=j
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Equal error rate: the point on the ROC where the false-positive and
/// false-negative rates cross, linearly interpolated between thresholds.
pub fn eer(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch { preds: scores.len(), labels: labels.len() });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass { pos: n_pos, neg: n_neg });
    }

    // sweep thresholds from low to high: predict fake iff score >= t.
    // FPR falls from 1 to 0, FNR rises from 0 to 1.
    let mut uniq: Vec<f64> = scores.to_vec();
    uniq.sort_by(|a, b| a.partial_cmp(b).unwrap());
    uniq.dedup();

    let rates = |t: f64| -> (f64, f64) {
        let fp = scores
            .iter()
            .zip(labels)
            .filter(|(s, &y)| y == 0 && **s >= t)
            .count();
        let fnr = scores
            .iter()
            .zip(labels)
            .filter(|(s, &y)| y == 1 && **s < t)
            .count();
        (fp as f64 / n_neg as f64, fnr as f64 / n_pos as f64)
    };

    let mut points = Vec::with_capacity(uniq.len() + 2);
    points.push((1.0, 0.0)); // threshold below every score
    for &t in &uniq {
        points.push(rates(t));
    }
    points.push((0.0, 1.0)); // threshold above every score

    let mut prev = points[0];
    for &cur in &points[1..] {
        let d_prev = prev.1 - prev.0; // fnr - fpr, negative before the crossing
        let d_cur = cur.1 - cur.0;
        if d_cur >= 0.0 {
            if d_cur == 0.0 {
                return Ok(cur.0);
            }
            if d_prev == 0.0 {
                return Ok(prev.0);
            }
            // interpolate between the two operating points
            let s = -d_prev / (d_cur - d_prev);
            return Ok(prev.0 + s * (cur.0 - prev.0));
        }
        prev = cur;
    }
    Ok(0.0)
}

/// Accuracy at the 0.5 probability threshold.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    if scores.is_empty() {
        return Err(MetricError::Empty);
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(s, &y)| (**s >= 0.5) == (y == 1))
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// Average precision with all-point interpolation: mean of the precision at
/// each positive, in descending score order.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let recall = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (precision, recall, f1)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiLabelMetrics {
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
    /// Classes without positives, excluded from mAP and CF1.
    pub skipped_classes: Vec<String>,
}

/// mAP / CF1 / OF1 over an n x 4 probability matrix.
pub fn multilabel_metrics(
    probs: &[[f64; 4]],
    labels: &[[u8; 4]],
    threshold: f64,
) -> Result<MultiLabelMetrics, MetricError> {
    if probs.is_empty() {
        return Err(MetricError::Empty);
    }
    if probs.len() != labels.len() {
        return Err(MetricError::LengthMismatch { preds: probs.len(), labels: labels.len() });
    }
    let mut aps = Vec::new();
    let mut f1s = Vec::new();
    let mut skipped = Vec::new();
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    for c in 0..4 {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let ys: Vec<u8> = labels.iter().map(|y| y[c]).collect();
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for (s, &y) in scores.iter().zip(&ys) {
            let pred = *s >= threshold;
            match (pred, y == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
        match average_precision(&scores, &ys) {
            Some(ap) => {
                aps.push(ap);
                f1s.push(f1_from_counts(tp, fp, fn_).2);
            }
            None => skipped.push(ManipType::ALL[c].tag().to_string()),
        }
    }
    if aps.is_empty() {
        return Err(MetricError::Empty);
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    let cf1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
    let of1 = f1_from_counts(tp_all, fp_all, fn_all).2;
    Ok(MultiLabelMetrics { map, cf1, of1, skipped_classes: skipped })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageGroundingMetrics {
    pub iou_mean: f64,
    pub iou50: f64,
    pub iou75: f64,
    pub samples: usize,
}

/// Mean IoU and threshold accuracies. Degenerate ground truth follows the
/// convention: both boxes degenerate scores 1, exactly one degenerate
/// scores 0. `manipulated_only` restricts to samples with a real gt box.
pub fn image_grounding_metrics(
    preds: &[BBox],
    gts: &[BBox],
    manipulated_only: bool,
) -> Result<ImageGroundingMetrics, MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::LengthMismatch { preds: preds.len(), labels: gts.len() });
    }
    let ious: Vec<f64> = preds
        .iter()
        .zip(gts)
        .filter(|(_, gt)| !manipulated_only || !gt.is_degenerate())
        .map(|(p, gt)| iou_boxes(p, gt))
        .collect();
    if ious.is_empty() {
        return Err(MetricError::Empty);
    }
    let n = ious.len() as f64;
    Ok(ImageGroundingMetrics {
        iou_mean: ious.iter().sum::<f64>() / n,
        iou50: ious.iter().filter(|&&v| v >= 0.5).count() as f64 / n,
        iou75: ious.iter().filter(|&&v| v >= 0.75).count() as f64 / n,
        samples: ious.len(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TextGroundingMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a zero denominator forced a 0 score.
    pub degenerate: bool,
}

/// Micro-averaged token precision / recall / F1 over all real tokens in the
/// split, fake class positive, threshold on the fake probability.
pub fn token_metrics(
    p_tok: &[Vec<f64>],
    y_tok: &[Vec<u8>],
    threshold: f64,
) -> Result<TextGroundingMetrics, MetricError> {
    if p_tok.len() != y_tok.len() {
        return Err(MetricError::LengthMismatch { preds: p_tok.len(), labels: y_tok.len() });
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (ps, ys) in p_tok.iter().zip(y_tok) {
        if ps.len() != ys.len() {
            return Err(MetricError::LengthMismatch { preds: ps.len(), labels: ys.len() });
        }
        for (p, &y) in ps.iter().zip(ys) {
            let pred = *p >= threshold;
            match (pred, y == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    let (precision, recall, f1) = f1_from_counts(tp, fp, fn_);
    let degenerate = tp + fp == 0 || tp + fn_ == 0;
    Ok(TextGroundingMetrics { precision, recall, f1, degenerate })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub auc: f64,
    pub eer: f64,
    pub acc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerTypeMetrics {
    pub ap: f64,
    pub f1: f64,
    pub positives: usize,
}

/// The full evaluation report, mirroring the four metric groups.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub binary: BinaryMetrics,
    pub multilabel: MultiLabelMetrics,
    pub image_grounding: ImageGroundingMetrics,
    pub text_grounding: TextGroundingMetrics,
    pub class_counts: BTreeMap<String, usize>,
    pub per_type: Option<BTreeMap<String, PerTypeMetrics>>,
}

impl MetricReport {
    /// The 12 headline numbers in a fixed order.
    pub fn headline(&self) -> [(&'static str, f64); 12] {
        [
            ("AUC", self.binary.auc),
            ("EER", self.binary.eer),
            ("ACC", self.binary.acc),
            ("mAP", self.multilabel.map),
            ("CF1", self.multilabel.cf1),
            ("OF1", self.multilabel.of1),
            ("IoUmean", self.image_grounding.iou_mean),
            ("IoU50", self.image_grounding.iou50),
            ("IoU75", self.image_grounding.iou75),
            ("Precision", self.text_grounding.precision),
            ("Recall", self.text_grounding.recall),
            ("F1", self.text_grounding.f1),
        ]
    }

    /// Fixed-width table with the four metric groups as column blocks.
    pub fn table(&self) -> String {
        let h = self.headline();
        let mut out = String::new();
        out.push_str(
            "| Binary Cls            | Multi-Label Cls       | Image Grounding          | Text Grounding          |\n",
        );
        out.push_str(
            "| AUC    EER    ACC     | mAP    CF1    OF1     | IoUmean  IoU50   IoU75   | Prec    Recall  F1      |\n",
        );
        out.push_str(&format!(
            "| {:<6.4} {:<6.4} {:<7.4} | {:<6.4} {:<6.4} {:<7.4} | {:<8.4} {:<7.4} {:<7.4} | {:<7.4} {:<7.4} {:<7.4} |\n",
            h[0].1, h[1].1, h[2].1, h[3].1, h[4].1, h[5].1, h[6].1, h[7].1, h[8].1, h[9].1, h[10].1, h[11].1
        ));
        if let Some(per_type) = &self.per_type {
            out.push_str("per-type: ");
            for (k, v) in per_type {
                out.push_str(&format!("{k} AP {:.4} F1 {:.4}  ", v.ap, v.f1));
            }
            out.push('\n');
        }
        out
    }
}

/// Aggregate predictions against ground truth into the full report.
pub fn compute_report(
    preds: &[Prediction],
    pairs: &[&MediaPair],
    iou_manipulated_only: bool,
    with_per_type: bool,
) -> Result<MetricReport, MetricError> {
    if preds.len() != pairs.len() {
        return Err(MetricError::LengthMismatch { preds: preds.len(), labels: pairs.len() });
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }

    let bin_scores: Vec<f64> = preds.iter().map(|p| p.p_bin).collect();
    let bin_labels: Vec<u8> = pairs.iter().map(|p| p.y_bin).collect();
    let binary = BinaryMetrics {
        auc: auc(&bin_scores, &bin_labels)?,
        eer: eer(&bin_scores, &bin_labels)?,
        acc: accuracy(&bin_scores, &bin_labels)?,
    };

    let probs: Vec<[f64; 4]> = preds.iter().map(|p| p.p_mul).collect();
    let labels: Vec<[u8; 4]> = pairs.iter().map(|p| p.y_mul).collect();
    let multilabel = multilabel_metrics(&probs, &labels, 0.5)?;

    let pred_boxes: Vec<BBox> = preds.iter().map(|p| p.pred_box).collect();
    let gt_boxes: Vec<BBox> = pairs.iter().map(|p| p.y_box).collect();
    let image_grounding = image_grounding_metrics(&pred_boxes, &gt_boxes, iou_manipulated_only)?;

    let p_tok: Vec<Vec<f64>> = preds.iter().map(|p| p.p_tok.clone()).collect();
    let y_tok: Vec<Vec<u8>> = pairs.iter().map(|p| p.y_tok.clone()).collect();
    let text_grounding = token_metrics(&p_tok, &y_tok, 0.5)?;

    let mut class_counts = BTreeMap::new();
    for p in pairs {
        *class_counts.entry(p.class_key()).or_insert(0usize) += 1;
    }

    let per_type = if with_per_type {
        let mut map = BTreeMap::new();
        for t in ManipType::ALL {
            let c = t.index();
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let ys: Vec<u8> = labels.iter().map(|y| y[c]).collect();
            let positives = ys.iter().filter(|&&y| y == 1).count();
            if let Some(ap) = average_precision(&scores, &ys) {
                let (mut tp, mut fp, mut fn_) = (0, 0, 0);
                for (s, &y) in scores.iter().zip(&ys) {
                    match (*s >= 0.5, y == 1) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        _ => {}
                    }
                }
                map.insert(
                    t.tag().to_string(),
                    PerTypeMetrics { ap, f1: f1_from_counts(tp, fp, fn_).2, positives },
                );
            }
        }
        Some(map)
    } else {
        None
    };

    Ok(MetricReport { binary, multilabel, image_grounding, text_grounding, class_counts, per_type })
}
