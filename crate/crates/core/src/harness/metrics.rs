//! Classification metrics and top-k localization scoring.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::guidance::Mask;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_CONFIDENCE: f64 = 0.95;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub balanced_accuracy: f64,
    pub f_score: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub precision: f64,
    /// Absent when only one class is present.
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub threshold: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Metrics at a fixed threshold; a score equal to the threshold is positive.
pub fn classification_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ClassificationReport> {
    if scores.len() != labels.len() {
        return shape_err(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return arg_err("metrics need at least one sample");
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return arg_err(format!("score {s} outside [0, 1]"));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let sensitivity = ratio(tp, tp + fn_);
    let specificity = ratio(tn, tn + fp);
    let precision = ratio(tp, tp + fp);
    let f_score = if precision + sensitivity > 0.0 {
        2.0 * precision * sensitivity / (precision + sensitivity)
    } else {
        0.0
    };
    let n_pos = tp + fn_;
    let n_neg = tn + fp;
    let both = n_pos > 0 && n_neg > 0;
    Ok(ClassificationReport {
        balanced_accuracy: (sensitivity + specificity) / 2.0,
        f_score,
        sensitivity,
        specificity,
        precision,
        roc_auc: both.then(|| roc_auc(scores, labels)),
        pr_auc: both.then(|| pr_auc(scores, labels)),
        threshold,
        n_pos,
        n_neg,
    })
}

/// Distinct scores in decreasing order, with the positives and negatives
/// sharing each score.
fn score_groups(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut last = None;
    for i in order {
        let (p, n) = if labels[i] != 0 { (1, 0) } else { (0, 1) };
        if last == Some(scores[i]) {
            let g = groups.last_mut().expect("group exists");
            g.0 += p;
            g.1 += n;
        } else {
            groups.push((p, n));
            last = Some(scores[i]);
        }
    }
    groups
}

/// Area under the ROC curve by the trapezoid rule over the exact curve;
/// tied scores form one diagonal segment, which counts a tied pair as half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let groups = score_groups(scores, labels);
    let n_pos: usize = groups.iter().map(|g| g.0).sum();
    let n_neg: usize = groups.iter().map(|g| g.1).sum();
    let (mut tp, mut area) = (0usize, 0.0);
    for (p, n) in groups {
        area += n as f64 * (tp as f64 + p as f64 / 2.0);
        tp += p;
    }
    area / (n_pos as f64 * n_neg as f64)
}

/// Average precision: precision at each distinct threshold weighted by the
/// recall gained there.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let groups = score_groups(scores, labels);
    let n_pos: usize = groups.iter().map(|g| g.0).sum();
    let (mut tp, mut fp, mut area) = (0usize, 0usize, 0.0);
    for (p, n) in groups {
        tp += p;
        fp += n;
        if p > 0 {
            area += (p as f64 / n_pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    area
}

/// Binarizes `render` by keeping its `k` highest pixels; equal values are
/// taken in row-major order.
pub fn top_k_binarize(render: &[f64], k: usize) -> Vec<u8> {
    let mut order: Vec<usize> = (0..render.len()).collect();
    order.sort_by(|&a, &b| render[b].total_cmp(&render[a]).then(a.cmp(&b)));
    let mut out = vec![0u8; render.len()];
    for &i in order.iter().take(k) {
        out[i] = 1;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    /// Every positive image is scored.
    AtZero,
    /// Only images predicted with at least the confidence level.
    AtConfidence,
}

/// IoU between the area-matched binarized heatmap and the ground-truth mask.
/// `None` when the image is skipped in confidence mode.
pub fn iou_localization(render: &[f64], mask: &Mask, mode: IouMode, y_hat: f64, confidence: f64) -> Result<Option<f64>> {
    if render.len() != mask.data.len() {
        return shape_err(format!(
            "heatmap render has {} pixels, mask {}x{}",
            render.len(),
            mask.height,
            mask.width
        ));
    }
    let area = mask.area();
    if area == 0 {
        return arg_err("localization is scored on positive masks only");
    }
    if mode == IouMode::AtConfidence && y_hat < confidence {
        return Ok(None);
    }
    let bin = top_k_binarize(render, area);
    let inter = bin.iter().zip(&mask.data).filter(|(&a, &b)| a == 1 && b == 1).count();
    let union = 2 * area - inter;
    Ok(Some(inter as f64 / union as f64))
}

/// Mean over the scored entries, `None` if nothing was scored.
pub fn mean_scored(values: &[Option<f64>]) -> Option<f64> {
    let scored: Vec<f64> = values.iter().flatten().copied().collect();
    (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case_auc() {
        let r = classification_metrics(&[0.9, 0.8, 0.3, 0.1], &[1, 0, 1, 0], 0.5).unwrap();
        assert_eq!(r.roc_auc, Some(0.75));
        assert_eq!(r.sensitivity, 0.5);
        assert_eq!(r.specificity, 0.5);
    }

    #[test]
    fn ties_predicted_positive() {
        let r = classification_metrics(&[0.5; 4], &[1, 0, 1, 0], 0.5).unwrap();
        assert_eq!((r.sensitivity, r.specificity, r.balanced_accuracy), (1.0, 0.0, 0.5));
        assert_eq!(r.roc_auc, Some(0.5));
    }

    #[test]
    fn perfect_separation() {
        let r = classification_metrics(&[0.9, 0.7, 0.2, 0.1], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!(r.balanced_accuracy, 1.0);
        assert_eq!(r.f_score, 1.0);
        assert_eq!(r.roc_auc, Some(1.0));
        assert_eq!(r.pr_auc, Some(1.0));
    }

    #[test]
    fn single_class_has_no_auc() {
        let r = classification_metrics(&[0.9, 0.2], &[1, 1], 0.5).unwrap();
        assert_eq!(r.roc_auc, None);
        assert_eq!(r.sensitivity, 0.5);
    }

    #[test]
    fn constant_render_takes_row_major_prefix() {
        let mask = Mask::new(2, 3, vec![0, 1, 0, 0, 1, 0]).unwrap();
        let iou = iou_localization(&[0.3; 6], &mask, IouMode::AtZero, 0.0, 0.95).unwrap();
        // prefix {0, 1} against {1, 4}: one shared pixel out of three.
        assert_eq!(iou, Some(1.0 / 3.0));
        assert_eq!(iou_localization(&[0.3; 6], &mask, IouMode::AtConfidence, 0.9, 0.95).unwrap(), None);
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(iou_localization(&[0.0; 4], &Mask::zeros(2, 2), IouMode::AtZero, 1.0, 0.95).is_err());
    }
}
