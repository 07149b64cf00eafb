//! Evaluation of a trained model: image metrics, group metrics and
//! localization of the patch-probability map.

use serde::{Deserialize, Serialize};

use super::metrics::{
    classification_metrics, iou_localization, mean_scored, ClassificationReport, IouMode, DEFAULT_CONFIDENCE,
    DEFAULT_THRESHOLD,
};
use crate::error::{arg_err, shape_err, Result};
use crate::head::{build_heatmaps, Prediction};
use crate::model::Emil;
use crate::synth::{Rect, Sample};
use crate::tensor::kernels::PatchGrid;
use crate::tensor::Tensor;

const CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub image: ClassificationReport,
    /// Mean IoU over positive images; absent without positives.
    pub iou_at_0: Option<f64>,
    /// Mean IoU over positive images predicted with `ŷ ≥ confidence`.
    pub iou_at_conf: Option<f64>,
    pub confidence: f64,
    pub n_localized: usize,
    pub n_confident: usize,
    /// Metrics of group probabilities against group labels.
    pub group: Option<ClassificationReport>,
    /// Mean `Σw` per image.
    pub mean_attention_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub label: u8,
    pub y_hat: f64,
    pub attention_mass: f64,
    pub iou_at_0: Option<f64>,
    pub group_probabilities: Vec<f64>,
}

/// Patches whose window centre, mapped to input pixels, lies inside `rect`.
pub fn group_patches(grid: &PatchGrid, input: (usize, usize), rect: &Rect) -> Vec<usize> {
    let sy = input.0 as f64 / grid.height as f64;
    let sx = input.1 as f64 / grid.width as f64;
    (0..grid.len())
        .filter(|&k| {
            let (r0, c0) = grid.origin(k);
            let cy = (r0 as f64 + grid.kernel.0 as f64 / 2.0) * sy;
            let cx = (c0 as f64 + grid.kernel.1 as f64 / 2.0) * sx;
            cy >= rect.y0 as f64 && cy < rect.y1 as f64 && cx >= rect.x0 as f64 && cx < rect.x1 as f64
        })
        .collect()
}

/// Predictions for `indices`, in order.
pub fn predict_all(model: &Emil<f32>, samples: &[Sample], indices: &[usize]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(CHUNK) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &samples[i].image).collect();
        out.extend(model.predict_batch(&images)?);
    }
    Ok(out)
}

/// Scores already computed predictions against their samples.
pub fn evaluate_predictions(
    model: &Emil<f32>,
    samples: &[Sample],
    indices: &[usize],
    predictions: &[Prediction],
) -> Result<(MetricsReport, Vec<SampleRecord>)> {
    if indices.is_empty() {
        return arg_err("evaluation needs at least one sample");
    }
    if predictions.len() != indices.len() {
        return shape_err(format!("{} predictions for {} samples", predictions.len(), indices.len()));
    }
    let head = &model.config.head;
    let mut records = Vec::with_capacity(indices.len());
    let (mut group_scores, mut group_labels) = (Vec::new(), Vec::new());
    let (mut at0, mut atc) = (Vec::new(), Vec::new());
    for (&i, pred) in indices.iter().zip(predictions) {
        let s = &samples[i];
        let input = (s.mask.height, s.mask.width);
        let (feature_dims, grid) = model.config.layout(input)?;
        if (grid.rows, grid.cols) != pred.grid {
            return shape_err(format!(
                "model produced a {:?} patch grid, data implies {}x{}",
                pred.grid, grid.rows, grid.cols
            ));
        }
        let mut probs = Vec::with_capacity(s.groups.len());
        for gr in &s.groups {
            let idx = group_patches(&grid, input, &gr.rect);
            let p = if idx.is_empty() { 0.0 } else { pred.group_probability(&idx)? };
            probs.push(p);
            group_scores.push(p);
            group_labels.push(gr.label);
        }
        let mut iou0 = None;
        if s.mask.any() {
            let (prob_map, _) = build_heatmaps(pred, head.kernel, head.stride, feature_dims, input)?;
            iou0 = iou_localization(&prob_map.render, &s.mask, IouMode::AtZero, pred.y_hat, DEFAULT_CONFIDENCE)?;
            at0.push(iou0);
            atc.push(iou_localization(
                &prob_map.render,
                &s.mask,
                IouMode::AtConfidence,
                pred.y_hat,
                DEFAULT_CONFIDENCE,
            )?);
        }
        records.push(SampleRecord {
            index: i,
            label: s.label,
            y_hat: pred.y_hat,
            attention_mass: pred.attention_mass(),
            iou_at_0: iou0,
            group_probabilities: probs,
        });
    }
    let scores: Vec<f64> = predictions.iter().map(|p| p.y_hat).collect();
    let labels: Vec<u8> = indices.iter().map(|&i| samples[i].label).collect();
    let image = classification_metrics(&scores, &labels, DEFAULT_THRESHOLD)?;
    let group = if group_scores.is_empty() {
        None
    } else {
        Some(classification_metrics(&group_scores, &group_labels, DEFAULT_THRESHOLD)?)
    };
    let report = MetricsReport {
        image,
        iou_at_0: mean_scored(&at0),
        iou_at_conf: mean_scored(&atc),
        confidence: DEFAULT_CONFIDENCE,
        n_localized: at0.len(),
        n_confident: atc.iter().flatten().count(),
        group,
        mean_attention_mass: records.iter().map(|r| r.attention_mass).sum::<f64>() / records.len() as f64,
    };
    Ok((report, records))
}

pub fn evaluate(model: &Emil<f32>, samples: &[Sample], indices: &[usize]) -> Result<(MetricsReport, Vec<SampleRecord>)> {
    let predictions = predict_all(model, samples, indices)?;
    evaluate_predictions(model, samples, indices, &predictions)
}
