//! Loss stack and mask handling for optionally mask-guided training.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::head::Prediction;
use crate::tensor::kernels::PatchGrid;
use crate::tensor::{max_pool2d, Graph, Real, Tensor, Var, LOG_EPS};

/// Upper bound on a loss scale when a partial loss is (nearly) zero.
pub const ALPHA_CAP: f64 = 1e4;

/// Binary pixel mask, row-major, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return shape_err(format!(
                "mask has {} values, expected {height}x{width}",
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return arg_err(format!("mask must be binary, found {v}"));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.data[row * self.width + col] = u8::from(v);
    }

    pub fn area(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&v| v != 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSource {
    GroundTruth,
    TeacherSim,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskLabel {
    pub mask: Option<Mask>,
    pub source: MaskSource,
    pub image_label: u8,
}

/// Max-over-block downscaling: a block is positive if any of its pixels is.
pub fn downscale_max(mask: &Mask, (height, width): (usize, usize)) -> Result<Mask> {
    if height == 0 || width == 0 || !mask.height.is_multiple_of(height) || !mask.width.is_multiple_of(width) {
        return shape_err(format!(
            "mask {}x{} cannot be block-downscaled to feature map {height}x{width}",
            mask.height, mask.width
        ));
    }
    let (bh, bw) = (mask.height / height, mask.width / width);
    let mut out = Mask::zeros(height, width);
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) != 0 {
                out.set(r / bh, c / bw, true);
            }
        }
    }
    Ok(out)
}

/// Patch labels: the mask is block-downscaled to the feature map, max-pooled
/// with the patch kernel and stride, and read out in patch order.
pub fn patch_labels(
    mask: &Mask,
    feature_dims: (usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Vec<u8>> {
    let small = downscale_max(mask, feature_dims)?;
    max_pool2d(&small.data, feature_dims, kernel, stride)
}

/// Applies the label-consistency rules to an incoming mask.
///
/// * positive image, empty mask: contradiction, discarded;
/// * negative image: replaced by an all-zero mask, or dropped when negative
///   masks are disabled;
/// * positive image with lesions: kept.
pub fn filter_mask(mask: Option<&Mask>, image_label: u8, use_negative_masks: bool) -> Option<Mask> {
    let mask = mask?;
    if image_label == 0 {
        return use_negative_masks.then(|| Mask::zeros(mask.height, mask.width));
    }
    mask.any().then(|| mask.clone())
}

/// Simulated teacher errors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Corruption {
    /// Dilation radius in pixels (square structuring element).
    pub dilate: usize,
    /// Erosion radius in pixels.
    pub erode: usize,
    /// Probability that the teacher misses the image entirely (empty mask).
    pub drop_prob: f64,
}

impl Corruption {
    pub fn is_identity(&self) -> bool {
        self.dilate == 0 && self.erode == 0 && self.drop_prob == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!(
                "drop probability must be in [0, 1], got {}",
                self.drop_prob
            )));
        }
        Ok(())
    }
}

fn morph(mask: &Mask, radius: usize, dilate: bool) -> Mask {
    let r = radius as isize;
    let mut out = Mask::zeros(mask.height, mask.width);
    for y in 0..mask.height as isize {
        for x in 0..mask.width as isize {
            let mut hit = !dilate;
            'win: for dy in -r..=r {
                for dx in -r..=r {
                    let (yy, xx) = (y + dy, x + dx);
                    let v = if yy < 0 || xx < 0 || yy >= mask.height as isize || xx >= mask.width as isize {
                        0
                    } else {
                        mask.get(yy as usize, xx as usize)
                    };
                    if dilate && v == 1 {
                        hit = true;
                        break 'win;
                    }
                    if !dilate && v == 0 {
                        hit = false;
                        break 'win;
                    }
                }
            }
            out.set(y as usize, x as usize, hit);
        }
    }
    out
}

pub fn corrupt_mask(mask: &Mask, corruption: &Corruption, rng: &mut impl Rng) -> Mask {
    if corruption.drop_prob > 0.0 && rng.random_bool(corruption.drop_prob) {
        return Mask::zeros(mask.height, mask.width);
    }
    let mut m = mask.clone();
    if corruption.dilate > 0 {
        m = morph(&m, corruption.dilate, true);
    }
    if corruption.erode > 0 {
        m = morph(&m, corruption.erode, false);
    }
    m
}

/// Per-class weights of the image loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub pos: f64,
    pub neg: f64,
}

impl Default for ClassWeights {
    fn default() -> Self {
        Self { pos: 1.0, neg: 1.0 }
    }
}

impl ClassWeights {
    /// Inverse class frequency, normalized so that the mean sample weight is 1.
    pub fn inverse_frequency(n_pos: usize, n_neg: usize) -> Self {
        let n = (n_pos + n_neg) as f64;
        if n_pos == 0 || n_neg == 0 {
            return Self::default();
        }
        Self {
            pos: n / (2.0 * n_pos as f64),
            neg: n / (2.0 * n_neg as f64),
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

/// Weighted binary cross-entropy of the image prediction.
pub fn image_loss(y_hat: f64, y: u8, weights: ClassWeights) -> f64 {
    let p = clamp_prob(y_hat);
    if y == 1 {
        -weights.pos * p.ln()
    } else {
        -weights.neg * (1.0 - p).ln()
    }
}

/// Mean binary cross-entropy over patches.
pub fn patch_loss(y_tilde: &[f64], y: &[u8]) -> Result<f64> {
    if y_tilde.len() != y.len() || y.is_empty() {
        return shape_err(format!(
            "patch loss: {} predictions for {} labels",
            y_tilde.len(),
            y.len()
        ));
    }
    let total: f64 = y_tilde
        .iter()
        .zip(y)
        .map(|(&p, &t)| {
            let p = clamp_prob(p);
            if t == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / y.len() as f64)
}

/// Scale of each partial loss relative to the largest one, as plain numbers.
pub fn loss_scales(losses: &[f64]) -> Vec<f64> {
    let max = losses.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return vec![1.0; losses.len()];
    }
    losses
        .iter()
        .map(|&l| if l > 0.0 { (max / l).min(ALPHA_CAP) } else { ALPHA_CAP })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_image: f64,
    pub l_patch: Option<f64>,
    pub alpha: Vec<f64>,
    pub total: f64,
    pub class_weights: ClassWeights,
}

/// Combines named partial losses with detached, max-matching scales.
pub fn compound_loss(losses: &[(&str, f64)]) -> Result<(Vec<f64>, f64)> {
    if losses.is_empty() {
        return arg_err("compound loss needs at least one partial loss");
    }
    if let Some((name, v)) = losses.iter().find(|(_, v)| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::NonFinite(format!("partial loss {name} = {v}")));
    }
    let values: Vec<f64> = losses.iter().map(|(_, v)| *v).collect();
    let alpha = loss_scales(&values);
    let total = alpha.iter().zip(&values).map(|(a, l)| a * l).sum();
    Ok((alpha, total))
}

/// Loss report for one image; the patch term is active only with patch labels.
pub fn training_loss(
    prediction: &Prediction,
    label: u8,
    patch_targets: Option<&[u8]>,
    weights: ClassWeights,
) -> Result<LossReport> {
    let l_image = image_loss(prediction.y_hat, label, weights);
    let l_patch = patch_targets
        .map(|t| patch_loss(&prediction.y_tilde, t))
        .transpose()?;
    let mut parts = vec![("image", l_image)];
    parts.extend(l_patch.map(|l| ("patch", l)));
    let (alpha, total) = compound_loss(&parts)?;
    Ok(LossReport {
        l_image,
        l_patch,
        alpha,
        total,
        class_weights: weights,
    })
}

/// Graph form of the batch loss: the mean over images of each image's
/// compound loss, with scales frozen as constants.
pub fn batch_loss_graph<T: Real>(
    g: &mut Graph<T>,
    y_hat: Var,
    y_tilde: Var,
    labels: &[u8],
    patch_targets: &[Option<Vec<u8>>],
    weights: ClassWeights,
) -> Result<(Var, Vec<LossReport>)> {
    let n = labels.len();
    if g.value(y_hat).numel() != n || patch_targets.len() != n {
        return shape_err(format!(
            "batch loss: {} predictions, {} labels, {} target rows",
            g.value(y_hat).numel(),
            n,
            patch_targets.len()
        ));
    }
    let k = g.value(y_tilde).numel() / n;
    let targets: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let l_img = g.bce(y_hat, &targets, weights.pos, weights.neg)?;
    let img_values = g.value(l_img).to_f64_vec();

    let any_patch = patch_targets.iter().any(Option::is_some);
    let mut reports = Vec::with_capacity(n);
    let mut img_scale = vec![0.0; n];
    let mut patch_scale = vec![0.0; n];
    let patch_values = if any_patch {
        let mut flat = Vec::with_capacity(n * k);
        for t in patch_targets {
            match t {
                Some(t) if t.len() == k => flat.extend(t.iter().map(|&v| v as f64)),
                Some(t) => {
                    return shape_err(format!("patch targets of length {} for {k} patches", t.len()))
                }
                None => flat.extend(std::iter::repeat_n(0.0, k)),
            }
        }
        let l = g.bce(y_tilde, &flat, 1.0, 1.0)?;
        let l = g.row_mean(l)?;
        Some((l, g.value(l).to_f64_vec()))
    } else {
        None
    };
    for i in 0..n {
        let lp = match (&patch_values, &patch_targets[i]) {
            (Some((_, v)), Some(_)) => Some(v[i]),
            _ => None,
        };
        let mut parts = vec![("image", img_values[i])];
        parts.extend(lp.map(|l| ("patch", l)));
        let (alpha, total) = compound_loss(&parts)?;
        img_scale[i] = alpha[0] / n as f64;
        if lp.is_some() {
            patch_scale[i] = alpha[1] / n as f64;
        }
        reports.push(LossReport {
            l_image: img_values[i],
            l_patch: lp,
            alpha,
            total,
            class_weights: weights,
        });
    }
    let s = g.constant(Tensor::from_f64(&[n], &img_scale)?);
    let weighted = g.mul(l_img, s)?;
    let mut total = g.sum(weighted);
    if let Some((l, _)) = patch_values {
        let s = g.constant(Tensor::from_f64(&[n], &patch_scale)?);
        let weighted = g.mul(l, s)?;
        let p = g.sum(weighted);
        total = g.add(total, p)?;
    }
    Ok((total, reports))
}

/// Patch grid used for label extraction, checked against the model layout.
pub fn label_grid(feature_dims: (usize, usize), kernel: (usize, usize), stride: (usize, usize)) -> Result<PatchGrid> {
    PatchGrid::new(feature_dims.0, feature_dims.1, kernel, stride)
}
