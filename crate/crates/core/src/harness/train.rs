//! Mini-batch training with balanced-accuracy model selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::metrics::{classification_metrics, DEFAULT_THRESHOLD};
use super::optim::Adam;
use crate::error::{shape_err, Error, Result};
use crate::guidance::{batch_loss_graph, corrupt_mask, filter_mask, patch_labels, ClassWeights};
use crate::model::Emil;
use crate::rng;
use crate::synth::Sample;
use crate::tensor::{Graph, Tensor};

const SHUFFLE_SALT: u64 = 0x5eed_0f_5a4d;
const TEACHER_SALT: u64 = 0x7eac_4e12;
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean compound loss over training images.
    pub loss: f64,
    pub l_image: f64,
    /// Mean patch loss over images that carried patch labels.
    pub l_patch: Option<f64>,
    /// Mean scale applied to the patch loss.
    pub alpha_patch: Option<f64>,
    pub guided_images: usize,
    pub val_balanced_accuracy: f64,
    pub val_roc_auc: Option<f64>,
    pub improved: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Emil<f32>,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_balanced_accuracy: f64,
    pub class_weights: ClassWeights,
}

/// Patch targets used by the loss: the (optionally corrupted) mask passed
/// through the label-consistency filter and pooled to the patch grid.
pub fn patch_targets(config: &RunConfig, samples: &[Sample], indices: &[usize]) -> Result<Vec<Option<Vec<u8>>>> {
    if !config.guidance.use_masks {
        return Ok(vec![None; indices.len()]);
    }
    let head = &config.model.head;
    indices
        .iter()
        .map(|&i| {
            let s = &samples[i];
            let dims = (s.mask.height, s.mask.width);
            let (feature_dims, _) = config.model.layout(dims)?;
            let teacher = if config.guidance.corruption.is_identity() {
                s.mask.clone()
            } else {
                let mut r = rng::stream(config.seed ^ TEACHER_SALT, i as u64);
                corrupt_mask(&s.mask, &config.guidance.corruption, &mut r)
            };
            filter_mask(Some(&teacher), s.label, config.guidance.use_negative_masks)
                .map(|m| patch_labels(&m, feature_dims, head.kernel, head.stride))
                .transpose()
        })
        .collect()
}

pub(crate) fn stack_images(samples: &[Sample], indices: &[usize]) -> Result<Tensor<f32>> {
    let first = samples[indices[0]].image.shape().to_vec();
    let mut data = Vec::with_capacity(indices.len() * samples[indices[0]].image.numel());
    for &i in indices {
        let img = &samples[i].image;
        if img.shape() != first.as_slice() {
            return shape_err(format!("mixed image shapes {first:?} and {:?}", img.shape()));
        }
        data.extend_from_slice(img.data());
    }
    let mut shape = vec![indices.len()];
    shape.extend(first);
    Tensor::new(&shape, data)
}

/// Image scores for `indices`, computed in fixed-size chunks.
pub fn predict_scores(model: &Emil<f32>, samples: &[Sample], indices: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let images: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &samples[i].image).collect();
        out.extend(model.predict_batch(&images)?.into_iter().map(|p| p.y_hat));
    }
    Ok(out)
}

fn balanced_accuracy(model: &Emil<f32>, samples: &[Sample], indices: &[usize]) -> Result<(f64, Option<f64>)> {
    let scores = predict_scores(model, samples, indices)?;
    let labels: Vec<u8> = indices.iter().map(|&i| samples[i].label).collect();
    let r = classification_metrics(&scores, &labels, DEFAULT_THRESHOLD)?;
    Ok((r.balanced_accuracy, r.roc_auc))
}

/// Trains from a fresh initialization seeded by `config.seed`.
pub fn train(
    config: &RunConfig,
    samples: &[Sample],
    train_idx: &[usize],
    val_idx: &[usize],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Emil::<f32>::init(config.model.clone(), config.seed)?;
    train_from(config, model, samples, train_idx, val_idx, on_epoch)
}

/// Trains `model` in place of a fresh initialization.
pub fn train_from(
    config: &RunConfig,
    mut model: Emil<f32>,
    samples: &[Sample],
    train_idx: &[usize],
    val_idx: &[usize],
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let t = &config.train;
    let n_pos = train_idx.iter().filter(|&&i| samples[i].label == 1).count();
    let class_weights = if t.class_weighting {
        ClassWeights::inverse_frequency(n_pos, train_idx.len() - n_pos)
    } else {
        ClassWeights::default()
    };
    let targets = patch_targets(config, samples, train_idx)?;
    let mut opt = Adam::new(t.lr, t.beta1, t.beta2, t.eps);
    let mut order: Vec<usize> = (0..train_idx.len()).collect();

    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);
    let mut log = Vec::new();
    let mut since_best = 0;
    for epoch in 0..t.max_epochs {
        order.shuffle(&mut rng::stream(config.seed ^ SHUFFLE_SALT, epoch as u64));
        let (mut loss_sum, mut img_sum, mut patch_sum, mut alpha_sum, mut guided) = (0.0, 0.0, 0.0, 0.0, 0);
        for (batch_no, batch) in order.chunks(t.batch_size).enumerate() {
            let idx: Vec<usize> = batch.iter().map(|&j| train_idx[j]).collect();
            let labels: Vec<u8> = idx.iter().map(|&i| samples[i].label).collect();
            let tgt: Vec<Option<Vec<u8>>> = batch.iter().map(|&j| targets[j].clone()).collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let x = g.constant(stack_images(samples, &idx)?);
            let out = model.forward_graph(&mut g, &vars, x)?;
            let (total, reports) = batch_loss_graph(&mut g, out.head.y_hat, out.head.y_tilde, &labels, &tgt, class_weights)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {batch_no}: {m}")),
                    other => other,
                })?;
            let value = g.value(total).data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("epoch {epoch}, batch {batch_no}: loss {value}")));
            }
            g.backward(total)?;
            let params = vars.params();
            let grads: Vec<Option<&Tensor<f32>>> = params.iter().map(|&p| g.grad(p)).collect();
            if let Some(bad) = grads.iter().flatten().find(|gr| !gr.all_finite()) {
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, batch {batch_no}: non-finite gradient of shape {:?}",
                    bad.shape()
                )));
            }
            opt.step(&mut model.tensors_mut(), &grads)?;
            for r in &reports {
                loss_sum += r.total;
                img_sum += r.l_image;
                if let Some(lp) = r.l_patch {
                    patch_sum += lp;
                    alpha_sum += r.alpha[1];
                    guided += 1;
                }
            }
        }
        let n = train_idx.len() as f64;
        let (val_bal, val_auc) = balanced_accuracy(&model, samples, val_idx)?;
        let improved = val_bal > best.2;
        if improved {
            best = (model.clone(), epoch, val_bal);
            since_best = 0;
        } else {
            since_best += 1;
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / n,
            l_image: img_sum / n,
            l_patch: (guided > 0).then(|| patch_sum / guided as f64),
            alpha_patch: (guided > 0).then(|| alpha_sum / guided as f64),
            guided_images: guided,
            val_balanced_accuracy: val_bal,
            val_roc_auc: val_auc,
            improved,
        };
        on_epoch(&entry);
        log.push(entry);
        if t.patience > 0 && since_best >= t.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        log,
        best_epoch: best.1,
        best_val_balanced_accuracy: best.2,
        class_weights,
    })
}
