//! Experiment layer: configuration, training, evaluation, checkpoints and
//! the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod selftest;
pub mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use eval::{evaluate, MetricsReport, SampleRecord};
pub use metrics::{classification_metrics, iou_localization, ClassificationReport, IouMode};
pub use optim::Adam;
pub use train::{train, EpochLog, TrainOutcome};

use crate::error::{Error, Result};
use crate::synth::{self, Sample, Split};

/// Samples named by the config: read from `data_path`, else generated.
pub fn load_samples(config: &RunConfig) -> Result<Vec<Sample>> {
    match &config.data_path {
        Some(p) => {
            let samples = synth::read_dataset(p)?;
            if samples.is_empty() {
                return Err(Error::Config(format!("dataset {} is empty", p.display())));
            }
            Ok(samples)
        }
        None => synth::generate(&config.synth, config.samples, config.seed),
    }
}

pub fn split_samples(config: &RunConfig, samples: &[Sample]) -> Result<Split> {
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    synth::stratified_split(&labels, config.split.val_fraction, config.split.test_fraction, config.seed)
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub outcome: TrainOutcome,
    pub split: Split,
    pub test: MetricsReport,
    pub records: Vec<SampleRecord>,
}

/// Train on the split's training part, select on validation, score on test.
pub fn run(
    config: &RunConfig,
    samples: &[Sample],
    split: &Split,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<RunResult> {
    if split.test.is_empty() {
        return Err(Error::Config("test split is empty".into()));
    }
    let outcome = train(config, samples, &split.train, &split.val, on_epoch)?;
    let (test, records) = evaluate(&outcome.model, samples, &split.test)?;
    Ok(RunResult {
        outcome,
        split: split.clone(),
        test,
        records,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub folds: Vec<MetricsReport>,
    pub balanced_accuracy: f64,
    pub f_score: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// Averaged over the folds that defined it.
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub iou_at_0: Option<f64>,
    pub iou_at_conf: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// `k`-fold cross-validation: fold `f` is the test set, fold `f + 1` the
/// validation set and the rest is trained on. Metrics are averaged per fold.
pub fn cross_validate(
    config: &RunConfig,
    samples: &[Sample],
    k: usize,
    on_epoch: &mut dyn FnMut(usize, &EpochLog),
) -> Result<CvSummary> {
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let all: Vec<usize> = (0..samples.len()).collect();
    let folds = synth::stratified_folds(&all, &labels, k, config.seed)?;
    let mut reports = Vec::with_capacity(k);
    for f in 0..k {
        let val_f = (f + 1) % k;
        let split = Split {
            train: (0..k)
                .filter(|&j| j != f && j != val_f)
                .flat_map(|j| folds[j].iter().copied())
                .collect(),
            val: folds[val_f].clone(),
            test: folds[f].clone(),
        };
        let r = run(config, samples, &split, &mut |e| on_epoch(f, e))?;
        reports.push(r.test);
    }
    let n = k as f64;
    let avg = |get: fn(&MetricsReport) -> f64| reports.iter().map(get).sum::<f64>() / n;
    Ok(CvSummary {
        balanced_accuracy: avg(|r| r.image.balanced_accuracy),
        f_score: avg(|r| r.image.f_score),
        sensitivity: avg(|r| r.image.sensitivity),
        specificity: avg(|r| r.image.specificity),
        roc_auc: mean_of(reports.iter().map(|r| r.image.roc_auc)),
        pr_auc: mean_of(reports.iter().map(|r| r.image.pr_auc)),
        iou_at_0: mean_of(reports.iter().map(|r| r.iou_at_0)),
        iou_at_conf: mean_of(reports.iter().map(|r| r.iou_at_conf)),
        folds: reports,
    })
}

/// One-feature baseline: the image's mean pixel, thresholded at the cut
/// (and direction) with the best training balanced accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanPixelBaseline {
    pub threshold: f64,
    /// Whether brighter images are called positive.
    pub brighter_is_positive: bool,
}

pub fn mean_pixel(sample: &Sample) -> f64 {
    sample.image.data().iter().map(|&v| v as f64).sum::<f64>() / sample.image.numel() as f64
}

impl MeanPixelBaseline {
    pub fn fit(samples: &[Sample], indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("baseline needs training samples".into()));
        }
        let mut feats: Vec<(f64, u8)> = indices.iter().map(|&i| (mean_pixel(&samples[i]), samples[i].label)).collect();
        feats.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut cuts: Vec<f64> = feats.windows(2).map(|w| (w[0].0 + w[1].0) / 2.0).collect();
        cuts.push(feats[0].0 - 1.0);
        let mut best = (f64::NEG_INFINITY, Self { threshold: 0.0, brighter_is_positive: true });
        for &t in &cuts {
            for dir in [true, false] {
                let b = Self { threshold: t, brighter_is_positive: dir };
                let bal = b.balanced_accuracy(samples, indices)?;
                if bal > best.0 {
                    best = (bal, b);
                }
            }
        }
        Ok(best.1)
    }

    pub fn predict(&self, sample: &Sample) -> u8 {
        u8::from((mean_pixel(sample) >= self.threshold) == self.brighter_is_positive)
    }

    pub fn balanced_accuracy(&self, samples: &[Sample], indices: &[usize]) -> Result<f64> {
        let scores: Vec<f64> = indices.iter().map(|&i| self.predict(&samples[i]) as f64).collect();
        let labels: Vec<u8> = indices.iter().map(|&i| samples[i].label).collect();
        Ok(classification_metrics(&scores, &labels, 0.5)?.balanced_accuracy)
    }
}
