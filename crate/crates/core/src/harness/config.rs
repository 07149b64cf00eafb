//! Run configuration and its `key = value` file format.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::Corruption;
use crate::model::ModelConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub use_masks: bool,
    pub use_negative_masks: bool,
    pub corruption: Corruption,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            use_masks: false,
            use_negative_masks: true,
            corruption: Corruption::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a strictly better validation score before stopping;
    /// 0 disables early stopping.
    pub patience: usize,
    pub class_weighting: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            max_epochs: 30,
            patience: 8,
            class_weighting: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// 0 or 1 means a single train/val/test split.
    pub folds: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            val_fraction: 0.15,
            test_fraction: 0.15,
            folds: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Dataset file; when absent the data is generated from `synth`.
    pub data_path: Option<PathBuf>,
    pub samples: usize,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub guidance: GuidanceConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_path: None,
            samples: 2800,
            synth: SynthConfig::default(),
            model: ModelConfig::default(),
            guidance: GuidanceConfig::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            seed: 0,
        }
    }
}

pub const KEYS: &[&str] = &[
    "seed",
    "data.path",
    "data.samples",
    "synth.height",
    "synth.width",
    "synth.positive_fraction",
    "synth.lesions_min",
    "synth.lesions_max",
    "synth.radius_min",
    "synth.radius_max",
    "synth.contrast",
    "synth.contrast_jitter",
    "synth.groups",
    "synth.smooth_noise",
    "synth.pixel_noise",
    "synth.distractors",
    "encoder.stage_channels",
    "encoder.stage_strides",
    "encoder.blocks_per_stage",
    "encoder.input_channels",
    "encoder.feature_upsample",
    "head.kernel",
    "head.stride",
    "head.k_min",
    "head.hidden",
    "head.aggregator",
    "guidance.use_masks",
    "guidance.use_negative_masks",
    "guidance.dilate",
    "guidance.erode",
    "guidance.drop_prob",
    "train.lr",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.batch_size",
    "train.max_epochs",
    "train.patience",
    "train.class_weighting",
    "split.val_fraction",
    "split.test_fraction",
    "split.folds",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("`{key}`: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect()
}

/// `3`, `3x3` or `3,3`.
fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = value.split(['x', ',']).map(str::trim).collect();
    match parts.as_slice() {
        [v] => {
            let v = parse(key, v)?;
            Ok((v, v))
        }
        [a, b] => Ok((parse(key, a)?, parse(key, b)?)),
        _ => Err(Error::Config(format!("`{key}`: expected `N` or `HxW`, got `{value}`"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.path" => self.data_path = Some(PathBuf::from(v)),
            "data.samples" => self.samples = parse(key, v)?,
            "synth.height" => self.synth.height = parse(key, v)?,
            "synth.width" => self.synth.width = parse(key, v)?,
            "synth.positive_fraction" => self.synth.positive_fraction = parse(key, v)?,
            "synth.lesions_min" => self.synth.lesions.0 = parse(key, v)?,
            "synth.lesions_max" => self.synth.lesions.1 = parse(key, v)?,
            "synth.radius_min" => self.synth.radius.0 = parse(key, v)?,
            "synth.radius_max" => self.synth.radius.1 = parse(key, v)?,
            "synth.contrast" => self.synth.contrast = parse(key, v)?,
            "synth.contrast_jitter" => self.synth.contrast_jitter = parse(key, v)?,
            "synth.groups" => self.synth.groups = parse(key, v)?,
            "synth.smooth_noise" => self.synth.smooth_noise = parse(key, v)?,
            "synth.pixel_noise" => self.synth.pixel_noise = parse(key, v)?,
            "synth.distractors" => self.synth.distractors = parse(key, v)?,
            "encoder.stage_channels" => self.model.encoder.stage_channels = parse_list(key, v)?,
            "encoder.stage_strides" => self.model.encoder.stage_strides = parse_list(key, v)?,
            "encoder.blocks_per_stage" => self.model.encoder.blocks_per_stage = parse(key, v)?,
            "encoder.input_channels" => self.model.encoder.input_channels = parse(key, v)?,
            "encoder.feature_upsample" => self.model.encoder.feature_upsample_factor = parse(key, v)?,
            "head.kernel" => self.model.head.kernel = parse_pair(key, v)?,
            "head.stride" => self.model.head.stride = parse_pair(key, v)?,
            "head.k_min" => self.model.head.k_min = parse(key, v)?,
            "head.hidden" => self.model.head.hidden = parse(key, v)?,
            "head.aggregator" => self.model.head.aggregator = v.parse()?,
            "guidance.use_masks" => self.guidance.use_masks = parse_bool(key, v)?,
            "guidance.use_negative_masks" => self.guidance.use_negative_masks = parse_bool(key, v)?,
            "guidance.dilate" => self.guidance.corruption.dilate = parse(key, v)?,
            "guidance.erode" => self.guidance.corruption.erode = parse(key, v)?,
            "guidance.drop_prob" => self.guidance.corruption.drop_prob = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.eps" => self.train.eps = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "train.max_epochs" => self.train.max_epochs = parse(key, v)?,
            "train.patience" => self.train.patience = parse(key, v)?,
            "train.class_weighting" => self.train.class_weighting = parse_bool(key, v)?,
            "split.val_fraction" => self.split.val_fraction = parse(key, v)?,
            "split.test_fraction" => self.split.test_fraction = parse(key, v)?,
            "split.folds" => self.split.folds = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a config file body on top of the defaults.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)));
            };
            self.set(key.trim(), value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip_config_prefix(&e))))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    /// Serializes every key in the file format; `parse_str` reads it back.
    pub fn to_config_string(&self) -> String {
        let pair = |p: (usize, usize)| format!("{}x{}", p.0, p.1);
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let s = &self.synth;
        let e = &self.model.encoder;
        let h = &self.model.head;
        let g = &self.guidance;
        let t = &self.train;
        let mut lines = vec![format!("seed = {}", self.seed)];
        if let Some(p) = &self.data_path {
            lines.push(format!("data.path = {}", p.display()));
        }
        lines.extend([
            format!("data.samples = {}", self.samples),
            format!("synth.height = {}", s.height),
            format!("synth.width = {}", s.width),
            format!("synth.positive_fraction = {}", s.positive_fraction),
            format!("synth.lesions_min = {}", s.lesions.0),
            format!("synth.lesions_max = {}", s.lesions.1),
            format!("synth.radius_min = {}", s.radius.0),
            format!("synth.radius_max = {}", s.radius.1),
            format!("synth.contrast = {}", s.contrast),
            format!("synth.contrast_jitter = {}", s.contrast_jitter),
            format!("synth.groups = {}", s.groups),
            format!("synth.smooth_noise = {}", s.smooth_noise),
            format!("synth.pixel_noise = {}", s.pixel_noise),
            format!("synth.distractors = {}", s.distractors),
            format!("encoder.stage_channels = {}", list(&e.stage_channels)),
            format!("encoder.stage_strides = {}", list(&e.stage_strides)),
            format!("encoder.blocks_per_stage = {}", e.blocks_per_stage),
            format!("encoder.input_channels = {}", e.input_channels),
            format!("encoder.feature_upsample = {}", e.feature_upsample_factor),
            format!("head.kernel = {}", pair(h.kernel)),
            format!("head.stride = {}", pair(h.stride)),
            format!("head.k_min = {}", h.k_min),
            format!("head.hidden = {}", h.hidden),
            format!(
                "head.aggregator = {}",
                serde_json::to_value(h.aggregator).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
            ),
            format!("guidance.use_masks = {}", g.use_masks),
            format!("guidance.use_negative_masks = {}", g.use_negative_masks),
            format!("guidance.dilate = {}", g.corruption.dilate),
            format!("guidance.erode = {}", g.corruption.erode),
            format!("guidance.drop_prob = {}", g.corruption.drop_prob),
            format!("train.lr = {}", t.lr),
            format!("train.beta1 = {}", t.beta1),
            format!("train.beta2 = {}", t.beta2),
            format!("train.eps = {}", t.eps),
            format!("train.batch_size = {}", t.batch_size),
            format!("train.max_epochs = {}", t.max_epochs),
            format!("train.patience = {}", t.patience),
            format!("train.class_weighting = {}", t.class_weighting),
            format!("split.val_fraction = {}", self.split.val_fraction),
            format!("split.test_fraction = {}", self.split.test_fraction),
            format!("split.folds = {}", self.split.folds),
        ]);
        lines.join("\n") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.synth.validate()?;
        self.guidance.corruption.validate()?;
        let t = &self.train;
        if !(t.lr >= 0.0) || !t.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be finite and >= 0, got {}", t.lr)));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(t.eps > 0.0) {
            return Err(Error::Config("Adam eps must be positive".into()));
        }
        if t.batch_size == 0 || t.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch count must be positive".into()));
        }
        if self.samples == 0 && self.data_path.is_none() {
            return Err(Error::Config("data.samples must be positive".into()));
        }
        if let Some(p) = &self.data_path {
            if !p.exists() {
                return Err(Error::Config(format!("dataset {} does not exist", p.display())));
            }
        }
        let sp = &self.split;
        if sp.val_fraction <= 0.0 || sp.test_fraction < 0.0 || sp.val_fraction + sp.test_fraction >= 1.0 {
            return Err(Error::Config(format!(
                "split fractions val={} test={} must be positive and sum below 1",
                sp.val_fraction, sp.test_fraction
            )));
        }
        if sp.folds == 1 {
            return Err(Error::Config("split.folds must be 0 (single split) or at least 2".into()));
        }
        let input = (self.synth.height, self.synth.width);
        self.model.layout(input)?;
        Ok(())
    }
}

fn strip_config_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}
