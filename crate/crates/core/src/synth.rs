//! Synthetic low-SNR "lesion" bags: smooth background with light/dark bands,
//! two rows of bright pseudo-tooth rectangles, faint large blobs as
//! distractors, and for positive images a few small disks of extra
//! intensity inside the rectangles. Masks mark exactly the disk pixels.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::Mask;
use crate::rng;
use crate::tensor::io::{self, Reader};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"EMD1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub positive_fraction: f64,
    /// Inclusive range of lesion counts on positive images.
    pub lesions: (usize, usize),
    /// Inclusive range of lesion radii in pixels.
    pub radius: (usize, usize),
    pub contrast: f64,
    pub contrast_jitter: f64,
    pub groups: usize,
    /// Standard deviation of the smooth background noise.
    pub smooth_noise: f64,
    /// Standard deviation of the per-pixel noise.
    pub pixel_noise: f64,
    /// Maximum number of faint distractor blobs per image.
    pub distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 96,
            positive_fraction: 0.7,
            lesions: (1, 3),
            radius: (2, 4),
            contrast: 0.25,
            contrast_jitter: 0.05,
            groups: 6,
            smooth_noise: 0.1,
            pixel_noise: 0.05,
            distractors: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    /// Exclusive.
    pub x1: usize,
    /// Exclusive.
    pub y1: usize,
}

impl Rect {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y0..self.y1).contains(&row) && (self.x0..self.x1).contains(&col)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Group {
    pub rect: Rect,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `1×H×W`, values in `[−1, 1]`.
    pub image: Tensor<f32>,
    pub label: u8,
    pub mask: Mask,
    pub groups: Vec<Group>,
}

impl SynthConfig {
    const MARGIN: usize = 2;
    const GAP: usize = 2;

    /// Pseudo-tooth rectangles: two rows, left to right.
    pub fn group_rects(&self) -> Vec<Rect> {
        let top = self.groups.div_ceil(2);
        let bottom = self.groups - top;
        let th = (self.height.saturating_sub(2 * Self::MARGIN + Self::GAP)) / 2;
        let mut rects = Vec::with_capacity(self.groups);
        for (row, count) in [top, bottom].into_iter().enumerate() {
            if count == 0 {
                continue;
            }
            let tw = self.width.saturating_sub(2 * Self::MARGIN + (count - 1) * Self::GAP) / count;
            let y0 = Self::MARGIN + row * (th + Self::GAP);
            for j in 0..count {
                let x0 = Self::MARGIN + j * (tw + Self::GAP);
                rects.push(Rect {
                    x0,
                    y0,
                    x1: x0 + tw,
                    y1: y0 + th,
                });
            }
        }
        rects
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad(format!("positive fraction {} outside [0, 1]", self.positive_fraction));
        }
        if self.lesions.0 == 0 || self.lesions.0 > self.lesions.1 {
            return bad(format!("invalid lesion count range {:?}", self.lesions));
        }
        if self.radius.0 == 0 || self.radius.0 > self.radius.1 {
            return bad(format!("invalid lesion radius range {:?}", self.radius));
        }
        if self.groups == 0 {
            return bad("at least one group is required".into());
        }
        if self.contrast_jitter < 0.0 || self.smooth_noise < 0.0 || self.pixel_noise < 0.0 {
            return bad("noise and jitter must be non-negative".into());
        }
        let need = 2 * self.radius.1 + 3;
        for r in self.group_rects() {
            if r.width() < need || r.height() < need {
                return bad(format!(
                    "lesion radius {} does not fit group rectangle {}x{}",
                    self.radius.1,
                    r.width(),
                    r.height()
                ));
            }
        }
        Ok(())
    }
}

fn box_blur(img: &mut [f64], h: usize, w: usize, r: usize) {
    let mut tmp = vec![0.0; img.len()];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            tmp[y * w + x] = img[y * w + lo..=y * w + hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            img[y * w + x] = (lo..=hi).map(|yy| tmp[yy * w + x]).sum::<f64>() / (hi - lo + 1) as f64;
        }
    }
}

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn render(config: &SynthConfig, positive: bool, rng: &mut rng::Rng) -> Sample {
    let (h, w) = (config.height, config.width);
    let rects = config.group_rects();
    let mut img = vec![-0.5 + rng.random_range(-0.15..0.15); h * w];

    // Light/dark vertical bands, one per group.
    let mut bands = vec![0.0; w];
    let band_w = w.div_ceil(config.groups);
    for (i, chunk) in bands.chunks_mut(band_w).enumerate() {
        let level = rng.random_range(-0.1..0.1) * if i % 2 == 0 { 1.0 } else { -1.0 };
        chunk.fill(level);
    }
    let mut band_img: Vec<f64> = (0..h).flat_map(|_| bands.iter().copied()).collect();
    box_blur(&mut band_img, h, w, band_w / 3);

    let mut teeth = vec![0.0; h * w];
    for r in &rects {
        let level = rng.random_range(0.25..0.45);
        for y in r.y0..r.y1 {
            teeth[y * w + r.x0..y * w + r.x1].fill(level);
        }
    }
    box_blur(&mut teeth, h, w, 1);

    let mut smooth: Vec<f64> = (0..h * w).map(|_| StandardNormal.sample(rng)).collect();
    box_blur(&mut smooth, h, w, 2);
    box_blur(&mut smooth, h, w, 2);
    let s = std_dev(&smooth).max(1e-12);
    for v in &mut smooth {
        *v *= config.smooth_noise / s;
    }

    for i in 0..h * w {
        img[i] += band_img[i] + teeth[i] + smooth[i];
    }

    let blobs = if config.distractors > 0 {
        rng.random_range(0..=config.distractors)
    } else {
        0
    };
    for _ in 0..blobs {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let sigma: f64 = rng.random_range(6.0..10.0);
        let amp = rng.random_range(-0.12..0.12);
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                img[y * w + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }

    let mut mask = Mask::zeros(h, w);
    if positive {
        let count = rng.random_range(config.lesions.0..=config.lesions.1);
        for _ in 0..count {
            let rect = rects[rng.random_range(0..rects.len())];
            let r = rng.random_range(config.radius.0..=config.radius.1);
            let cy = rng.random_range(rect.y0 + r + 1..rect.y1 - r - 1);
            let cx = rng.random_range(rect.x0 + r + 1..rect.x1 - r - 1);
            let delta = config.contrast
                + if config.contrast_jitter > 0.0 {
                    rng.random_range(-config.contrast_jitter..config.contrast_jitter)
                } else {
                    0.0
                };
            let ri = r as isize;
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    if dy * dy + dx * dx > ri * ri {
                        continue;
                    }
                    let (y, x) = ((cy as isize + dy) as usize, (cx as isize + dx) as usize);
                    if mask.get(y, x) == 0 {
                        img[y * w + x] += delta;
                        mask.set(y, x, true);
                    }
                }
            }
        }
    }

    if config.pixel_noise > 0.0 {
        for v in &mut img {
            let n: f64 = StandardNormal.sample(rng);
            *v += config.pixel_noise * n;
        }
    }
    let image = Tensor::new(
        &[1, h, w],
        img.into_iter().map(|v| v.clamp(-1.0, 1.0) as f32).collect(),
    )
    .expect("consistent shape");
    let groups = rects
        .into_iter()
        .map(|rect| {
            let hit = (rect.y0..rect.y1).any(|y| (rect.x0..rect.x1).any(|x| mask.get(y, x) == 1));
            Group {
                rect,
                label: u8::from(hit),
            }
        })
        .collect();
    Sample {
        image,
        label: u8::from(mask.any()),
        mask,
        groups,
    }
}

/// Generates `n` samples. Sample `i` depends only on `(config, seed, i)`.
pub fn generate(config: &SynthConfig, n: usize, seed: u64) -> Result<Vec<Sample>> {
    config.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    Ok((0..n)
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let positive = rng.random_bool(config.positive_fraction);
            render(config, positive, &mut rng)
        })
        .collect())
}

fn encode_sample(out: &mut Vec<u8>, s: &Sample) {
    out.extend_from_slice(&(s.label as u32).to_le_bytes());
    out.extend(io::encode(&s.image));
    out.extend(io::encode_u8(&[s.mask.height, s.mask.width], &s.mask.data));
    out.extend_from_slice(&(s.groups.len() as u32).to_le_bytes());
    for g in &s.groups {
        for v in [g.rect.x0, g.rect.y0, g.rect.x1, g.rect.y1, g.label as usize] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
    }
}

pub fn encode_dataset(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        encode_sample(&mut out, s);
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected EMD1".into(),
        });
    }
    let count = r.u32()? as usize;
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let label = r.u32()?;
        if label > 1 {
            return r.fail(format!("label {label} is not binary"));
        }
        let image: Tensor<f32> = r.tensor()?;
        let (shape, data) = r.tensor_u8()?;
        if shape.len() != 2 {
            return r.fail(format!("mask must be 2-D, got {shape:?}"));
        }
        let mask = Mask::new(shape[0], shape[1], data).map_err(|e| Error::Format {
            offset: r.offset(),
            message: e.to_string(),
        })?;
        let n_groups = r.u32()? as usize;
        let mut groups = Vec::with_capacity(n_groups.min(1 << 12));
        for _ in 0..n_groups {
            let mut v = [0usize; 5];
            for x in &mut v {
                *x = r.u32()? as usize;
            }
            groups.push(Group {
                rect: Rect {
                    x0: v[0],
                    y0: v[1],
                    x1: v[2],
                    y1: v[3],
                },
                label: v[4] as u8,
            });
        }
        samples.push(Sample {
            image,
            label: label as u8,
            mask,
            groups,
        });
    }
    if !r.is_at_end() {
        return r.fail("trailing bytes after last sample");
    }
    Ok(samples)
}

pub fn write_dataset(samples: &[Sample], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(samples))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    decode_dataset(&fs::read(path)?)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffled_by_class(labels: &[u8], seed: u64) -> [Vec<usize>; 2] {
    let mut rng = rng::seeded(seed);
    let mut classes = [Vec::new(), Vec::new()];
    for (i, &l) in labels.iter().enumerate() {
        classes[usize::from(l != 0)].push(i);
    }
    for c in &mut classes {
        c.shuffle(&mut rng);
    }
    classes
}

/// Seeded stratified split into train/val/test. The val and test sizes are
/// `round(fraction · n)`, each class contributing in proportion.
pub fn stratified_split(labels: &[u8], val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Split> {
    if val_fraction < 0.0 || test_fraction < 0.0 || val_fraction + test_fraction >= 1.0 {
        return Err(Error::Config(format!(
            "split fractions val={val_fraction} test={test_fraction} must be non-negative and sum below 1"
        )));
    }
    let n = labels.len();
    let [neg, pos] = shuffled_by_class(labels, seed);
    let pos_share = pos.len() as f64 / n.max(1) as f64;
    let take = |total: usize| {
        let p = ((total as f64 * pos_share).round() as usize).min(total);
        (p, total - p)
    };
    let n_val = (val_fraction * n as f64).round() as usize;
    let n_test = (test_fraction * n as f64).round() as usize;
    let (vp, vn) = take(n_val);
    let (tp, tn) = take(n_test);
    if vp + tp > pos.len() || vn + tn > neg.len() {
        return Err(Error::Config("not enough samples per class for the requested split".into()));
    }
    let mut split = Split {
        val: pos[..vp].iter().chain(&neg[..vn]).copied().collect(),
        test: pos[vp..vp + tp].iter().chain(&neg[vn..vn + tn]).copied().collect(),
        train: pos[vp + tp..].iter().chain(&neg[vn + tn..]).copied().collect(),
    };
    split.train.sort_unstable();
    split.val.sort_unstable();
    split.test.sort_unstable();
    Ok(split)
}

/// Stratified assignment of `indices` to `k` folds (round-robin per class).
pub fn stratified_folds(indices: &[usize], labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    let sub: Vec<u8> = indices.iter().map(|&i| labels[i]).collect();
    let mut folds = vec![Vec::new(); k];
    let mut slot = 0;
    for class in shuffled_by_class(&sub, seed) {
        for j in class {
            folds[slot % k].push(indices[j]);
            slot += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_negative_when_fraction_zero() {
        let cfg = SynthConfig {
            positive_fraction: 0.0,
            ..Default::default()
        };
        let s = generate(&cfg, 20, 1).unwrap();
        assert!(s.iter().all(|s| s.label == 0 && !s.mask.any()));
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = SynthConfig::default();
        assert_eq!(generate(&cfg, 5, 3).unwrap(), generate(&cfg, 5, 3).unwrap());
        assert_ne!(generate(&cfg, 5, 3).unwrap(), generate(&cfg, 5, 4).unwrap());
    }

    #[test]
    fn oversized_radius_rejected() {
        let cfg = SynthConfig {
            radius: (2, 20),
            ..Default::default()
        };
        assert!(matches!(generate(&cfg, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn images_are_normalized() {
        for s in generate(&SynthConfig::default(), 10, 0).unwrap() {
            assert!(s.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn split_is_a_partition() {
        let labels: Vec<u8> = (0..100).map(|i| u8::from(i % 3 != 0)).collect();
        let s = stratified_split(&labels, 0.15, 0.15, 9).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
}
