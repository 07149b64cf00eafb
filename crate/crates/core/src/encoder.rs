//! Convolutional backbone: a small residual stack followed by optional
//! bilinear feature upsampling.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub stage_strides: Vec<usize>,
    pub input_channels: usize,
    pub feature_upsample_factor: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            stage_strides: vec![2, 2, 2],
            input_channels: 1,
            feature_upsample_factor: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::Config(format!(
                "encoder has {} stage channel entries but {} strides",
                self.stage_channels.len(),
                self.stage_strides.len()
            )));
        }
        if self.stage_channels.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.stage_channels.iter().chain(&self.stage_strides).any(|&v| v == 0)
            || self.blocks_per_stage == 0
            || self.input_channels == 0
        {
            return Err(Error::Config("encoder extents must be positive".into()));
        }
        if !matches!(self.feature_upsample_factor, 1 | 4) {
            return Err(Error::Config(format!(
                "feature upsample factor must be 1 or 4, got {}",
                self.feature_upsample_factor
            )));
        }
        Ok(())
    }

    /// Product of all stage strides.
    pub fn downsampling(&self) -> usize {
        self.stage_strides.iter().product()
    }

    pub fn output_channels(&self) -> usize {
        *self.stage_channels.last().expect("validated config")
    }

    /// Feature map extent `(H_U, W_U)` for an input of `(H_X, W_X)`.
    pub fn output_dims(&self, (h, w): (usize, usize)) -> Result<(usize, usize)> {
        let d = self.downsampling();
        if h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by the encoder downsampling {d}; pad the image to a multiple of {d}"
            )));
        }
        let f = self.feature_upsample_factor;
        Ok((h / d * f, w / d * f))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock<T> {
    pub stride: usize,
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
    /// 1×1 projection on the skip path when stride or channels change.
    pub projection: Option<Conv<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub config: EncoderConfig,
    pub blocks: Vec<ResidualBlock<T>>,
}

fn he_conv<T: Real>(
    rng: &mut rng::Rng,
    c_out: usize,
    c_in: usize,
    k: usize,
) -> Conv<T> {
    let fan_in = c_in * k * k;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..c_out * fan_in).map(|_| T::from_f64(normal.sample(rng))).collect();
    Conv {
        weight: Tensor::new(&[c_out, c_in, k, k], data).expect("consistent shape"),
        bias: Tensor::zeros(&[c_out]),
    }
}

/// Fan-in scaled normal initialization, zero biases.
pub fn init_encoder<T: Real>(config: &EncoderConfig, seed: u64) -> Result<EncoderParams<T>> {
    config.validate()?;
    let mut rng = rng::seeded(seed);
    let mut blocks = Vec::new();
    let mut c_in = config.input_channels;
    for (&c_out, &stride) in config.stage_channels.iter().zip(&config.stage_strides) {
        for b in 0..config.blocks_per_stage {
            let stride = if b == 0 { stride } else { 1 };
            let conv1 = he_conv(&mut rng, c_out, c_in, 3);
            let conv2 = he_conv(&mut rng, c_out, c_out, 3);
            let projection = (stride != 1 || c_in != c_out).then(|| he_conv(&mut rng, c_out, c_in, 1));
            blocks.push(ResidualBlock {
                stride,
                conv1,
                conv2,
                projection,
            });
            c_in = c_out;
        }
    }
    Ok(EncoderParams {
        config: config.clone(),
        blocks,
    })
}

/// Graph handles for one [`Conv`].
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    blocks: Vec<(ConvVars, ConvVars, Option<ConvVars>)>,
}

impl EncoderVars {
    /// Parameter handles in [`EncoderParams::named_tensors`] order.
    pub fn params(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for (c1, c2, proj) in &self.blocks {
            out.extend([c1.weight, c1.bias, c2.weight, c2.bias]);
            if let Some(p) = proj {
                out.extend([p.weight, p.bias]);
            }
        }
        out
    }
}

impl<T: Real> EncoderParams<T> {
    /// All tensors in a fixed order, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("encoder.{i}.conv1.weight"), &b.conv1.weight));
            out.push((format!("encoder.{i}.conv1.bias"), &b.conv1.bias));
            out.push((format!("encoder.{i}.conv2.weight"), &b.conv2.weight));
            out.push((format!("encoder.{i}.conv2.bias"), &b.conv2.bias));
            if let Some(p) = &b.projection {
                out.push((format!("encoder.{i}.proj.weight"), &p.weight));
                out.push((format!("encoder.{i}.proj.bias"), &p.bias));
            }
        }
        out
    }

    /// Same order as [`EncoderParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv1.weight);
            out.push(&mut b.conv1.bias);
            out.push(&mut b.conv2.weight);
            out.push(&mut b.conv2.bias);
            if let Some(p) = &mut b.projection {
                out.push(&mut p.weight);
                out.push(&mut p.bias);
            }
        }
        out
    }

    pub fn cast<U: Real>(&self) -> EncoderParams<U> {
        let conv = |c: &Conv<T>| Conv {
            weight: c.weight.cast(),
            bias: c.bias.cast(),
        };
        EncoderParams {
            config: self.config.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    stride: b.stride,
                    conv1: conv(&b.conv1),
                    conv2: conv(&b.conv2),
                    projection: b.projection.as_ref().map(conv),
                })
                .collect(),
        }
    }

    /// Registers every parameter on `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> EncoderVars {
        let mut conv = |c: &Conv<T>| ConvVars {
            weight: g.leaf(c.weight.clone(), trainable),
            bias: g.leaf(c.bias.clone(), trainable),
        };
        EncoderVars {
            blocks: self
                .blocks
                .iter()
                .map(|b| (conv(&b.conv1), conv(&b.conv2), b.projection.as_ref().map(&mut conv)))
                .collect(),
        }
    }

    /// Rebuilds graph handles from `params` in [`EncoderParams::named_tensors`] order;
    /// returns the handles and the number consumed.
    pub fn vars_from(&self, params: &[Var]) -> Result<(EncoderVars, usize)> {
        let mut it = params.iter().copied();
        let mut used = 0;
        let mut next = || {
            used += 1;
            it.next()
        };
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut conv = || -> Option<ConvVars> {
                Some(ConvVars {
                    weight: next()?,
                    bias: next()?,
                })
            };
            let c1 = conv();
            let c2 = conv();
            let proj = if b.projection.is_some() { Some(conv()) } else { None };
            match (c1, c2, proj) {
                (Some(c1), Some(c2), None) => blocks.push((c1, c2, None)),
                (Some(c1), Some(c2), Some(Some(p))) => blocks.push((c1, c2, Some(p))),
                _ => return Err(Error::InvalidArgument("too few parameter handles for the encoder".into())),
            }
        }
        Ok((EncoderVars { blocks }, used))
    }

    /// Encodes an `N×C×H×W` batch into `N×C_U×H_U×W_U` features.
    pub fn forward(&self, g: &mut Graph<T>, vars: &EncoderVars, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.config.input_channels {
            return Err(Error::Shape(format!(
                "encoder expects N×{}×H×W input, got {s:?}",
                self.config.input_channels
            )));
        }
        self.config.output_dims((s[2], s[3]))?;
        let mut h = x;
        for (block, (c1, c2, proj)) in self.blocks.iter().zip(&vars.blocks) {
            let st = (block.stride, block.stride);
            let a = g.conv2d(h, c1.weight, Some(c1.bias), st, (1, 1))?;
            let a = g.relu(a);
            let a = g.conv2d(a, c2.weight, Some(c2.bias), (1, 1), (1, 1))?;
            let skip = match proj {
                Some(p) => g.conv2d(h, p.weight, Some(p.bias), st, (0, 0))?,
                None => h,
            };
            let sum = g.add(a, skip)?;
            h = g.relu(sum);
        }
        if self.config.feature_upsample_factor > 1 {
            h = g.bilinear_upsample(h, self.config.feature_upsample_factor)?;
        }
        Ok(h)
    }

    /// Encodes a single `C×H×W` image without recording gradients.
    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        if image.rank() != 3 {
            return Err(Error::Shape(format!("encode expects C×H×W, got {:?}", image.shape())));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(image.shape());
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(image.clone().reshape(&shape)?);
        let u = self.forward(&mut g, &vars, x)?;
        let out = g.value(u).clone();
        let s = out.shape()[1..].to_vec();
        out.reshape(&s)
    }
}
