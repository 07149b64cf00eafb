//! Tape-free entry points for the core kernels.

use super::kernels::{self, ConvGeometry, PatchGrid};
use super::{Real, Tensor};
use crate::error::{arg_err, shape_err, Result};

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let geom = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.shape() != [geom.c_out] {
            return shape_err(format!(
                "conv2d bias must have shape [{}], got {:?}",
                geom.c_out,
                b.shape()
            ));
        }
    }
    let batch = input.shape()[0];
    let data = kernels::conv2d_forward(&geom, batch, input.data(), weight.data(), bias.map(|b| b.data()));
    Tensor::new(&[batch, geom.c_out, geom.h_out, geom.w_out], data)
}

/// Average-pools each patch window of a `C×H×W` map into a `K×C` matrix.
pub fn avg_pool_patches<T: Real>(
    features: &Tensor<T>,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    if features.rank() != 3 {
        return shape_err(format!(
            "avg_pool_patches expects C×H×W, got {:?}",
            features.shape()
        ));
    }
    let (c, h, w) = (features.shape()[0], features.shape()[1], features.shape()[2]);
    let grid = PatchGrid::new(h, w, kernel, stride)?;
    let mut out = vec![T::zero(); grid.len() * c];
    kernels::avg_pool_patches_forward(&grid, c, features.data(), &mut out);
    Tensor::new(&[grid.len(), c], out)
}

/// Binary max pooling of an `H×W` mask with patch windows.
pub fn max_pool2d(
    mask: &[u8],
    (height, width): (usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Vec<u8>> {
    if mask.len() != height * width {
        return shape_err(format!(
            "mask has {} values, expected {height}x{width}",
            mask.len()
        ));
    }
    if let Some(v) = mask.iter().find(|&&v| v > 1) {
        return arg_err(format!("mask must be binary, found value {v}"));
    }
    let grid = PatchGrid::new(height, width, kernel, stride)?;
    Ok(kernels::max_pool_binary(&grid, mask))
}

/// Bilinear resize of an `H×W` grid (align-corners false).
pub fn bilinear_resize<T: Real>(map: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if map.rank() < 2 || out_h == 0 || out_w == 0 {
        return shape_err(format!(
            "bilinear_resize: cannot resize {:?} to {out_h}x{out_w}",
            map.shape()
        ));
    }
    let s = map.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = map.numel() / (h * w);
    let data = kernels::bilinear_forward(planes, (h, w), (out_h, out_w), map.data());
    let mut shape = s[..s.len() - 2].to_vec();
    shape.extend([out_h, out_w]);
    Tensor::new(&shape, data)
}

pub fn bilinear_upsample<T: Real>(map: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor == 0 {
        return arg_err("upsample factor must be at least 1");
    }
    if map.rank() < 2 {
        return shape_err(format!("bilinear_upsample: need at least 2 axes, got {:?}", map.shape()));
    }
    let s = map.shape();
    bilinear_resize(map, s[s.len() - 2] * factor, s[s.len() - 1] * factor)
}
