//! Forward and backward kernels operating on raw row-major buffers.
//!
//! These are shared by the gradient tape and by the plain (no-tape)
//! inference paths, so both always agree bit for bit.

use super::Real;
use crate::error::{shape_err, Result};

/// Sliding-window layout over an `height × width` map.
///
/// Windows are enumerated row-major over their top-left origins, so window
/// `k` has origin `(k / cols * stride_h, k % cols * stride_w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub rows: usize,
    pub cols: usize,
}

impl PatchGrid {
    pub fn new(
        height: usize,
        width: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return shape_err("patch kernel and stride must be positive");
        }
        if kernel.0 > height || kernel.1 > width {
            return shape_err(format!(
                "patch kernel {}x{} larger than feature map {height}x{width}",
                kernel.0, kernel.1
            ));
        }
        Ok(Self {
            height,
            width,
            kernel,
            stride,
            rows: (height - kernel.0) / stride.0 + 1,
            cols: (width - kernel.1) / stride.1 + 1,
        })
    }

    /// Number of patches `K`.
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn origin(&self, k: usize) -> (usize, usize) {
        (k / self.cols * self.stride.0, k % self.cols * self.stride.1)
    }

    pub fn is_overlapping(&self) -> bool {
        self.stride.0 < self.kernel.0 || self.stride.1 < self.kernel.1
    }
}

/// Output extent of a strided convolution along one axis.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > input + 2 * pad {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Self> {
        if input.len() != 4 {
            return shape_err(format!("conv2d input must be N×C×H×W, got {input:?}"));
        }
        if weight.len() != 4 {
            return shape_err(format!(
                "conv2d weight must be C_out×C_in×k_h×k_w, got {weight:?}"
            ));
        }
        if input[1] != weight[1] {
            return shape_err(format!(
                "conv2d channel dimension: input has C_in={} but weight expects {}",
                input[1], weight[1]
            ));
        }
        let h_out = conv_out_extent(input[2], weight[2], stride.0, pad.0).ok_or_else(|| {
            crate::Error::Shape(format!(
                "conv2d height: kernel {} does not fit input height {} with padding {}",
                weight[2], input[2], pad.0
            ))
        })?;
        let w_out = conv_out_extent(input[3], weight[3], stride.1, pad.1).ok_or_else(|| {
            crate::Error::Shape(format!(
                "conv2d width: kernel {} does not fit input width {} with padding {}",
                weight[3], input[3], pad.1
            ))
        })?;
        Ok(Self {
            c_in: input[1],
            h: input[2],
            w: input[3],
            c_out: weight[0],
            kh: weight[2],
            kw: weight[3],
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }
}

fn im2col<T: Real>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let spatial = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut cols[row * spatial..(row + 1) * spatial];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride.0 + i) as isize - g.pad.0 as isize;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride.1 + j) as isize - g.pad.1 as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeometry, cols: &[T], input_grad: &mut [T]) {
    let spatial = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &mut input_grad[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &cols[row * spatial..(row + 1) * spatial];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride.0 + i) as isize - g.pad.0 as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride.1 + j) as isize - g.pad.1 as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `out[n] = weight ⋆ input[n] + bias` via im2col and GEMM.
pub fn conv2d_forward<T: Real>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (ck, spatial) = (g.col_rows(), g.col_cols());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * spatial;
    let mut out = vec![T::zero(); batch * out_stride];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); ck * spatial]
    };
    for n in 0..batch {
        let x = &input[n * in_stride..(n + 1) * in_stride];
        let y = &mut out[n * out_stride..(n + 1) * out_stride];
        if let Some(b) = bias {
            for (co, plane) in y.chunks_exact_mut(spatial).enumerate() {
                plane.fill(b[co]);
            }
        }
        let src: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        unsafe {
            T::gemm(
                g.c_out,
                ck,
                spatial,
                T::one(),
                weight.as_ptr(),
                ck as isize,
                1,
                src.as_ptr(),
                spatial as isize,
                1,
                beta,
                y.as_mut_ptr(),
                spatial as isize,
                1,
            );
        }
    }
    out
}

/// Gradients of a convolution. Any of the three outputs may be skipped.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    g: &ConvGeometry,
    batch: usize,
    input: &[T],
    weight: &[T],
    out_grad: &[T],
    mut input_grad: Option<&mut [T]>,
    mut weight_grad: Option<&mut [T]>,
    mut bias_grad: Option<&mut [T]>,
) {
    let (ck, spatial) = (g.col_rows(), g.col_cols());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * spatial;
    let mut cols = vec![T::zero(); ck * spatial];
    for n in 0..batch {
        let x = &input[n * in_stride..(n + 1) * in_stride];
        let dy = &out_grad[n * out_stride..(n + 1) * out_stride];
        if let Some(db) = bias_grad.as_deref_mut() {
            for (co, plane) in dy.chunks_exact(spatial).enumerate() {
                db[co] = db[co] + plane.iter().copied().sum();
            }
        }
        if let Some(dw) = weight_grad.as_deref_mut() {
            let src: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut cols);
                &cols
            };
            unsafe {
                T::gemm(
                    g.c_out,
                    spatial,
                    ck,
                    T::one(),
                    dy.as_ptr(),
                    spatial as isize,
                    1,
                    src.as_ptr(),
                    1,
                    spatial as isize,
                    T::one(),
                    dw.as_mut_ptr(),
                    ck as isize,
                    1,
                );
            }
        }
        if let Some(dx_all) = input_grad.as_deref_mut() {
            let dx = &mut dx_all[n * in_stride..(n + 1) * in_stride];
            if g.is_pointwise() {
                unsafe {
                    T::gemm(
                        ck,
                        g.c_out,
                        spatial,
                        T::one(),
                        weight.as_ptr(),
                        1,
                        ck as isize,
                        dy.as_ptr(),
                        spatial as isize,
                        1,
                        T::one(),
                        dx.as_mut_ptr(),
                        spatial as isize,
                        1,
                    );
                }
            } else {
                unsafe {
                    T::gemm(
                        ck,
                        g.c_out,
                        spatial,
                        T::one(),
                        weight.as_ptr(),
                        1,
                        ck as isize,
                        dy.as_ptr(),
                        spatial as isize,
                        1,
                        T::zero(),
                        cols.as_mut_ptr(),
                        spatial as isize,
                        1,
                    );
                }
                col2im_add(g, &cols, dx);
            }
        }
    }
}

/// `c (m×n) = a (m×k) · b (k×n)`, optionally accumulating.
pub fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (m×n) += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn matmul_at_b<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            T::one(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c (m×n) += a · bᵀ` where `a` is `m×k` and `b` is `n×k`.
pub fn matmul_a_bt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            T::one(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Average-pools every window of `grid` over a `C×H×W` map into a `K×C` matrix.
pub fn avg_pool_patches_forward<T: Real>(
    grid: &PatchGrid,
    channels: usize,
    input: &[T],
    out: &mut [T],
) {
    let (h, w) = (grid.height, grid.width);
    let inv = T::from_f64(1.0 / (grid.kernel.0 * grid.kernel.1) as f64);
    for k in 0..grid.len() {
        let (r0, c0) = grid.origin(k);
        for c in 0..channels {
            let plane = &input[c * h * w..(c + 1) * h * w];
            let mut acc = T::zero();
            for r in r0..r0 + grid.kernel.0 {
                for v in &plane[r * w + c0..r * w + c0 + grid.kernel.1] {
                    acc = acc + *v;
                }
            }
            out[k * channels + c] = acc * inv;
        }
    }
}

pub fn avg_pool_patches_backward<T: Real>(
    grid: &PatchGrid,
    channels: usize,
    out_grad: &[T],
    input_grad: &mut [T],
) {
    let (h, w) = (grid.height, grid.width);
    let inv = T::from_f64(1.0 / (grid.kernel.0 * grid.kernel.1) as f64);
    for k in 0..grid.len() {
        let (r0, c0) = grid.origin(k);
        for c in 0..channels {
            let g = out_grad[k * channels + c] * inv;
            let plane = &mut input_grad[c * h * w..(c + 1) * h * w];
            for r in r0..r0 + grid.kernel.0 {
                for v in &mut plane[r * w + c0..r * w + c0 + grid.kernel.1] {
                    *v = *v + g;
                }
            }
        }
    }
}

/// Binary max pooling: element `k` is 1 iff window `k` contains a 1.
pub fn max_pool_binary(grid: &PatchGrid, mask: &[u8]) -> Vec<u8> {
    (0..grid.len())
        .map(|k| {
            let (r0, c0) = grid.origin(k);
            let hit = (r0..r0 + grid.kernel.0).any(|r| {
                mask[r * grid.width + c0..r * grid.width + c0 + grid.kernel.1]
                    .iter()
                    .any(|&v| v != 0)
            });
            u8::from(hit)
        })
        .collect()
}

/// Source taps for one output coordinate of an align-corners-false resize.
#[derive(Clone, Copy, Debug)]
pub struct LinearTap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub fn linear_taps(input: usize, output: usize) -> Vec<LinearTap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            LinearTap { lo, hi, frac }
        })
        .collect()
}

/// Bilinear resize of `planes` independent `h×w` grids to `out_h×out_w`.
pub fn bilinear_forward<T: Real>(
    planes: usize,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
    input: &[T],
) -> Vec<T> {
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, y) in ty.iter().enumerate() {
            let fy = T::from_f64(y.frac);
            let gy = T::one() - fy;
            for (ox, x) in tx.iter().enumerate() {
                let fx = T::from_f64(x.frac);
                let gx = T::one() - fx;
                let top = src[y.lo * w + x.lo] * gx + src[y.lo * w + x.hi] * fx;
                let bottom = src[y.hi * w + x.lo] * gx + src[y.hi * w + x.hi] * fx;
                dst[oy * out_w + ox] = top * gy + bottom * fy;
            }
        }
    }
    out
}

pub fn bilinear_backward<T: Real>(
    planes: usize,
    (h, w): (usize, usize),
    (out_h, out_w): (usize, usize),
    out_grad: &[T],
    input_grad: &mut [T],
) {
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    for p in 0..planes {
        let dy_plane = &out_grad[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dx = &mut input_grad[p * h * w..(p + 1) * h * w];
        for (oy, y) in ty.iter().enumerate() {
            let fy = T::from_f64(y.frac);
            let gy = T::one() - fy;
            for (ox, x) in tx.iter().enumerate() {
                let fx = T::from_f64(x.frac);
                let gx = T::one() - fx;
                let g = dy_plane[oy * out_w + ox];
                dx[y.lo * w + x.lo] = dx[y.lo * w + x.lo] + g * gy * gx;
                dx[y.lo * w + x.hi] = dx[y.lo * w + x.hi] + g * gy * fx;
                dx[y.hi * w + x.lo] = dx[y.hi * w + x.lo] + g * fy * gx;
                dx[y.hi * w + x.hi] = dx[y.hi * w + x.hi] + g * fy * fx;
            }
        }
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
