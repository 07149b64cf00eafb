//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order. Since a
//! node can only reference earlier nodes, the tape is acyclic and replaying
//! it from the back visits each node exactly once.

use super::kernels::{self, ConvGeometry, PatchGrid};
use super::{Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomBackward<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + Send + Sync>;

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    MaxAll {
        x: Var,
        index: usize,
    },
    RowMax {
        x: Var,
        indices: Vec<usize>,
    },
    RowMean(Var),
    RowSoftmax(Var),
    Reshape(Var),
    AvgPoolPatches {
        x: Var,
        grid: PatchGrid,
    },
    Bilinear {
        x: Var,
        from: (usize, usize),
        to: (usize, usize),
    },
    MilAggregate {
        y_tilde: Var,
        w: Var,
        k_min: T,
    },
    Bce {
        pred: Var,
        target: Vec<T>,
        pos_weight: T,
        neg_weight: T,
    },
    Custom {
        x: Var,
        backward: CustomBackward<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Numerical guard for logarithms in the cross-entropy op.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    backward_done: bool,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Gradients are accumulated for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears all gradients so that [`Graph::backward`] may run again.
    pub fn reset_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let src = &self.nodes[x.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let rg = self.any_grad(&[x]);
        self.push(value, rg, op)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.c_out] {
                return shape_err(format!(
                    "conv2d bias must have shape [{}], got {:?}",
                    geom.c_out,
                    self.shape(b)
                ));
            }
        }
        let batch = self.shape(input)[0];
        let data = kernels::conv2d_forward(
            &geom,
            batch,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor {
            shape: vec![batch, geom.c_out, geom.h_out, geom.w_out],
            data,
        };
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        ))
    }

    /// Matrix product of an `m×k` and a `k×n` tensor.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![T::zero(); m * n];
        kernels::matmul(m, k, n, self.value(a).data(), self.value(b).data(), &mut data, false);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            rg,
            Op::MatMul { a, b },
        ))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let sx = self.shape(x);
        let n = *sx.last().unwrap_or(&0);
        if self.value(row).numel() != n {
            return shape_err(format!(
                "add_row: row of {} values cannot broadcast over {sx:?}",
                self.value(row).numel()
            ));
        }
        let r = self.value(row).data();
        let src = self.value(x);
        let data = src
            .data()
            .chunks_exact(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let rg = self.any_grad(&[x, row]);
        Ok(self.push(value, rg, Op::AddRow { x, row }))
    }

    /// `x · weight + bias` for an `m×k` input and `k×n` weight.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn check_same(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: operands have shapes {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "add")?;
        let value = zip_tensors(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(a, b, "mul")?;
        let value = zip_tensors(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let c = T::from_f64(factor);
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, offset: f64) -> Var {
        let c = T::from_f64(offset);
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, kernels::sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / T::from_f64(t.numel() as f64);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), rg, Op::Mean(x))
    }

    /// Global maximum. The gradient goes to the first maximal element.
    pub fn max_all(&mut self, x: Var) -> Var {
        let (index, m) = first_argmax(self.value(x).data());
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(m), rg, Op::MaxAll { x, index })
    }

    /// Maximum over the last axis of an `n×k` tensor, giving `n` values.
    pub fn row_max(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x, "row_max")?;
        let mut indices = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows);
        for row in self.value(x).data().chunks_exact(cols) {
            let (i, m) = first_argmax(row);
            indices.push(i);
            data.push(m);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![rows],
                data,
            },
            rg,
            Op::RowMax { x, indices },
        ))
    }

    /// Mean over the last axis of an `n×k` tensor.
    pub fn row_mean(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rows_cols(x, "row_mean")?;
        let inv = T::from_f64(1.0 / cols as f64);
        let data = self
            .value(x)
            .data()
            .chunks_exact(cols)
            .map(|r| r.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![rows],
                data,
            },
            rg,
            Op::RowMean(x),
        ))
    }

    /// Softmax over the last axis.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.rows_cols(x, "row_softmax")?;
        let src = self.value(x);
        let mut data = Vec::with_capacity(src.numel());
        for row in src.data().chunks_exact(cols) {
            let (_, m) = first_argmax(row);
            let exps: Vec<T> = row.iter().map(|&v| (v - m).exp()).collect();
            let z: T = exps.iter().copied().sum();
            data.extend(exps.into_iter().map(|e| e / z));
        }
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::RowSoftmax(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Average pooling of every patch window: `N×C×H×W → N×K×C`.
    pub fn avg_pool_patches(
        &mut self,
        x: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return shape_err(format!("avg_pool_patches expects N×C×H×W, got {s:?}"));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let grid = PatchGrid::new(h, w, kernel, stride)?;
        let k = grid.len();
        let mut data = vec![T::zero(); n * k * c];
        let src = self.value(x).data();
        for b in 0..n {
            kernels::avg_pool_patches_forward(
                &grid,
                c,
                &src[b * c * h * w..(b + 1) * c * h * w],
                &mut data[b * k * c..(b + 1) * k * c],
            );
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor {
                shape: vec![n, k, c],
                data,
            },
            rg,
            Op::AvgPoolPatches { x, grid },
        ))
    }

    /// Bilinear resize (align-corners false) of the two trailing axes.
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || out_h == 0 || out_w == 0 {
            return shape_err(format!("bilinear_resize: cannot resize {s:?} to {out_h}x{out_w}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = s[..s.len() - 2].iter().product();
        let data = kernels::bilinear_forward(planes, (h, w), (out_h, out_w), self.value(x).data());
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([out_h, out_w]);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor { shape, data },
            rg,
            Op::Bilinear {
                x,
                from: (h, w),
                to: (out_h, out_w),
            },
        ))
    }

    pub fn bilinear_upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return shape_err("bilinear_upsample: factor must be at least 1");
        }
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return shape_err(format!("bilinear_upsample: need at least 2 axes, got {s:?}"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        self.bilinear_resize(x, h * factor, w * factor)
    }

    /// Row-wise `Σ wₖỹₖ / max(Σ wₖ, k_min)` for `n×k` inputs, giving `n` values.
    ///
    /// When the denominator is zero the output is defined as 0. The gradient of
    /// the `max` flows to `Σ wₖ` only when it strictly exceeds `k_min`.
    pub fn mil_aggregate(&mut self, y_tilde: Var, w: Var, k_min: f64) -> Result<Var> {
        self.check_same(y_tilde, w, "mil_aggregate")?;
        if !(k_min >= 0.0) {
            return Err(Error::InvalidArgument(format!("k_min must be >= 0, got {k_min}")));
        }
        let (rows, cols) = self.rows_cols(y_tilde, "mil_aggregate")?;
        let k_min = T::from_f64(k_min);
        let yv = self.value(y_tilde).data();
        let wv = self.value(w).data();
        let data = (0..rows)
            .map(|r| {
                let (y, w) = (&yv[r * cols..(r + 1) * cols], &wv[r * cols..(r + 1) * cols]);
                aggregate_row(y, w, k_min).0
            })
            .collect();
        let rg = self.any_grad(&[y_tilde, w]);
        Ok(self.push(
            Tensor {
                shape: vec![rows],
                data,
            },
            rg,
            Op::MilAggregate { y_tilde, w, k_min },
        ))
    }

    /// Elementwise weighted binary cross-entropy against a fixed target:
    /// `−(w₊·y·log p + w₋·(1−y)·log(1−p))`, with `p` clamped to `[ε, 1−ε]`.
    pub fn bce(
        &mut self,
        pred: Var,
        target: &[f64],
        pos_weight: f64,
        neg_weight: f64,
    ) -> Result<Var> {
        if self.value(pred).numel() != target.len() {
            return shape_err(format!(
                "bce: prediction has {} values, target has {}",
                self.value(pred).numel(),
                target.len()
            ));
        }
        let target: Vec<T> = target.iter().map(|&v| T::from_f64(v)).collect();
        let (pw, nw) = (T::from_f64(pos_weight), T::from_f64(neg_weight));
        let (lo, hi) = clamp_bounds::<T>();
        let src = self.value(pred);
        let data = src
            .data()
            .iter()
            .zip(&target)
            .map(|(&p, &y)| {
                let p = p.max(lo).min(hi);
                -(pw * y * p.ln() + nw * (T::one() - y) * (T::one() - p).ln())
            })
            .collect();
        let value = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            value,
            rg,
            Op::Bce {
                pred,
                target,
                pos_weight: pw,
                neg_weight: nw,
            },
        ))
    }

    /// Elementwise op with a caller-supplied backward rule
    /// `backward(x, y, dy) -> dx`.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(T) -> T,
        backward: impl Fn(&Tensor<T>, &Tensor<T>, &Tensor<T>) -> Tensor<T> + Send + Sync + 'static,
    ) -> Var {
        let src = self.value(x);
        let value = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&v| forward(v)).collect(),
        };
        let rg = self.any_grad(&[x]);
        self.push(
            value,
            rg,
            Op::Custom {
                x,
                backward: Box::new(backward),
            },
        )
    }

    fn rows_cols(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        let s = self.shape(x);
        match s.len() {
            1 => Ok((1, s[0])),
            0 => shape_err(format!("{what}: scalar input")),
            _ => {
                let cols = *s.last().unwrap();
                Ok((s[..s.len() - 1].iter().product(), cols))
            }
        }
    }

    /// Back-propagates from a scalar `loss`, filling gradients of every node
    /// that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return shape_err(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(loss)
            ));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                let shape = self.nodes[i].value.shape().to_vec();
                self.nodes[i].grad = Some(Tensor { shape, data: g });
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let batch = self.shape(*input)[0];
                let mut dx = self.wants(*input).then(|| vec![T::zero(); self.value(*input).numel()]);
                let mut dw = self
                    .wants(*weight)
                    .then(|| vec![T::zero(); self.value(*weight).numel()]);
                let mut db = bias
                    .filter(|b| self.wants(*b))
                    .map(|_| vec![T::zero(); geom.c_out]);
                kernels::conv2d_backward(
                    geom,
                    batch,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    dx.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = dx {
                    accumulate(grads, *input, d);
                }
                if let Some(d) = dw {
                    accumulate(grads, *weight, d);
                }
                if let (Some(b), Some(d)) = (bias, db) {
                    accumulate(grads, *b, d);
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_a_bt(m, n, k, g, self.value(*b).data(), &mut da);
                    accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_at_b(k, m, n, self.value(*a).data(), g, &mut db);
                    accumulate(grads, *b, db);
                }
            }
            Op::AddRow { x, row } => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if self.wants(*row) {
                    let n = self.value(*row).numel();
                    let mut dr = vec![T::zero(); n];
                    for chunk in g.chunks_exact(n) {
                        for (d, &v) in dr.iter_mut().zip(chunk) {
                            *d = *d + v;
                        }
                    }
                    accumulate(grads, *row, dr);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(grads, *v, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    accumulate(grads, *a, g.iter().zip(bv).map(|(&d, &o)| d * o).collect());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, g.iter().zip(av).map(|(&d, &o)| d * o).collect());
                }
            }
            Op::Scale(x, c) => accumulate(grads, *x, g.iter().map(|&d| d * *c).collect()),
            Op::AddScalar(x) | Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Sigmoid(x) => accumulate(
                grads,
                *x,
                g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect(),
            ),
            Op::Tanh(x) => accumulate(
                grads,
                *x,
                g.iter().zip(y).map(|(&d, &t)| d * (T::one() - t * t)).collect(),
            ),
            Op::Relu(x) => accumulate(
                grads,
                *x,
                g.iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                    .collect(),
            ),
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                accumulate(grads, *x, vec![g[0] / T::from_f64(n as f64); n]);
            }
            Op::MaxAll { x, index } => {
                let mut d = vec![T::zero(); self.value(*x).numel()];
                d[*index] = g[0];
                accumulate(grads, *x, d);
            }
            Op::RowMax { x, indices } => {
                let cols = *self.shape(*x).last().unwrap();
                let mut d = vec![T::zero(); self.value(*x).numel()];
                for (r, &ix) in indices.iter().enumerate() {
                    d[r * cols + ix] = g[r];
                }
                accumulate(grads, *x, d);
            }
            Op::RowMean(x) => {
                let cols = *self.shape(*x).last().unwrap();
                let inv = T::from_f64(1.0 / cols as f64);
                let d = g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, cols)).collect();
                accumulate(grads, *x, d);
            }
            Op::RowSoftmax(x) => {
                let cols = *self.shape(*x).last().unwrap();
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(&s, &dg)| s * (dg - dot)));
                }
                accumulate(grads, *x, d);
            }
            Op::AvgPoolPatches { x, grid } => {
                let s = self.shape(*x);
                let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                let k = grid.len();
                let mut d = vec![T::zero(); n * c * h * w];
                for b in 0..n {
                    kernels::avg_pool_patches_backward(
                        grid,
                        c,
                        &g[b * k * c..(b + 1) * k * c],
                        &mut d[b * c * h * w..(b + 1) * c * h * w],
                    );
                }
                accumulate(grads, *x, d);
            }
            Op::Bilinear { x, from, to } => {
                let planes = self.value(*x).numel() / (from.0 * from.1);
                let mut d = vec![T::zero(); self.value(*x).numel()];
                kernels::bilinear_backward(planes, *from, *to, g, &mut d);
                accumulate(grads, *x, d);
            }
            Op::MilAggregate { y_tilde, w, k_min } => {
                let cols = *self.shape(*y_tilde).last().unwrap();
                let (yv, wv) = (self.value(*y_tilde).data(), self.value(*w).data());
                let mut dy = vec![T::zero(); yv.len()];
                let mut dw = vec![T::zero(); wv.len()];
                for (r, &gr) in g.iter().enumerate() {
                    let span = r * cols..(r + 1) * cols;
                    let (yr, wr) = (&yv[span.clone()], &wv[span.clone()]);
                    let (out, sum_w, den) = aggregate_row(yr, wr, *k_min);
                    if den == T::zero() {
                        continue;
                    }
                    let through_sum = sum_w > *k_min;
                    for j in 0..cols {
                        dy[r * cols + j] = gr * wr[j] / den;
                        let mut dwj = yr[j] / den;
                        if through_sum {
                            dwj = dwj - out / den;
                        }
                        dw[r * cols + j] = gr * dwj;
                    }
                }
                if self.wants(*y_tilde) {
                    accumulate(grads, *y_tilde, dy);
                }
                if self.wants(*w) {
                    accumulate(grads, *w, dw);
                }
            }
            Op::Bce {
                pred,
                target,
                pos_weight,
                neg_weight,
            } => {
                let (lo, hi) = clamp_bounds::<T>();
                let d = g
                    .iter()
                    .zip(self.value(*pred).data())
                    .zip(target)
                    .map(|((&dg, &p), &t)| {
                        if p < lo || p > hi {
                            T::zero()
                        } else {
                            dg * (-*pos_weight * t / p
                                + *neg_weight * (T::one() - t) / (T::one() - p))
                        }
                    })
                    .collect();
                accumulate(grads, *pred, d);
            }
            Op::Custom { x, backward } => {
                let dy = Tensor {
                    shape: node.value.shape().to_vec(),
                    data: g.to_vec(),
                };
                let dx = backward(self.value(*x), &node.value, &dy);
                accumulate(grads, *x, dx.into_data());
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn clamp_bounds<T: Real>() -> (T, T) {
    let eps = T::from_f64(LOG_EPS);
    (eps, T::one() - eps)
}

/// Returns `(value, Σw, denominator)` for one bag.
fn aggregate_row<T: Real>(y: &[T], w: &[T], k_min: T) -> (T, T, T) {
    let sum_w: T = w.iter().copied().sum();
    let num: T = y.iter().zip(w).map(|(&a, &b)| a * b).sum();
    let den = sum_w.max(k_min);
    if den == T::zero() {
        (T::zero(), sum_w, den)
    } else {
        (num / den, sum_w, den)
    }
}

fn first_argmax<T: Real>(values: &[T]) -> (usize, T) {
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn zip_tensors<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, d: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(d) {
                *e = *e + x;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn sum_grad_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sigmoid_times_two_at_zero() {
        let mut g = Graph::new();
        let w = g.param(t(&[1], &[0.0]));
        let s = g.sigmoid(w);
        assert_eq!(g.value(s).data()[0], 0.5);
        let l = g.scale(s, 2.0);
        g.backward(l).unwrap();
        assert!((g.grad(w).unwrap().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[1.0]));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
        g.reset_grads();
        g.backward(s).unwrap();
    }

    #[test]
    fn backward_needs_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0]));
        let y = g.sigmoid(x);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn max_ties_route_to_first_index() {
        let mut g = Graph::new();
        let x = g.param(t(&[4], &[1.0, 3.0, 3.0, 2.0]));
        let m = g.max_all(x);
        g.backward(m).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn aggregate_routes_max_to_constant_at_equality() {
        let mut g = Graph::new();
        let y = g.param(t(&[1, 2], &[0.8, 0.2]));
        let w = g.param(t(&[1, 2], &[0.5, 0.5]));
        let a = g.mil_aggregate(y, w, 1.0).unwrap();
        let s = g.sum(a);
        g.backward(s).unwrap();
        // Σw == k_min, so the denominator acts as the constant branch.
        assert_eq!(g.grad(w).unwrap().data(), &[0.8, 0.2]);
    }

    #[test]
    fn linear_with_zero_weight_is_bias() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let w = g.param(Tensor::zeros(&[2, 2]));
        let b = g.param(t(&[2], &[0.3, -1.5]));
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -1.5, 0.3, -1.5, 0.3, -1.5]);
    }

    #[test]
    fn conv_channel_mismatch_names_dimension() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv2d(x, w, None, (1, 1), (0, 0)).unwrap_err().to_string();
        assert!(err.contains("channel"), "{err}");
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let x = g.param(t(&[2], &[3.0, 4.0]));
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0]);
    }
}
