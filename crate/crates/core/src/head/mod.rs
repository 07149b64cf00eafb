//! The EMIL head: per-patch classification, sigmoid-gated attention and the
//! `k_min`-clamped aggregation, plus the quantities derived from them
//! (group probabilities, removal deltas, heatmaps) and two baseline
//! aggregators.

mod heatmap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use heatmap::{build_heatmaps, Heatmap, HeatmapKind};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::rng;
use crate::tensor::kernels::sigmoid;
use crate::tensor::{Graph, Real, Tensor, Var};

/// How patch weights are produced and combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    /// Independent sigmoid weights, denominator clamped at `k_min`.
    #[default]
    Gated,
    /// Softmax-normalized weights (Σw = 1).
    Softmax,
    /// `max_k ỹ_k`, no attention.
    Max,
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gated" => Ok(Self::Gated),
            "softmax" => Ok(Self::Softmax),
            "max" => Ok(Self::Max),
            other => Err(Error::Config(format!(
                "unknown aggregator `{other}` (expected gated, softmax or max)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub k_min: f64,
    pub hidden: usize,
    pub aggregator: Aggregator,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            kernel: (1, 1),
            stride: (1, 1),
            k_min: 1.0,
            hidden: 64,
            aggregator: Aggregator::Gated,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel.0 == 0 || self.kernel.1 == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Config("patch kernel and stride must be positive".into()));
        }
        if !(self.k_min >= 0.0) || !self.k_min.is_finite() {
            return Err(Error::Config(format!("k_min must be a finite value >= 0, got {}", self.k_min)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("attention hidden width must be at least 1".into()));
        }
        Ok(())
    }
}

/// Patch classifier `o` and gated-attention branches `A`, `B`, `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    /// `C_U`
    pub o: Tensor<T>,
    /// `C_U × D`
    pub a: Tensor<T>,
    /// `C_U × D`
    pub b: Tensor<T>,
    /// `D`
    pub c: Tensor<T>,
}

pub fn init_head<T: Real>(channels: usize, hidden: usize, seed: u64) -> Result<HeadParams<T>> {
    if channels == 0 || hidden == 0 {
        return arg_err("head dimensions must be positive");
    }
    let mut rng = rng::seeded(seed);
    let mut normal = |shape: &[usize], fan_in: usize| {
        let d = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| T::from_f64(d.sample(&mut rng))).collect())
            .expect("consistent shape")
    };
    Ok(HeadParams {
        o: normal(&[channels], channels),
        a: normal(&[channels, hidden], channels),
        b: normal(&[channels, hidden], channels),
        c: normal(&[hidden], hidden),
    })
}

impl<T: Real> HeadParams<T> {
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        Self {
            o: Tensor::zeros(&[channels]),
            a: Tensor::zeros(&[channels, hidden]),
            b: Tensor::zeros(&[channels, hidden]),
            c: Tensor::zeros(&[hidden]),
        }
    }

    pub fn channels(&self) -> usize {
        self.o.numel()
    }

    pub fn hidden(&self) -> usize {
        self.c.numel()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("head.o".into(), &self.o),
            ("head.a".into(), &self.a),
            ("head.b".into(), &self.b),
            ("head.c".into(), &self.c),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.o, &mut self.a, &mut self.b, &mut self.c]
    }

    pub fn cast<U: Real>(&self) -> HeadParams<U> {
        HeadParams {
            o: self.o.cast(),
            a: self.a.cast(),
            b: self.b.cast(),
            c: self.c.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> HeadVars {
        HeadVars {
            o: g.leaf(self.o.clone(), trainable),
            a: g.leaf(self.a.clone(), trainable),
            b: g.leaf(self.b.clone(), trainable),
            c: g.leaf(self.c.clone(), trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub o: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
}

impl HeadVars {
    pub fn params(&self) -> Vec<Var> {
        vec![self.o, self.a, self.b, self.c]
    }
}

fn column<T: Real>(g: &mut Graph<T>, v: Var) -> Result<Var> {
    let n = g.value(v).numel();
    g.reshape(v, &[n, 1])
}

/// `ỹ = σ(P o)` for an `M×C` patch matrix; returns an `M×1` node.
pub fn classify_patches_graph<T: Real>(g: &mut Graph<T>, p: Var, o: Var) -> Result<Var> {
    let o = column(g, o)?;
    let logits = g.matmul(p, o)?;
    Ok(g.sigmoid(logits))
}

/// Pre-activation attention scores `(tanh(PA) ⊙ σ(PB)) c`, an `M×1` node.
pub fn attention_scores_graph<T: Real>(g: &mut Graph<T>, p: Var, vars: &HeadVars) -> Result<Var> {
    let pa = g.matmul(p, vars.a)?;
    let pa = g.tanh(pa);
    let pb = g.matmul(p, vars.b)?;
    let pb = g.sigmoid(pb);
    let gated = g.mul(pa, pb)?;
    let c = column(g, vars.c)?;
    g.matmul(gated, c)
}

/// Outputs of the head for a batch, each `N×K` except `y_hat` (`N`).
#[derive(Clone, Copy, Debug)]
pub struct HeadOutputs {
    pub y_hat: Var,
    pub y_tilde: Var,
    pub w: Var,
}

/// Runs the head on pooled patch features `N×K×C`.
pub fn head_forward<T: Real>(
    g: &mut Graph<T>,
    config: &HeadConfig,
    vars: &HeadVars,
    patches: Var,
) -> Result<HeadOutputs> {
    let s = g.shape(patches).to_vec();
    if s.len() != 3 {
        return shape_err(format!("head expects N×K×C patch features, got {s:?}"));
    }
    let (n, k, c) = (s[0], s[1], s[2]);
    if g.value(vars.o).numel() != c || g.shape(vars.a)[0] != c || g.shape(vars.b)[0] != c {
        return shape_err(format!(
            "head parameters expect {} channels, patch features have {c}",
            g.value(vars.o).numel()
        ));
    }
    let flat = g.reshape(patches, &[n * k, c])?;
    let y = classify_patches_graph(g, flat, vars.o)?;
    let y_tilde = g.reshape(y, &[n, k])?;
    let (w, y_hat) = match config.aggregator {
        Aggregator::Gated => {
            let s = attention_scores_graph(g, flat, vars)?;
            let w = g.sigmoid(s);
            let w = g.reshape(w, &[n, k])?;
            (w, g.mil_aggregate(y_tilde, w, config.k_min)?)
        }
        Aggregator::Softmax => {
            let s = attention_scores_graph(g, flat, vars)?;
            let s = g.reshape(s, &[n, k])?;
            let w = g.row_softmax(s)?;
            (w, g.mil_aggregate(y_tilde, w, config.k_min)?)
        }
        Aggregator::Max => {
            let w = g.constant(Tensor::full(&[n, k], T::one()));
            (w, g.row_max(y_tilde)?)
        }
    };
    Ok(HeadOutputs { y_hat, y_tilde, w })
}

fn check_patch_matrix<T: Real>(p: &Tensor<T>, channels: usize) -> Result<()> {
    if p.rank() != 2 || p.shape()[1] != channels {
        return shape_err(format!(
            "patch matrix must be K×{channels}, got {:?}",
            p.shape()
        ));
    }
    Ok(())
}

/// `ỹ_k = σ((P o)_k)`.
pub fn classify_patches<T: Real>(p: &Tensor<T>, o: &Tensor<T>) -> Result<Vec<f64>> {
    check_patch_matrix(p, o.numel())?;
    let mut g = Graph::new();
    let (pv, ov) = (g.constant(p.clone()), g.constant(o.clone()));
    let y = classify_patches_graph(&mut g, pv, ov)?;
    Ok(g.value(y).to_f64_vec())
}

/// Gated attention weights with a sigmoid outer function; each weight
/// depends only on its own row of `P`.
pub fn attend<T: Real>(p: &Tensor<T>, params: &HeadParams<T>) -> Result<Vec<f64>> {
    check_patch_matrix(p, params.channels())?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let pv = g.constant(p.clone());
    let s = attention_scores_graph(&mut g, pv, &vars)?;
    let w = g.sigmoid(s);
    Ok(g.value(w).to_f64_vec())
}

/// Gated attention with softmax over patches (weights sum to 1).
pub fn attend_softmax<T: Real>(p: &Tensor<T>, params: &HeadParams<T>) -> Result<Vec<f64>> {
    check_patch_matrix(p, params.channels())?;
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let pv = g.constant(p.clone());
    let s = attention_scores_graph(&mut g, pv, &vars)?;
    let k = p.shape()[0];
    let s = g.reshape(s, &[1, k])?;
    let w = g.row_softmax(s)?;
    Ok(g.value(w).to_f64_vec())
}

fn check_bag(y_tilde: &[f64], w: &[f64], k_min: f64) -> Result<()> {
    if y_tilde.len() != w.len() {
        return shape_err(format!(
            "ỹ has {} entries but w has {}",
            y_tilde.len(),
            w.len()
        ));
    }
    if !(k_min >= 0.0) {
        return arg_err(format!("k_min must be >= 0, got {k_min}"));
    }
    Ok(())
}

fn aggregate_unchecked(y_tilde: &[f64], w: &[f64], k_min: f64) -> f64 {
    let sum_w: f64 = w.iter().sum();
    let num: f64 = y_tilde.iter().zip(w).map(|(y, w)| y * w).sum();
    let den = sum_w.max(k_min);
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `ŷ = Σ wₖỹₖ / max(Σ wₖ, k_min)`; 0 when the denominator vanishes.
pub fn aggregate(y_tilde: &[f64], w: &[f64], k_min: f64) -> Result<f64> {
    check_bag(y_tilde, w, k_min)?;
    Ok(aggregate_unchecked(y_tilde, w, k_min))
}

pub fn aggregate_max(y_tilde: &[f64]) -> Result<f64> {
    y_tilde
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::InvalidArgument("aggregate_max of an empty bag".into()))
}

/// Probability of a group of patches: the aggregation restricted to `indices`.
pub fn group_probability(y_tilde: &[f64], w: &[f64], indices: &[usize], k_min: f64) -> Result<f64> {
    check_bag(y_tilde, w, k_min)?;
    if indices.is_empty() {
        return arg_err("group needs at least one patch index");
    }
    let mut seen = vec![false; y_tilde.len()];
    for &i in indices {
        if i >= y_tilde.len() {
            return arg_err(format!("patch index {i} out of range for {} patches", y_tilde.len()));
        }
        if std::mem::replace(&mut seen[i], true) {
            return arg_err(format!("patch index {i} listed twice"));
        }
    }
    let y: Vec<f64> = indices.iter().map(|&i| y_tilde[i]).collect();
    let ws: Vec<f64> = indices.iter().map(|&i| w[i]).collect();
    Ok(aggregate_unchecked(&y, &ws, k_min))
}

/// Exact change of `ŷ` when patch `i` is removed: `ŷ(without i) − ŷ(with i)`.
pub fn removal_delta(y_tilde: &[f64], w: &[f64], i: usize, k_min: f64) -> Result<f64> {
    check_bag(y_tilde, w, k_min)?;
    if i >= y_tilde.len() {
        return arg_err(format!("patch index {i} out of range for {} patches", y_tilde.len()));
    }
    let with = aggregate_unchecked(y_tilde, w, k_min);
    let (mut y, mut ws) = (y_tilde.to_vec(), w.to_vec());
    y.remove(i);
    ws.remove(i);
    Ok(aggregate_unchecked(&y, &ws, k_min) - with)
}

/// Closed-form removal effect `−wᵢỹᵢ/k_min`, exact whenever `Σw ≤ k_min`.
pub fn removal_delta_closed_form(y_tilde: &[f64], w: &[f64], i: usize, k_min: f64) -> Result<f64> {
    check_bag(y_tilde, w, k_min)?;
    if i >= y_tilde.len() {
        return arg_err(format!("patch index {i} out of range for {} patches", y_tilde.len()));
    }
    if k_min == 0.0 {
        return arg_err("closed-form removal effect needs k_min > 0");
    }
    Ok(-w[i] * y_tilde[i] / k_min)
}

/// Result of one forward pass over a single image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub y_hat: f64,
    pub y_tilde: Vec<f64>,
    pub w: Vec<f64>,
    /// `(rows, cols)` of the patch grid, `rows · cols = K`.
    pub grid: (usize, usize),
    pub k_min: f64,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.y_tilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_tilde.is_empty()
    }

    pub fn attention_mass(&self) -> f64 {
        self.w.iter().sum()
    }

    pub fn group_probability(&self, indices: &[usize]) -> Result<f64> {
        group_probability(&self.y_tilde, &self.w, indices, self.k_min)
    }

    pub fn removal_delta(&self, i: usize) -> Result<f64> {
        removal_delta(&self.y_tilde, &self.w, i, self.k_min)
    }

    /// Re-aggregates with a different `k_min`.
    pub fn with_k_min(&self, k_min: f64) -> Result<Self> {
        Ok(Self {
            y_hat: aggregate(&self.y_tilde, &self.w, k_min)?,
            k_min,
            ..self.clone()
        })
    }
}

/// Scalar version of the gated attention for a single row (used in tests and docs).
pub fn attention_weight_row(row: &[f64], a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let d = c.len();
    let mut score = 0.0;
    for j in 0..d {
        let pa: f64 = row.iter().enumerate().map(|(i, x)| x * a[i * d + j]).sum();
        let pb: f64 = row.iter().enumerate().map(|(i, x)| x * b[i * d + j]).sum();
        score += pa.tanh() * sigmoid(pb) * c[j];
    }
    sigmoid(score)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_weights_give_zero() {
        assert_eq!(aggregate(&[0.9, 0.8], &[0.0, 0.0], 1.0).unwrap(), 0.0);
        assert_eq!(aggregate(&[0.9, 0.8], &[0.0, 0.0], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn single_attended_patch() {
        assert_eq!(aggregate(&[0.9, 0.3], &[1.0, 0.0], 1.0).unwrap(), 0.9);
    }

    #[test]
    fn clamped_denominator() {
        assert!((aggregate(&[0.8], &[0.5], 1.0).unwrap() - 0.4).abs() < 1e-15);
    }

    #[test]
    fn two_positive_patches_survive_removal() {
        let (y, w) = ([1.0, 1.0], [1.0, 1.0]);
        assert_eq!(aggregate(&y, &w, 1.0).unwrap(), 1.0);
        for i in 0..2 {
            assert_eq!(removal_delta(&y, &w, i, 1.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn removal_delta_in_clamped_regime() {
        let (y, w) = ([0.5, 0.5], [0.3, 0.4]);
        let d = removal_delta(&y, &w, 0, 1.0).unwrap();
        assert!((d + 0.15).abs() < 1e-12);
        assert!((removal_delta_closed_form(&y, &w, 0, 1.0).unwrap() - d).abs() < 1e-12);
    }

    #[test]
    fn removing_the_only_patch() {
        assert!((removal_delta(&[1.0], &[0.2], 0, 1.0).unwrap() + 0.2).abs() < 1e-15);
    }

    #[test]
    fn max_aggregator() {
        assert_eq!(aggregate_max(&[0.1, 0.7, 0.2]).unwrap(), 0.7);
        assert_eq!(aggregate_max(&[0.4, 0.4]).unwrap(), 0.4);
        assert!(aggregate_max(&[]).is_err());
    }

    #[test]
    fn group_probability_edges() {
        let y = [0.2, 0.9, 0.5, 0.1];
        let w = [0.3, 0.8, 0.0, 0.0];
        assert_eq!(
            group_probability(&y, &w, &[0, 1, 2, 3], 1.0).unwrap(),
            aggregate(&y, &w, 1.0).unwrap()
        );
        assert_eq!(group_probability(&y, &w, &[2, 3], 1.0).unwrap(), 0.0);
        assert!(group_probability(&y, &w, &[4], 1.0).is_err());
        assert!(group_probability(&y, &w, &[1, 1], 1.0).is_err());
        assert!(group_probability(&y, &w, &[], 1.0).is_err());
    }

    #[test]
    fn zero_classifier_gives_half() {
        let p = Tensor::<f64>::from_f64(&[3, 2], &[1.0, -2.0, 0.5, 4.0, 3.0, 3.0]).unwrap();
        let y = classify_patches(&p, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y, vec![0.5; 3]);
    }

    #[test]
    fn classifier_dimension_mismatch() {
        let p = Tensor::<f64>::zeros(&[3, 2]);
        assert!(classify_patches(&p, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn zero_c_gives_half_weights() {
        let p = Tensor::<f64>::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 4.0]).unwrap();
        let mut params = init_head::<f64>(2, 3, 0).unwrap();
        params.c = Tensor::zeros(&[3]);
        assert_eq!(attend(&p, &params).unwrap(), vec![0.5; 2]);
    }

    #[test]
    fn softmax_single_patch() {
        let p = Tensor::<f64>::from_f64(&[1, 2], &[0.3, -0.7]).unwrap();
        let params = init_head::<f64>(2, 4, 1).unwrap();
        assert_eq!(attend_softmax(&p, &params).unwrap(), vec![1.0]);
    }

    #[test]
    fn aggregator_parses() {
        assert_eq!("softmax".parse::<Aggregator>().unwrap(), Aggregator::Softmax);
        assert!("mean".parse::<Aggregator>().is_err());
    }
}
