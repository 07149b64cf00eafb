//! The full pipeline: encoder, patch pooling and the EMIL head.

use serde::{Deserialize, Serialize};

use crate::encoder::{init_encoder, EncoderConfig, EncoderParams, EncoderVars};
use crate::error::{shape_err, Result};
use crate::head::{head_forward, init_head, HeadConfig, HeadOutputs, HeadParams, HeadVars, Prediction};
use crate::tensor::kernels::PatchGrid;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()
    }

    /// Feature map extent and patch grid for an input of `(H_X, W_X)`.
    pub fn layout(&self, input: (usize, usize)) -> Result<((usize, usize), PatchGrid)> {
        let (h, w) = self.encoder.output_dims(input)?;
        let grid = PatchGrid::new(h, w, self.head.kernel, self.head.stride)?;
        Ok(((h, w), grid))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Emil<T> {
    pub config: ModelConfig,
    pub encoder: EncoderParams<T>,
    pub head: HeadParams<T>,
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub encoder: EncoderVars,
    pub head: HeadVars,
}

impl ModelVars {
    /// Parameter handles in [`Emil::named_tensors`] order.
    pub fn params(&self) -> Vec<Var> {
        let mut v = self.encoder.params();
        v.extend(self.head.params());
        v
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    pub features: Var,
    pub patches: Var,
    pub head: HeadOutputs,
    pub grid: PatchGrid,
}

const HEAD_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

impl<T: Real> Emil<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = init_encoder(&config.encoder, seed)?;
        let head = init_head(config.encoder.output_channels(), config.head.hidden, seed ^ HEAD_SEED_SALT)?;
        Ok(Self {
            config,
            encoder,
            head,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = self.encoder.named_tensors();
        v.extend(self.head.named_tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = self.encoder.tensors_mut();
        v.extend(self.head.tensors_mut());
        v
    }

    pub fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> Emil<U> {
        Emil {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            head: self.head.cast(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(g, trainable),
            head: self.head.bind(g, trainable),
        }
    }

    /// Model handles from leaves listed in [`Emil::named_tensors`] order.
    pub fn vars_from(&self, params: &[Var]) -> Result<ModelVars> {
        let (encoder, used) = self.encoder.vars_from(params)?;
        match params[used..] {
            [o, a, b, c] => Ok(ModelVars {
                encoder,
                head: HeadVars { o, a, b, c },
            }),
            _ => Err(crate::error::Error::InvalidArgument(format!(
                "expected {} parameter handles, got {}",
                used + 4,
                params.len()
            ))),
        }
    }

    /// Forward pass for an `N×C×H×W` batch.
    pub fn forward_graph(&self, g: &mut Graph<T>, vars: &ModelVars, x: Var) -> Result<ForwardOutputs> {
        let features = self.encoder.forward(g, &vars.encoder, x)?;
        self.forward_features_graph(g, vars, features)
    }

    /// Head-only forward pass on `N×C_U×H_U×W_U` features.
    pub fn forward_features_graph(
        &self,
        g: &mut Graph<T>,
        vars: &ModelVars,
        features: Var,
    ) -> Result<ForwardOutputs> {
        let s = g.shape(features).to_vec();
        if s.len() != 4 {
            return shape_err(format!("features must be N×C×H×W, got {s:?}"));
        }
        let grid = PatchGrid::new(s[2], s[3], self.config.head.kernel, self.config.head.stride)?;
        let patches = g.avg_pool_patches(features, self.config.head.kernel, self.config.head.stride)?;
        let head = head_forward(g, &self.config.head, &vars.head, patches)?;
        Ok(ForwardOutputs {
            features,
            patches,
            head,
            grid,
        })
    }

    fn predictions_from(&self, g: &Graph<T>, out: &ForwardOutputs) -> Vec<Prediction> {
        let y_hat = g.value(out.head.y_hat).to_f64_vec();
        let y_tilde = g.value(out.head.y_tilde).to_f64_vec();
        let w = g.value(out.head.w).to_f64_vec();
        let k = out.grid.len();
        y_hat
            .iter()
            .enumerate()
            .map(|(i, &y)| Prediction {
                y_hat: y,
                y_tilde: y_tilde[i * k..(i + 1) * k].to_vec(),
                w: w[i * k..(i + 1) * k].to_vec(),
                grid: (out.grid.rows, out.grid.cols),
                k_min: self.config.head.k_min,
            })
            .collect()
    }

    /// Predicts a batch of `C×H×W` images of equal size.
    pub fn predict_batch(&self, images: &[&Tensor<T>]) -> Result<Vec<Prediction>> {
        let Some(first) = images.first() else {
            return Ok(Vec::new());
        };
        let shape = first.shape().to_vec();
        if shape.len() != 3 {
            return shape_err(format!("images must be C×H×W, got {shape:?}"));
        }
        let mut data = Vec::with_capacity(images.len() * first.numel());
        for img in images {
            if img.shape() != shape.as_slice() {
                return shape_err(format!(
                    "batch mixes image shapes {shape:?} and {:?}",
                    img.shape()
                ));
            }
            data.extend_from_slice(img.data());
        }
        let mut batch_shape = vec![images.len()];
        batch_shape.extend(&shape);
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let x = g.constant(Tensor::new(&batch_shape, data)?);
        let out = self.forward_graph(&mut g, &vars, x)?;
        Ok(self.predictions_from(&g, &out))
    }

    pub fn predict(&self, image: &Tensor<T>) -> Result<Prediction> {
        Ok(self.predict_batch(&[image])?.remove(0))
    }

    /// Runs the head on precomputed `C_U×H_U×W_U` features.
    pub fn predict_features(&self, features: &Tensor<T>) -> Result<Prediction> {
        if features.rank() != 3 {
            return shape_err(format!("features must be C×H×W, got {:?}", features.shape()));
        }
        let mut shape = vec![1];
        shape.extend(features.shape());
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let u = g.constant(features.clone().reshape(&shape)?);
        let out = self.forward_features_graph(&mut g, &vars, u)?;
        Ok(self.predictions_from(&g, &out).remove(0))
    }
}
