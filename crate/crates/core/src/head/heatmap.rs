use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Prediction;
use crate::error::{shape_err, Result};
use crate::pgm;
use crate::tensor::kernels::{bilinear_forward, PatchGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapKind {
    PatchProb,
    Attention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub kind: HeatmapKind,
    pub rows: usize,
    pub cols: usize,
    /// `rows × cols` values in `[0, 1]`.
    pub grid: Vec<f64>,
    pub render_dims: (usize, usize),
    /// Grid resized bilinearly to the input image.
    pub render: Vec<f64>,
}

impl Heatmap {
    fn new(kind: HeatmapKind, (rows, cols): (usize, usize), grid: Vec<f64>, input: (usize, usize)) -> Self {
        let render = bilinear_forward(1, (rows, cols), input, &grid);
        Self {
            kind,
            rows,
            cols,
            grid,
            render_dims: input,
            render,
        }
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let (h, w) = self.render_dims;
        pgm::write_gray(path, w, h, &pgm::quantize(&self.render))
    }

    /// Raw grid values, one row per line.
    pub fn grid_text(&self) -> String {
        let mut s = String::new();
        for row in self.grid.chunks_exact(self.cols) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Builds the patch-probability map `M^ỹ` and the attention map `M^w`.
///
/// With exactly tiling, non-overlapping patches each grid cell is one patch.
/// Otherwise maps live at feature resolution: attention of all covering
/// patches is summed and clipped at 1, probabilities are averaged over the
/// covering patches, and uncovered locations are 0.
pub fn build_heatmaps(
    prediction: &Prediction,
    kernel: (usize, usize),
    stride: (usize, usize),
    feature_dims: (usize, usize),
    input_dims: (usize, usize),
) -> Result<(Heatmap, Heatmap)> {
    let grid = PatchGrid::new(feature_dims.0, feature_dims.1, kernel, stride)?;
    if (grid.rows, grid.cols) != prediction.grid || grid.len() != prediction.len() {
        return shape_err(format!(
            "prediction grid {:?} with {} patches does not match a {}x{} patch grid over {:?}",
            prediction.grid,
            prediction.len(),
            grid.rows,
            grid.cols,
            feature_dims
        ));
    }
    if input_dims.0 == 0 || input_dims.1 == 0 {
        return shape_err("input dims must be positive");
    }
    let tiles = stride == kernel
        && grid.rows * kernel.0 == feature_dims.0
        && grid.cols * kernel.1 == feature_dims.1;
    if tiles {
        let dims = (grid.rows, grid.cols);
        return Ok((
            Heatmap::new(HeatmapKind::PatchProb, dims, prediction.y_tilde.clone(), input_dims),
            Heatmap::new(HeatmapKind::Attention, dims, prediction.w.clone(), input_dims),
        ));
    }
    let (h, w) = feature_dims;
    let mut prob_sum = vec![0.0; h * w];
    let mut count = vec![0usize; h * w];
    let mut attn = vec![0.0; h * w];
    for k in 0..grid.len() {
        let (r0, c0) = grid.origin(k);
        for r in r0..r0 + kernel.0 {
            for c in c0..c0 + kernel.1 {
                prob_sum[r * w + c] += prediction.y_tilde[k];
                count[r * w + c] += 1;
                attn[r * w + c] += prediction.w[k];
            }
        }
    }
    let prob = prob_sum
        .iter()
        .zip(&count)
        .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
        .collect();
    let attn = attn.into_iter().map(|v| v.min(1.0)).collect();
    Ok((
        Heatmap::new(HeatmapKind::PatchProb, feature_dims, prob, input_dims),
        Heatmap::new(HeatmapKind::Attention, feature_dims, attn, input_dims),
    ))
}
