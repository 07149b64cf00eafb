use super::{Graph, Tensor, Var};
use crate::error::{arg_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over all parameters of `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// `(input index, flat element index)` where the maximum was attained.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares tape gradients of a scalar program against central differences.
///
/// `program` receives a fresh graph and one leaf per entry of `inputs` and
/// must return a scalar node.
pub fn grad_check<F>(program: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return arg_err(format!("finite-difference step {eps} outside [1e-6, 1e-3]"));
    }
    let evaluate = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let out = program(&mut g, &vars)?;
        let v = scalar_of(&g, out)?;
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = program(&mut g, &vars)?;
    scalar_of(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let orig = input.data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = evaluate(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = evaluate(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of input {i} element {j}: analytic {a}, numeric {numeric}"
                )));
            }
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::Shape(format!(
            "grad_check program must return a scalar, got {:?}",
            t.shape()
        )));
    }
    let x = t.data()[0];
    if !x.is_finite() {
        return Err(Error::NonFinite(format!("program output {x}")));
    }
    Ok(x)
}
