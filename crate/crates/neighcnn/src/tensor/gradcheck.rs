//! Central finite-difference gradient checking.
//!
//! This is the independent oracle for every differentiable operation: the
//! analytic gradient from [`Graph::backward`] is compared element by element
//! against `(f(x + h e_i) - f(x - h e_i)) / 2h` with `h = step * max(1, |x_i|)`.
//! All checks run in 64-bit.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn from_errors(analytic: &[f64], numeric: &[f64], tolerance: f64) -> Self {
        let max_rel_err = max_rel_err(analytic, numeric);
        GradCheckReport {
            max_rel_err,
            tolerance,
            passed: max_rel_err < tolerance,
        }
    }
}

/// Relative error with the denominator floored at 1, so near-zero gradient
/// components are compared absolutely instead of amplifying rounding noise.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar-valued function of one tensor.
pub fn numeric_grad(
    f: impl Fn(&Tensor<f64>) -> Result<f64>,
    input: &Tensor<f64>,
    step: f64,
) -> Result<Vec<f64>> {
    let mut grad = Vec::with_capacity(input.numel());
    for i in 0..input.numel() {
        let xi = input.data()[i];
        let h = step * xi.abs().max(1.0);
        let plus = f(&input.with_element(i, xi + h))?;
        let minus = f(&input.with_element(i, xi - h))?;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Check a scalar-valued differentiable function of one tensor.
///
/// `f` must be pure: two evaluations on equal inputs must return equal
/// values. It is invoked once on a recording graph (for the analytic
/// gradient) and `2 * numel` times on no-grad graphs (for the differences).
pub fn grad_check<F>(
    f: F,
    input: &Tensor<f64>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let graph = Graph::new();
    let x = graph.leaf(input.clone(), true)?;
    let loss = f(&graph, &x)?;
    if loss.value().numel() != 1 {
        return Err(Error::BackwardNonScalar {
            numel: loss.value().numel(),
        });
    }
    graph.backward(&loss)?;
    let analytic: Vec<f64> = match x.grad() {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; input.numel()],
    };

    let eval = |t: &Tensor<f64>| -> Result<f64> {
        let g = Graph::no_grad();
        let v = g.leaf(t.clone(), false)?;
        Ok(f(&g, &v)?.item())
    };
    let numeric = numeric_grad(eval, input, step)?;
    Ok(GradCheckReport::from_errors(&analytic, &numeric, tolerance))
}
