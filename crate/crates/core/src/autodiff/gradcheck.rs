//! Finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-4;

/// Pins a closure to the higher-ranked signature the checkers expect.
pub fn objective<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    f
}

/// Relative error `|a − c| / max(|a|, |c|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let out = f(&g, g.constant(x.clone()))?;
    let v = out.value();
    if v.numel() != 1 {
        return Err(Error::invalid(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Analytic gradient of the scalar function `f` at `x`.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Vec<f64>>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let input = g.param(x.clone());
    let out = f(&g, input)?;
    if out.value().numel() != 1 {
        return Err(Error::invalid(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            out.shape()
        )));
    }
    let grads = g.backward(out)?;
    Ok(grads
        .data(&input)
        .map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec))
}

/// Maximum relative error between the analytic gradient and central
/// differences over every component of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let all: Vec<usize> = (0..x.numel()).collect();
    grad_check_at(f, x, eps, &all)
}

/// Like [`grad_check`] but only over the listed components.
pub fn grad_check_at<F>(f: F, x: &Tensor, eps: f64, components: &[usize]) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let analytic = analytic_gradient(&f, x)?;
    let mut worst: f64 = 0.0;
    for &i in components {
        let numeric = numeric_derivative(&f, x, i, eps)?;
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

/// Five-point central difference of `f` along component `i`.
pub fn numeric_derivative<F>(f: &F, x: &Tensor, i: usize, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check eps must be positive"));
    }
    if i >= x.numel() {
        return Err(Error::invalid(format!("component {i} out of range for {} values", x.numel())));
    }
    let mut probe = x.clone();
    let orig = probe.data()[i];
    let mut at = |offset: f64| {
        probe.data_mut()[i] = orig + offset;
        eval_scalar(f, &probe)
    };
    let (p1, m1, p2, m2) = (at(eps)?, at(-eps)?, at(2.0 * eps)?, at(-2.0 * eps)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps))
}
