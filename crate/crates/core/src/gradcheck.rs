//! Finite-difference verification of analytic gradients.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub mod suite;

/// Floor of the relative-error denominator, so that two tiny gradients compare as equal.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Relative error `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Analytic gradient of the scalar built by `f` at `point`.
pub fn analytic_gradient<T, F>(f: &F, point: &Tensor<T>) -> Result<(T, Tensor<T>)>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let out = f(&mut g, x)?;
    let value = g.value(out).item();
    g.backward(out)?;
    let grad = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(point.shape()));
    Ok((value, grad))
}

fn evaluate<T, F>(f: &F, point: Tensor<T>) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.constant(point);
    let out = f(&mut g, x)?;
    let v = g.value(out);
    if !v.is_scalar() {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Central-difference gradient with step `step`.
pub fn numeric_gradient<T, F>(f: &F, point: &Tensor<T>, step: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    let two = T::of(2.0);
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] = plus.data()[i] + step;
        let mut minus = point.clone();
        minus.data_mut()[i] = minus.data()[i] - step;
        let fp = evaluate(f, plus)?;
        let fm = evaluate(f, minus)?;
        out.push((fp - fm) / (two * step));
    }
    Tensor::new(point.shape().to_vec(), out)
}

/// Maximum coordinate-wise relative error between the analytic gradient and central
/// finite differences of `f` at `point`.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, step: T) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if step <= T::zero() {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let (_, analytic) = analytic_gradient(&f, point)?;
    let numeric = numeric_gradient(&f, point, step)?;
    if !analytic.all_finite() {
        return Err(Error::Numeric("analytic gradient is not finite".into()));
    }
    if !numeric.all_finite() {
        return Err(Error::Numeric("numeric gradient is not finite".into()));
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| relative_error(a.to_f64_lossy(), n.to_f64_lossy()))
        .fold(0.0, f64::max))
}
