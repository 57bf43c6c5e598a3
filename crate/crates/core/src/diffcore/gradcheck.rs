//! Central-difference gradient verification.

use super::tensor::Tensor;
use crate::error::Result;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Relative error used throughout: |a − b| / max(1e-8, |a| + |b|).
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Numerical gradient of `f` at `theta` by central differences.
pub fn numerical_grad(f: &mut dyn FnMut(&Tensor) -> Result<f64>, theta: &Tensor, h: f64) -> Result<Vec<f64>> {
    let mut probe = theta.clone();
    let mut out = Vec::with_capacity(theta.numel());
    for i in 0..theta.numel() {
        let x0 = theta.data()[i];
        probe.data_mut()[i] = x0 + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = x0 - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = x0;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Maximum relative error between an analytic gradient and central differences.
///
/// `f` maps a parameter tensor to a scalar; `grad` returns the analytic
/// gradient at the same point.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    grad: &mut dyn FnMut(&Tensor) -> Result<Vec<f64>>,
    theta: &Tensor,
) -> Result<f64> {
    let analytic = grad(theta)?;
    let numeric = numerical_grad(f, theta, FD_STEP)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max))
}

/// Like [`finite_diff_check`] but only probes the listed coordinates. Used for
/// large parameter sets where probing every element is too slow.
pub fn finite_diff_check_at(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    analytic: &[f64],
    theta: &Tensor,
    coords: &[usize],
) -> Result<f64> {
    let mut probe = theta.clone();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let x0 = theta.data()[i];
        probe.data_mut()[i] = x0 + FD_STEP;
        let up = f(&probe)?;
        probe.data_mut()[i] = x0 - FD_STEP;
        let down = f(&probe)?;
        probe.data_mut()[i] = x0;
        worst = worst.max(rel_error(analytic[i], (up - down) / (2.0 * FD_STEP)));
    }
    Ok(worst)
}
