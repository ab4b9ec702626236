use super::mlp::{Mlp, MlpSpec, SampleLoss};
use super::params::ParamVector;
use crate::{Error, Result};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(
    x: &[f64],
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::NonPositiveStep);
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `max_i |a_i - n_i| / (|a_i| + |n_i| + 1e-12)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / (a.abs() + n.abs() + 1e-12))
        .fold(0.0, f64::max)
}

/// Compares an analytic gradient of `f` at `x` against central differences.
pub fn grad_check_fn(
    x: &[f64],
    f: impl FnMut(&[f64]) -> Result<f64>,
    analytic: &[f64],
    h: f64,
) -> Result<f64> {
    if analytic.len() != x.len() {
        return Err(Error::DimensionMismatch {
            context: "analytic gradient",
            expected: x.len(),
            actual: analytic.len(),
        });
    }
    let numeric = central_difference(x, f, h)?;
    Ok(max_relative_error(analytic, &numeric))
}

/// Max relative error between [`Mlp::loss_and_gradients`] and central
/// differences of the mean batch loss.
pub fn grad_check(
    spec: &MlpSpec,
    params: &ParamVector,
    loss: &dyn SampleLoss,
    batch: &[Vec<f64>],
    h: f64,
) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::NonPositiveStep);
    }
    let mlp = Mlp::new(spec.clone())?;
    let (_, analytic) = mlp.loss_and_gradients(params, loss, batch)?;
    let value_at = |values: &[f64]| -> Result<f64> {
        let p = params.with_values(values.to_vec())?;
        Ok(mlp.loss_and_gradients(&p, loss, batch)?.0)
    };
    grad_check_fn(params.values(), value_at, analytic.values(), h)
}
