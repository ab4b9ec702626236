use super::params::ParamVector;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step_count: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// In-place bias-corrected update.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        self.check_lengths(params.len(), grads.len())?;
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                name: format!("gradient[{i}]"),
            });
        }
        self.apply(params, grads);
        Ok(())
    }

    fn check_lengths(&self, params: usize, grads: usize) -> Result<()> {
        let n = self.first_moment.len();
        if params != n {
            return Err(Error::DimensionMismatch {
                context: "adam parameters",
                expected: n,
                actual: params,
            });
        }
        if grads != n {
            return Err(Error::DimensionMismatch {
                context: "adam gradients",
                expected: n,
                actual: grads,
            });
        }
        Ok(())
    }

    fn apply(&mut self, params: &mut [f64], grads: &[f64]) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
    }
}

/// Pure Adam step: returns updated parameters and state, leaving inputs intact.
pub fn adam_step(
    state: &AdamState,
    params: &ParamVector,
    grads: &ParamVector,
) -> Result<(ParamVector, AdamState)> {
    state.check_lengths(params.len(), grads.len())?;
    grads.check_finite()?;
    let mut next = state.clone();
    let mut values = params.values().to_vec();
    next.apply(&mut values, grads.values());
    Ok((params.with_values(values)?, next))
}
