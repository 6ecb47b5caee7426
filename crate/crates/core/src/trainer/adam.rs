//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-15 }
    }
}

/// First and second moments, one pair per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![T::zero(); n], v: vec![T::zero(); n] }
    }
}

/// One Adam update at 1-based `step`; `lr(i)` is the learning rate of
/// parameter `i`. Arithmetic is done in `f64`.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    step: u64,
    lr: impl Fn(usize) -> f64,
    hp: &AdamParams,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if step == 0 {
        return Err(Error::InvalidParameter("adam steps count from 1".into()));
    }
    let bc1 = 1.0 - hp.beta1.powi(step as i32);
    let bc2 = 1.0 - hp.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i].as_f64();
        let m = hp.beta1 * state.m[i].as_f64() + (1.0 - hp.beta1) * g;
        let v = hp.beta2 * state.v[i].as_f64() + (1.0 - hp.beta2) * g * g;
        state.m[i] = T::of(m);
        state.v[i] = T::of(v);
        let update = lr(i) * (m / bc1) / ((v / bc2).sqrt() + hp.eps);
        params[i] = T::of(params[i].as_f64() - update);
    }
    Ok(())
}
