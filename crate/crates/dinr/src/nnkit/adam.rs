use crate::error::{Error, Result};
use crate::nnkit::params::ParamSet;

/// First/second moment buffers and step counter for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0 }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update from `params.grads`, in place. Standard bias-corrected
/// rule; the step counter increments on every call.
pub fn adam_step(
    params: &mut ParamSet,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::invalid(format!("adam lr must be > 0, got {lr}")));
    }
    if state.m.len() != params.len() {
        return Err(Error::ShapeMismatch {
            context: "adam state",
            expected: vec![params.len()],
            got: vec![state.m.len()],
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for i in 0..params.len() {
        let g = params.grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam with the default (beta1, beta2, eps).
pub fn adam_step_default(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<()> {
    adam_step(params, state, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
}
