//! Adam optimizer with bias correction.

use super::Tensor;
use crate::error::{HiclError, Result};

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct MomentState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl MomentState {
    pub fn zeros(len: usize) -> Self {
        MomentState {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One Adam update on a raw parameter buffer. Deterministic given inputs;
/// `t` is the 1-based step count used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut MomentState,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(HiclError::Dimension {
            op: "adam_step",
            lhs: vec![params.len()],
            rhs: vec![grads.len()],
        });
    }
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..params.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grads[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a fixed list of parameter tensors.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    states: Vec<MomentState>,
}

impl Adam {
    /// Defaults: β1=0.9, β2=0.999, eps=1e-8.
    pub fn new(params: &[Tensor], lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            states: params.iter().map(|p| MomentState::zeros(p.len())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Apply one update using each tensor's accumulated gradient.
    /// `params` must be the same list (same order) given to `new`.
    pub fn step(&mut self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.states.len() {
            return Err(HiclError::Contract(format!(
                "optimizer built for {} parameters, given {}",
                self.states.len(),
                params.len()
            )));
        }
        self.step_count += 1;
        for (p, state) in params.iter().zip(self.states.iter_mut()) {
            let grad = p
                .grad()
                .ok_or_else(|| HiclError::Contract("optimizing a non-parameter tensor".into()))?;
            let mut data = p.to_vec();
            adam_step(
                &mut data,
                &grad,
                state,
                self.step_count,
                self.lr,
                self.beta1,
                self.beta2,
                self.eps,
            )?;
            p.set_data(&data)?;
        }
        Ok(())
    }
}
