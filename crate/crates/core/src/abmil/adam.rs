//! Adam with bias correction and decoupled weight decay.

use super::model::{AttentionModel, Gradients};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }

    pub fn for_model(model: &AttentionModel) -> Self {
        Self::new(model.num_params())
    }

    /// One update over a flat parameter vector: `θ ← θ − lr·wd·θ`, then the
    /// bias-corrected Adam step.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        apply(self, 0, params, grads, lr, weight_decay, bc1, bc2);
    }
}

#[allow(clippy::too_many_arguments)]
fn apply(
    state: &mut AdamState,
    offset: usize,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    weight_decay: f64,
    bc1: f64,
    bc2: f64,
) {
    assert_eq!(
        params.len(),
        grads.len(),
        "parameter/gradient shape mismatch"
    );
    let m = &mut state.m[offset..offset + params.len()];
    let v = &mut state.v[offset..offset + params.len()];
    for i in 0..params.len() {
        let g = grads[i];
        params[i] -= lr * weight_decay * params[i];
        m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
        v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

pub fn adam_step(
    model: &mut AttentionModel,
    grads: &Gradients,
    state: &mut AdamState,
    learning_rate: f64,
    weight_decay: f64,
) {
    assert_eq!(
        state.m.len(),
        model.num_params(),
        "optimizer state does not match model"
    );
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let mut offset = 0;
    for (p, g) in model.slices_mut().into_iter().zip(grads.slices()) {
        let len = p.len();
        apply(state, offset, p, g, learning_rate, weight_decay, bc1, bc2);
        offset += len;
    }
}
