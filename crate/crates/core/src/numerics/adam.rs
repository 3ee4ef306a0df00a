//! Adam optimizer with bias correction over a `ParamStore`.

use crate::error::{ChimeError, Result};
use crate::numerics::params::ParamStore;

/// Per-parameter first/second moment state plus hyperparameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Step counter; increments by exactly one per `adam_step`.
    pub step: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Default learning rate 1e-4; moments shaped after the store's current
    /// parameters in insertion order.
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }
}

/// One Adam update over every parameter in the store. Every parameter must
/// have a populated gradient; gradients are zeroed afterwards.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if store.len() != state.m.len() {
        return Err(ChimeError::Contract(format!(
            "optimizer state covers {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    for (name, t) in store.iter() {
        if t.grad().is_none() {
            return Err(ChimeError::Contract(format!(
                "parameter '{name}' has no gradient; run backward before adam_step"
            )));
        }
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for (slot, (_, t)) in store.iter_mut().enumerate() {
        let grads = t.grad().expect("checked above").to_vec();
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        let values = t.values_mut();
        for i in 0..values.len() {
            let g = grads[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        t.zero_grad();
    }
    Ok(())
}
