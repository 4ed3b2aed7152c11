//! Adam optimizer over flat parameter buffers.

use super::DiffError;
use serde::{Deserialize, Serialize};

/// Optimizer hyperparameters. The learning rate is the only field the
/// training schedule touches; the moment decays stay at their usual values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates, one slot per parameter tensor.
/// Slots are allocated on the first step and keyed by position, so the
/// caller must pass parameters in a stable order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub slots: Vec<AdamSlot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update across every named parameter buffer.
///
/// `params` and `grads` are parallel: `grads[k]` is the gradient of
/// `params[k]`. Rejects non-finite gradients by parameter name so a blown-up
/// loss is reported instead of silently corrupting the weights.
pub fn adam_step(
    config: &AdamConfig,
    state: &mut AdamState,
    params: &mut [(&str, &mut [f64])],
    grads: &[&[f64]],
) -> Result<(), DiffError> {
    if params.len() != grads.len() {
        return Err(DiffError::ShapeMismatch {
            op: "adam_step",
            expected: format!("{} gradient buffers", params.len()),
            found: format!("{}", grads.len()),
        });
    }
    if state.slots.is_empty() {
        state.slots = params
            .iter()
            .map(|(_, p)| AdamSlot {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
            })
            .collect();
    }
    if state.slots.len() != params.len() {
        return Err(DiffError::ShapeMismatch {
            op: "adam_step",
            expected: format!("{} optimizer slots", params.len()),
            found: format!("{}", state.slots.len()),
        });
    }

    for ((name, param), (grad, slot)) in params
        .iter_mut()
        .zip(grads.iter().zip(state.slots.iter_mut()))
    {
        if param.len() != grad.len() || param.len() != slot.m.len() {
            return Err(DiffError::ShapeMismatch {
                op: "adam_step",
                expected: format!("{} elements for {name}", param.len()),
                found: format!("{}", grad.len()),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(DiffError::NonFiniteGradient {
                name: (*name).to_string(),
            });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - config.beta1.powi(t);
    let bias2 = 1.0 - config.beta2.powi(t);

    for ((_, param), (grad, slot)) in params
        .iter_mut()
        .zip(grads.iter().zip(state.slots.iter_mut()))
    {
        for i in 0..param.len() {
            let g = grad[i];
            slot.m[i] = config.beta1 * slot.m[i] + (1.0 - config.beta1) * g;
            slot.v[i] = config.beta2 * slot.v[i] + (1.0 - config.beta2) * g * g;
            let m_hat = slot.m[i] / bias1;
            let v_hat = slot.v[i] / bias2;
            param[i] -= config.lr * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}
