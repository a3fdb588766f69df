//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::model::{GradientSet, Params};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            weight_decay: 5e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One AdamW update of a flat parameter vector. Entries whose `decay`
/// flag is false are not weight-decayed.
pub fn adamw_step(params: &mut [f64], grads: &[f64], decay: &[bool], state: &mut AdamState, cfg: &AdamWConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), decay.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let (b1, b2) = cfg.betas;
    let t = state.step as i32;
    let bias1 = 1.0 - b1.powi(t);
    let bias2 = 1.0 - b2.powi(t);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = b1 * state.m[k] + (1.0 - b1) * g;
        state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g;
        if decay[k] {
            params[k] *= 1.0 - cfg.lr * cfg.weight_decay;
        }
        let m_hat = state.m[k] / bias1;
        let v_hat = state.v[k] / bias2;
        params[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Optimizer bound to a [`Params`] layout.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: AdamState,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &Params, config: AdamWConfig) -> Self {
        Self {
            config,
            state: AdamState::new(params.len()),
            decay: params.decay_mask(),
        }
    }

    pub fn step(&mut self, params: &mut Params, grads: &GradientSet) {
        let mut flat = params.to_flat();
        adamw_step(&mut flat, &grads.to_flat(), &self.decay, &mut self.state, &self.config);
        params.set_flat(&flat);
    }

    pub fn steps_taken(&self) -> u64 {
        self.state.step
    }
}
