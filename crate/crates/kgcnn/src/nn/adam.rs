//! Bias-corrected Adam update over a network state.

use crate::error::{Error, Result};

use super::engine::{Gradients, NetState};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub fn adam_step(state: &mut NetState, grads: &Gradients, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != state.layers.len() {
        return Err(Error::shape("gradient/state layer count mismatch".to_string()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (ls, lg) in state.layers.iter_mut().zip(grads.iter()) {
        if lg.len() != ls.params.len() {
            return Err(Error::shape("gradient/param count mismatch".to_string()));
        }
        for (p, g) in ls.params.iter_mut().zip(lg.iter()) {
            if g.len() != p.value.len() {
                return Err(Error::shape("gradient/param length mismatch".to_string()));
            }
            for i in 0..g.len() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                p.value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
    Ok(())
}
