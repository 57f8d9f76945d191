//! AdamW with decoupled weight decay and a step learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments for each trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Option<Vec<f64>>>,
    v: Vec<Option<Vec<f64>>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let slots = || {
            store
                .tensors()
                .iter()
                .map(|t| t.trainable.then(|| vec![0.0; t.data.len()]))
                .collect()
        };
        Self {
            m: slots(),
            v: slots(),
            step: 0,
        }
    }
}

/// One bias-corrected AdamW update. Frozen tensors are left untouched.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state tracks {} tensors, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (id, g) in grads.iter() {
        let i = id.index();
        let (Some(m), Some(v)) = (state.m[i].as_mut(), state.v[i].as_mut()) else {
            return Err(Error::InvalidArgument(format!(
                "gradient for frozen tensor {}",
                store.tensor(id).name
            )));
        };
        let p = store.get_mut(id);
        if p.len() != g.len() {
            return Err(Error::InvalidArgument("gradient shape mismatch".into()));
        }
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p[k]);
        }
    }
    Ok(())
}

/// `base_lr · decay^(milestones passed)`; a milestone counts once `epoch`
/// reaches it.
pub fn lr_at(epoch: usize, base_lr: f64, milestones: &[usize], decay: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| epoch >= m).count() as i32;
    base_lr * decay.powi(passed)
}
