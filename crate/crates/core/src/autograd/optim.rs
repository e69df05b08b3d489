use crate::autograd::ParamStore;
use crate::error::{Error, Result};

/// Adam hyperparameters. `beta1`, `beta2` and `eps` default to 0.9, 0.999, 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter of one store.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam update over every trainable parameter, then zeroes the
/// gradients. Frozen parameters are skipped.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::State(format!(
            "optimizer tracks {} parameters, store has {}",
            state.m.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let t = store.get(id);
        if t.requires_grad() && t.grad().is_none() {
            return Err(Error::State(format!("parameter {:?} has no gradient", store.name(id))));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for id in ids {
        let t = store.get_mut(id);
        if !t.requires_grad() {
            continue;
        }
        let grad = t.take_grad().expect("checked above");
        let (m, v) = (&mut state.m[id.index()], &mut state.v[id.index()]);
        for (j, p) in t.data_mut().iter_mut().enumerate() {
            let g = grad[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        let mut grad = grad;
        grad.iter_mut().for_each(|x| *x = 0.0);
        t.restore_grad(Some(grad));
    }
    Ok(())
}
