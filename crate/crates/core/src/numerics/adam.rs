use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::ParameterSet;

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Paths that currently hold moment buffers.
    pub fn tracked(&self) -> impl Iterator<Item = &str> {
        self.first.keys().map(String::as_str)
    }

    fn sync(&mut self, params: &ParameterSet) {
        self.first.retain(|k, _| params.is_trainable(k));
        self.second.retain(|k, _| params.is_trainable(k));
        for path in params.trainable_paths() {
            let n = params.get(path).map_or(0, |t| t.numel());
            self.first
                .entry(path.to_string())
                .or_insert_with(|| vec![0.0; n]);
            self.second
                .entry(path.to_string())
                .or_insert_with(|| vec![0.0; n]);
        }
    }
}

/// One Adam update over the trainable parameters, then clears every
/// gradient slot. Parameters outside the trainable mask are never written.
pub fn adam_step(params: &mut ParameterSet, state: &mut AdamState) -> Result<()> {
    let trainable: Vec<String> = params.trainable_paths().map(str::to_string).collect();
    for path in &trainable {
        if params.get(path).and_then(|t| t.grad()).is_none() {
            return Err(Error::contract(format!(
                "trainable parameter {path:?} has no gradient"
            )));
        }
    }
    state.sync(params);
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for path in &trainable {
        let tensor = params.get_mut(path).expect("checked above");
        let grad = tensor.grad().expect("checked above").to_vec();
        let m = state.first.get_mut(path).expect("synced");
        let v = state.second.get_mut(path).expect("synced");
        for (i, value) in tensor.data_mut().iter_mut().enumerate() {
            let g = grad[i];
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g;
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *value -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    params.clear_grads();
    Ok(())
}
