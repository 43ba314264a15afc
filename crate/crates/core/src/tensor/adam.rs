use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_error, Error, Result};
use crate::tensor::ParamStore;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment buffers per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update with bias correction. Parameters are visited in
    /// name order; moments are allocated lazily and stay shape-congruent
    /// with their parameters.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let cfg = self.config;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (name, tensor) in params.iter_mut() {
            let grad = grads
                .get(name)
                .ok_or_else(|| Error::Usage(format!("missing gradient for `{name}`")))?;
            if grad.len() != tensor.numel() {
                return Err(dim_error(tensor.shape(), grad.len()));
            }
            if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of `{name}` at flat index {bad} is {}",
                    grad[bad]
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let values = tensor.values_mut();
            for i in 0..grad.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "w",
            Tensor::new(vec![values.len()], values).unwrap().with_grad(),
        );
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters_exactly_unchanged() {
        let mut params = store_with(vec![0.7, -0.3]);
        let before = params.get("w").unwrap().values().to_vec();
        let mut state = AdamState::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![0.0, 0.0]);
        for _ in 0..5 {
            state.update(&mut params, &grads).unwrap();
        }
        assert_eq!(params.get("w").unwrap().values(), before.as_slice());
        assert_eq!(state.step_count(), 5);
    }

    #[test]
    fn first_step_displacement_is_learning_rate() {
        // bias-corrected first step: lr * g / (|g| + eps) ~ lr * sign(g)
        let cfg = AdamConfig::default();
        let mut params = store_with(vec![1.0]);
        let mut state = AdamState::new(cfg);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![3.7]);
        state.update(&mut params, &grads).unwrap();
        let moved = 1.0 - params.get("w").unwrap().values()[0];
        assert!((moved - cfg.learning_rate).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut params = store_with(vec![1.0]);
        let mut state = AdamState::new(AdamConfig::default());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), vec![f64::NAN]);
        match state.update(&mut params, &grads) {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("`w`")),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
