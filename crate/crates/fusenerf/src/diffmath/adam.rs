use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ParameterStore;

/// Adam hyperparameters. Defaults: lr 1e-3, beta1 0.9, beta2 0.999,
/// eps 1e-8, no decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// When set, the learning rate decays exponentially to
    /// `0.1 * learning_rate` over this many steps.
    pub decay_steps: Option<u64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_steps: None,
        }
    }
}

/// First/second moment accumulators per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParameterStore, config: AdamConfig) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.value(id).len()]).collect();
        AdamState { config, m, v, step: 0 }
    }

    /// Rebuild from checkpointed moment arrays.
    pub fn from_parts(
        store: &ParameterStore,
        config: AdamConfig,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        step: u64,
    ) -> Result<Self> {
        if m.len() != store.len() || v.len() != store.len() {
            return Err(Error::Contract("adam state: moment count mismatch".into()));
        }
        for id in store.ids() {
            let n = store.value(id).len();
            if m[index(id)].len() != n || v[index(id)].len() != n {
                return Err(Error::Contract(format!(
                    "adam state: moment shape mismatch for '{}'",
                    store.name(id)
                )));
            }
        }
        Ok(AdamState { config, m, v, step })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Effective learning rate at the *next* step (after decay).
    pub fn current_learning_rate(&self) -> f64 {
        match self.config.decay_steps {
            Some(total) if total > 0 => {
                let t = (self.step as f64 / total as f64).min(1.0);
                self.config.learning_rate * 0.1f64.powf(t)
            }
            _ => self.config.learning_rate,
        }
    }

    /// One bias-corrected Adam update over every parameter in the store.
    ///
    /// Fails (before touching any value) on a non-finite gradient, and fails
    /// after the update if any parameter became non-finite.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Contract(
                "adam state was built for a different parameter store".into(),
            ));
        }
        store.check_grads_finite()?;
        let lr = self.current_learning_rate();
        self.step += 1;
        let t = self.step as f64;
        let AdamConfig { beta1, beta2, epsilon, .. } = self.config;
        let bc1 = 1.0 - beta1.powf(t);
        let bc2 = 1.0 - beta2.powf(t);

        for id in store.ids().collect::<Vec<_>>() {
            let i = index(id);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let grad = store.grad(id).to_vec();
            let values = store.value_mut(id);
            values
                .par_iter_mut()
                .zip(m.par_iter_mut())
                .zip(v.par_iter_mut())
                .zip(grad.par_iter())
                .for_each(|(((p, m), v), &g)| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
                });
        }
        store.check_values_finite()
    }
}

fn index(id: super::params::ParamId) -> usize {
    id.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64) -> ParameterStore {
        let mut store = ParameterStore::new();
        store.register("p", &[1], vec![p]).unwrap();
        store
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut store = scalar_store(1.5);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        adam.step(&mut store).unwrap();
        let id = store.id("p").unwrap();
        assert_eq!(store.value(id), &[1.5]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Hand-evaluated update at t = 1 with g = 1:
        //   m = 0.1, v = 0.001, m_hat = 1, v_hat = 1
        //   delta = lr * 1 / (1 + eps) ~= lr
        let mut store = scalar_store(0.0);
        let id = store.id("p").unwrap();
        store.grad_mut(id)[0] = 1.0;
        let cfg = AdamConfig { learning_rate: 0.1, ..AdamConfig::default() };
        let mut adam = AdamState::new(&store, cfg);
        adam.step(&mut store).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((store.value(id)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut store = scalar_store(1.0);
        let id = store.id("p").unwrap();
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut prev = 1.0;
        for _ in 0..2 {
            store.grad_mut(id)[0] = 1.0;
            adam.step(&mut store).unwrap();
            let cur = store.value(id)[0];
            assert!(cur < prev);
            prev = cur;
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut store = scalar_store(0.0);
        let id = store.id("p").unwrap();
        store.grad_mut(id)[0] = f64::NAN;
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let err = adam.step(&mut store).unwrap_err();
        assert!(err.to_string().contains("'p'"), "{err}");
    }

    #[test]
    fn step_counter_increments_by_one() {
        let mut store = scalar_store(0.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        for expect in 1..=5 {
            adam.step(&mut store).unwrap();
            assert_eq!(adam.step_count(), expect);
        }
    }

    #[test]
    fn decay_reaches_tenth_at_horizon() {
        let store = scalar_store(0.0);
        let cfg = AdamConfig {
            learning_rate: 1.0,
            decay_steps: Some(100),
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&store, cfg);
        assert!((adam.current_learning_rate() - 1.0).abs() < 1e-12);
        adam.step = 100;
        assert!((adam.current_learning_rate() - 0.1).abs() < 1e-12);
    }
}
