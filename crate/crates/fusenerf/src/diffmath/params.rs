use std::collections::HashMap;

use crate::error::{Error, Result};

/// Handle to a named parameter array inside a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named dense arrays of trainable values plus same-shaped gradient buffers.
///
/// Every trainable piece of the system (MLP weights, feature volumes) lives
/// here; the tape accumulates gradients into the matching buffers during
/// [`Tape::backward`](super::Tape::backward).
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    index: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a new parameter array. The gradient buffer starts zeroed.
    pub fn register(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("parameter '{name}' already registered")));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::Contract(format!(
                "parameter '{name}': shape {shape:?} holds {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter '{name}' value at index {i}")));
        }
        let id = ParamId(self.names.len());
        self.names.push(name.to_string());
        self.shapes.push(shape.to_vec());
        self.grads.push(vec![0.0; values.len()]);
        self.values.push(values);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Look up a parameter that must exist, e.g. when re-attaching a model
    /// to a store loaded from a checkpoint.
    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Contract(format!("parameter '{name}' not found in store")))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.grads[id.0]
    }

    /// Value and gradient buffers of one parameter, borrowed together.
    pub(crate) fn value_and_grad_mut(&mut self, id: ParamId) -> (&[f64], &mut [f64]) {
        (&self.values[id.0], &mut self.grads[id.0])
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar values across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    /// Error naming the first parameter holding a non-finite value, if any.
    pub fn check_values_finite(&self) -> Result<()> {
        for id in self.ids() {
            if let Some(i) = self.values[id.0].iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "parameter '{}' value at index {i}",
                    self.names[id.0]
                )));
            }
        }
        Ok(())
    }

    /// Error naming the first parameter holding a non-finite gradient, if any.
    pub fn check_grads_finite(&self) -> Result<()> {
        for id in self.ids() {
            if let Some(i) = self.grads[id.0].iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter '{}' at index {i}",
                    self.names[id.0]
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn register_and_lookup() {
        let mut store = ParameterStore::new();
        let id = store.register("w", &[2, 3], vec![1.0; 6]).unwrap();
        assert_eq!(store.id("w"), Some(id));
        assert_eq!(store.shape(id), &[2, 3]);
        assert_eq!(store.grad(id), &[0.0; 6]);
        assert_eq!(store.scalar_count(), 6);
    }

    #[test]
    fn duplicate_name_rejected() {
        let mut store = ParameterStore::new();
        store.register("w", &[1], vec![0.0]).unwrap();
        assert!(store.register("w", &[1], vec![0.0]).is_err());
    }

    #[test]
    fn shape_len_mismatch_rejected() {
        let mut store = ParameterStore::new();
        assert!(store.register("w", &[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn non_finite_values_named() {
        let mut store = ParameterStore::new();
        let err = store.register("w", &[2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(err.to_string().contains("'w'"), "{err}");

        let mut store = ParameterStore::new();
        let id = store.register("ok", &[1], vec![1.0]).unwrap();
        store.value_mut(id)[0] = f64::INFINITY;
        assert!(store.check_values_finite().is_err());
    }

    #[test]
    fn zero_grads_clears() {
        let mut store = ParameterStore::new();
        let id = store.register("w", &[2], vec![1.0, 2.0]).unwrap();
        store.grad_mut(id).copy_from_slice(&[3.0, 4.0]);
        store.zero_grads();
        assert_eq!(store.grad(id), &[0.0, 0.0]);
    }
}
