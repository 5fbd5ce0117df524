use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{AdamState, Scalar, Tensor};
use crate::rng::SeededRng;

/// Named trainable parameters and non-trainable buffers (batch-norm running
/// statistics). Iteration order is the name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: BTreeMap<String, Tensor<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name:?}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing buffer {name:?}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name:?}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("missing buffer {name:?}")))
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.buffers
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    /// One Adam update of every parameter that has a gradient in `grads`.
    pub fn adam_step(&mut self, adam: &mut AdamState<T>, grads: &[(String, Tensor<T>)]) -> Result<()> {
        let by_name: BTreeMap<&str, &Tensor<T>> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        if let Some((missing, _)) = by_name.iter().find(|(n, _)| !self.params.contains_key(**n)) {
            return Err(Error::contract(format!("gradient for unknown parameter {missing:?}")));
        }
        adam.step(
            self.params
                .iter_mut()
                .filter_map(|(name, p)| by_name.get(name.as_str()).map(|g| (name.as_str(), p, *g))),
        )
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Moves every entry of `other` into `self`, replacing same-named ones.
    pub fn absorb(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }

    /// Keeps only entries whose names start with `prefix`.
    pub fn retain_prefix(&mut self, prefix: &str) {
        self.params.retain(|k, _| k.starts_with(prefix));
        self.buffers.retain(|k, _| k.starts_with(prefix));
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// He-uniform weight of `shape` with fan-in `fan_in`.
    pub(crate) fn init_weight(&mut self, name: String, shape: &[usize], fan_in: usize, rng: &mut SeededRng) {
        let bound = (6.0 / fan_in as f64).sqrt();
        self.insert_param(name, Tensor::from_fn(shape, |_| T::of(rng.uniform(-bound, bound))));
    }

    pub(crate) fn init_bias(&mut self, name: String, len: usize, fan_in: usize, rng: &mut SeededRng) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        self.insert_param(name, Tensor::from_fn(&[len], |_| T::of(rng.uniform(-bound, bound))));
    }

    pub(crate) fn init_batch_norm(&mut self, prefix: &str, features: usize) {
        self.insert_param(format!("{prefix}.gamma"), Tensor::full(&[features], T::one()));
        self.insert_param(format!("{prefix}.beta"), Tensor::zeros(&[features]));
        self.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[features]));
        self.insert_buffer(format!("{prefix}.running_var"), Tensor::full(&[features], T::one()));
    }
}
