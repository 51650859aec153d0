use std::collections::BTreeMap;

use rand::Rng;

use crate::{DiffError, Result, Tensor};

/// Named parameter tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(DiffError::DuplicateParam(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    /// Sets every gradient buffer to zeros.
    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(Tensor::zero_grad);
    }

    /// Multiplies every present gradient by `c`.
    pub fn scale_grads(&mut self, c: f64) {
        for t in self.entries.values_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|v| *v *= c);
            }
        }
    }

    /// Replaces the values of `name` keeping the stored shape.
    pub fn set_values(&mut self, name: &str, values: &Tensor) -> Result<()> {
        let t = self
            .entries
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        if t.shape() != values.shape() {
            return Err(DiffError::ParamShape {
                name: name.to_string(),
                expected: t.shape().to_vec(),
                actual: values.shape().to_vec(),
            });
        }
        t.data_mut().copy_from_slice(values.data());
        Ok(())
    }
}

/// Uniform initialization in `[-a, a]` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-a..=a)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}
