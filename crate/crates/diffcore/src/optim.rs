use std::collections::BTreeMap;

use crate::{DiffError, ParamStore, Result};

/// Stochastic gradient descent with heavy-ball momentum:
/// `v <- momentum * v + grad; p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    /// Zero velocity buffers shaped like every parameter in `store`.
    pub fn new(learning_rate: f64, momentum: f64, store: &ParamStore) -> Self {
        let velocity = store
            .iter()
            .map(|(name, t)| (name.to_string(), vec![0.0; t.numel()]))
            .collect();
        Self {
            learning_rate,
            momentum,
            velocity,
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Restores velocity buffers, e.g. from a checkpoint.
    pub fn set_velocity(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let slot = self
            .velocity
            .get_mut(name)
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))?;
        if slot.len() != values.len() {
            return Err(DiffError::ShapeData {
                shape: vec![slot.len()],
                expected: slot.len(),
                actual: values.len(),
            });
        }
        *slot = values;
        Ok(())
    }

    /// Applies one update and zeroes the gradients. Every parameter must carry
    /// a gradient buffer.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some((name, _)) = store.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(DiffError::MissingGrad(name.to_string()));
        }
        for (name, t) in store.iter_mut() {
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; t.numel()]);
            let grad = t.grad().expect("checked above").to_vec();
            for (vi, gi) in v.iter_mut().zip(&grad) {
                *vi = self.momentum * *vi + gi;
            }
            for (p, vi) in t.data_mut().iter_mut().zip(v.iter()) {
                *p -= self.learning_rate * vi;
            }
            t.zero_grad();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn store_with(p: f64, g: Option<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let mut t = Tensor::vector(vec![p]);
        if let Some(g) = g {
            t.accumulate_grad(&[g]);
        }
        s.insert("p", t).unwrap();
        s
    }

    #[test]
    fn plain_step_without_momentum() {
        let mut s = store_with(1.0, Some(2.0));
        let mut opt = Sgd::new(0.5, 0.0, &s);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[0.0]);
        assert_eq!(s.get("p").unwrap().grad().unwrap(), &[0.0]);
    }

    #[test]
    fn momentum_recurrence_over_two_steps() {
        let (lr, g) = (0.1, 3.0);
        let mut s = store_with(5.0, Some(g));
        let mut opt = Sgd::new(lr, 0.9, &s);
        opt.step(&mut s).unwrap();
        let p1 = s.get("p").unwrap().data()[0];
        assert!((5.0 - p1 - lr * g).abs() < 1e-15);
        s.get_mut("p").unwrap().accumulate_grad(&[g]);
        opt.step(&mut s).unwrap();
        let p2 = s.get("p").unwrap().data()[0];
        assert!((p1 - p2 - lr * 1.9 * g).abs() < 1e-14);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut s = store_with(0.25, Some(0.0));
        let mut opt = Sgd::new(1e-4, 0.9, &s);
        for _ in 0..3 {
            s.get_mut("p").unwrap().zero_grad();
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.get("p").unwrap().data(), &[0.25]);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut s = store_with(1.0, None);
        let mut opt = Sgd::new(0.1, 0.9, &s);
        assert_eq!(opt.step(&mut s), Err(DiffError::MissingGrad("p".into())));
    }
}
