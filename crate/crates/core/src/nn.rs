//! Layer helpers over the differentiable graph. Weights live in a
//! [`ParamStore`] under dotted names; a [`Loader`] records them into a graph.

use std::collections::BTreeMap;

use diffcore::{glorot_uniform, Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::Result;

/// Records named parameters into a graph, either trainable or frozen, or
/// resolves them to nodes that already exist in the graph.
#[derive(Clone, Copy)]
pub struct Loader<'a> {
    pub store: &'a ParamStore,
    pub frozen: bool,
    pub bound: Option<&'a BTreeMap<String, Var>>,
}

impl<'a> Loader<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            frozen: false,
            bound: None,
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            frozen: true,
            bound: None,
        }
    }

    /// Names found in `bound` resolve to those nodes; the rest load frozen
    /// from `store`.
    pub fn bound(store: &'a ParamStore, bound: &'a BTreeMap<String, Var>) -> Self {
        Self {
            store,
            frozen: true,
            bound: Some(bound),
        }
    }

    pub fn get(&self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.and_then(|b| b.get(name)) {
            return Ok(*v);
        }
        Ok(if self.frozen {
            g.frozen_param(self.store, name)?
        } else {
            g.param(self.store, name)?
        })
    }

    /// `(weight, bias)` of the layer called `name`.
    pub fn layer(&self, g: &mut Graph, name: &str) -> Result<(Var, Var)> {
        Ok((self.get(g, &format!("{name}.w"))?, self.get(g, &format!("{name}.b"))?))
    }
}

/// `x W + b` for a vector `x: [in]` and `W: [in, out]`.
pub fn linear(g: &mut Graph, w: Var, b: Var, x: Var) -> Var {
    let n = g.value(x).numel();
    let row = g.reshape(x, &[1, n]);
    let out = g.matmul(row, w);
    let m = g.value(out).numel();
    let out = g.reshape(out, &[m]);
    g.add(out, b)
}

/// `X W + b` applied to every row of `x: [n, in]`.
pub fn linear_rows(g: &mut Graph, w: Var, b: Var, x: Var) -> Var {
    let out = g.matmul(x, w);
    g.add_row(out, b)
}

pub fn add_linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    store.insert(format!("{name}.w"), glorot_uniform(rng, &[fan_in, fan_out], fan_in, fan_out))?;
    store.insert(format!("{name}.b"), Tensor::zeros([fan_out]))?;
    Ok(())
}

/// Convolution weights `[out, in, k, k]`.
pub fn add_conv(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
    let w = glorot_uniform(rng, &[cout, cin, k, k], cin * k * k, cout * k * k);
    store.insert(format!("{name}.w"), w)?;
    store.insert(format!("{name}.b"), Tensor::zeros([cout]))?;
    Ok(())
}

/// Transposed convolution weights `[in, out, k, k]`.
pub fn add_conv_transpose(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<()> {
    let w = glorot_uniform(rng, &[cin, cout, k, k], cin * k * k, cout * k * k);
    store.insert(format!("{name}.w"), w)?;
    store.insert(format!("{name}.b"), Tensor::zeros([cout]))?;
    Ok(())
}

/// Temporal convolution weights `[out, in, k]`.
pub fn add_temporal(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize, k: usize) -> Result<()> {
    let w = glorot_uniform(rng, &[cout, cin, k], cin * k, cout * k);
    store.insert(format!("{name}.w"), w)?;
    store.insert(format!("{name}.b"), Tensor::zeros([cout]))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_matches_loop() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        add_linear(&mut store, &mut rng, "l", 3, 2).unwrap();
        store.get_mut("l.b").unwrap().data_mut().copy_from_slice(&[0.5, -1.0]);
        let mut g = Graph::new();
        let (w, b) = Loader::trainable(&store).layer(&mut g, "l").unwrap();
        let x = g.input(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = linear(&mut g, w, b, x);
        let wv = store.get("l.w").unwrap().data();
        for o in 0..2 {
            let want: f64 = (0..3).map(|i| (i + 1) as f64 * wv[i * 2 + o]).sum::<f64>() + [0.5, -1.0][o];
            assert!((g.data(y)[o] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn frozen_loader_blocks_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        add_linear(&mut store, &mut rng, "l", 2, 1).unwrap();
        let mut g = Graph::new();
        let (w, b) = Loader::frozen(&store).layer(&mut g, "l").unwrap();
        let x = g.input(Tensor::vector(vec![1.0, 2.0]));
        let y = linear(&mut g, w, b, x);
        let loss = g.sum(y);
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_none());
        assert!(g.grad(x).is_some());
    }
}
