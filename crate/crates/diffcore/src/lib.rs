//! Differentiable computation substrate.
//!
//! A [`Graph`] records tensor operations as they are evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the record in reverse creation
//! order and accumulates gradients for every node that requires them. Nodes are
//! appended in evaluation order, so creation order is already a topological
//! order and the traversal is fully deterministic.
//!
//! Model parameters live in a [`ParamStore`] and are copied into a graph with
//! [`Graph::param`]. After the backward pass [`Graph::accumulate_param_grads`]
//! adds the graph's parameter gradients into the store, which lets callers run
//! one graph per sample and reduce in a fixed sample order before calling
//! [`Sgd::step`].

mod check;
mod error;
mod graph;
mod kernels;
mod optim;
mod params;
pub mod rotation;
mod tensor;

pub use check::{check_gradients, CheckConfig, CheckReport, InputReport};
pub use error::DiffError;
pub use graph::{BlendWeights, Graph, Var};
pub use optim::Sgd;
pub use params::{glorot_uniform, ParamStore};
pub use tensor::Tensor;

pub type Result<T, E = DiffError> = std::result::Result<T, E>;
