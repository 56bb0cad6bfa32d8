//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass. [`Graph::backward`]
//! walks the record in reverse and returns a [`Gradients`] map keyed by the
//! leaf [`Var`]s that were registered with [`Graph::param`].
//!
//! ```
//! use lst_core::diffcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
//! let sq = g.mul(x, x).unwrap();
//! let s = g.sum(sq);
//! let loss = g.scale(s, 0.5);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[1.0, -2.0, 0.5]);
//! ```

mod graph;
pub mod gradcheck;
mod tensor;

pub use graph::{Gradients, Graph, Var, LOG_FLOOR};
pub use tensor::Tensor;

pub(crate) use graph::softmax_data;

/// Row-wise softmax of a plain tensor along its last axis (no tape).
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let n = t.last_dim();
    Tensor::from_parts(t.shape().to_vec(), softmax_data(t.data(), t.rows(), n, 1))
}
