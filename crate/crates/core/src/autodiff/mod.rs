//! A small reverse-mode automatic differentiation engine.
//!
//! The operator set is closed: stride-1 zero-padded convolution, batch
//! normalization, ReLU, linear, global average pooling, softmax, tempered
//! logsumexp, elementwise arithmetic, reductions and gather-by-index. That is
//! everything the segmentation model, the value net and the training losses
//! are built from.
//!
//! ```
//! use calsfda::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::<f64>::new();
//! let w = g.param(Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap());
//! let x = g.constant(Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap());
//! let wx = g.mul(w, x).unwrap();
//! let loss = g.sum(wx);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0, 3.0]);
//! ```

mod graph;
mod kernels;
mod tensor;

pub use graph::{BinaryKind, BnMode, ChannelStats, Gradients, Graph, UnaryKind, Var};
pub use kernels::THREADS_ENV;
pub use tensor::{Scalar, Tensor};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight given to the batch statistics when updating running estimates.
pub const BN_MOMENTUM: f64 = 0.1;
