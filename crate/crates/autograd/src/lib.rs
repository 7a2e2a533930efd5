//! A small reverse-mode automatic differentiation engine.
//!
//! Values are dense row-major `f64` tensors. A [`Graph`] records a forward
//! pass op by op; [`Graph::backward`] walks it in reverse and returns the
//! gradients of leaf nodes. Named parameters live in a [`ParamStore`] and are
//! bound into a graph with [`Graph::param`] (trainable) or [`Graph::frozen`].
//!
//! The op set is the one needed by small vision transformers, convolutional
//! encoders and their dense heads: linear/conv layers, layer norm, fused
//! multi-head attention, bilinear resizing, crop-and-resize pooling and the
//! usual losses.
//!
//! ```
//! use autograd::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! store.insert("w", Tensor::new(&[2, 1], vec![0.5, -1.0]));
//! let mut g = Graph::new();
//! let x = g.constant(Tensor::new(&[1, 2], vec![2.0, 3.0]));
//! let w = g.param(&store, "w");
//! let y = g.linear(x, w, None);
//! let loss = g.sum(y);
//! let grads = g.backward(loss);
//! let gw = g.param_grads(&grads, &store);
//! assert_eq!(gw["w"].data(), &[2.0, 3.0]);
//! ```

mod graph;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{sigmoid, Gradients, Graph, Roi, Var};
pub use optim::{accumulate, clip_grad_norm, AdamW};
pub use params::{init, ParamStore};
pub use tensor::Tensor;
