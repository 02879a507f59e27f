//! Few-shot grayscale image classification built from scratch in double
//! precision: a channel-attention convolutional embedding feeds a
//! prototype-anchored, densely connected graph convolutional classifier,
//! trained and evaluated episodically on N-way K-shot tasks. Includes a
//! reverse-mode autodiff tensor core, a synthetic dataset generator with a
//! controllable per-angle feature deviation, and a CLI for the whole
//! workflow.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod checks;
pub mod data;
pub mod distribution;
pub mod embedding;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tensor;

pub use error::{DataError, Error, TensorError};
pub use graph::{Graph, NodeId};
pub use optim::{Gradients, ParameterStore};
pub use tensor::Tensor;
