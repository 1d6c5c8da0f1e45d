//! Training, conversion and inference for DenseShift networks: neural
//! networks whose weights are signed powers of two with no zero value.
//!
//! The crate is organised by concern:
//!
//! * [`nn`] is a small deterministic training engine (conv/linear/batchnorm,
//!   SGD with momentum, cosine schedule) whose weighted layers take their
//!   effective weights from a pluggable provider.
//! * [`reparam`] holds the sign-scale latent parameterisation of zero-free
//!   power-of-two weights together with its straight-through backward pass.
//! * [`quantize`] holds the quantizer baselines used for comparison.
//! * [`freeze`] measures weight freezing and records latent traces.
//! * [`kernel`] packs discrete weights and runs the fixed-point MAC kernels.
//! * [`convert`] rewrites shift networks with zero weights into zero-free ones.
//! * [`data`] loads MNIST/CIFAR-10 and generates synthetic data.

pub mod convert;
pub mod data;
pub mod error;
pub mod freeze;
pub mod kernel;
pub mod nn;
pub mod quantize;
pub mod reparam;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
