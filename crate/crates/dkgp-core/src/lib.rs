//! Deep-kernel Gaussian process regression.
//!
//! A GP regression toolkit where the kernel's inputs are learned features:
//! an MLP or a Kolmogorov-Arnold network (spline-parameterized activations)
//! maps inputs into a low-dimensional latent space, and an ARD-RBF kernel
//! over that space drives exact or structured-interpolation inference. Both
//! the feature map and the kernel hyperparameters are trained jointly by
//! minimizing the exact negative log marginal likelihood with a small
//! reverse-mode tape.
//!
//! Module map:
//! - [`linalg`]: dense/sparse matrices, Cholesky, Jacobi eigensolver, CG, Lanczos
//! - [`autodiff`]: reverse-mode tape over matrix primitives, gradient checking
//! - [`features`]: B-spline bases, KAN and MLP layers, initialization, serialization
//! - [`kernels`]: ARD-RBF and deep kernel matrices
//! - [`gp`]: exact log marginal likelihood, gradients, posterior prediction
//! - [`scalable`]: structured kernel interpolation (grids, Kronecker algebra, product kernels)
//! - [`data`]: CSV loading, ECDF normalization, split plans, metrics
//! - [`train`]: Adam, learning-rate schedule, the full-batch fit loop
//! - [`models`]: named model presets shared by the CLI and benchmarks

pub mod autodiff;
pub mod data;
pub mod error;
pub mod features;
pub mod gp;
pub mod kernels;
pub mod linalg;
pub mod models;
pub mod par;
pub mod scalable;
pub mod train;

pub use error::{Error, Result};
