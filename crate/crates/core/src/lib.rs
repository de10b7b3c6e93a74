//! Visualization regularizer (VR) for neural-network weights.
//!
//! The incoming weights of one fully connected layer are reshaped into 2D
//! "slabs" with the spatial layout of that layer's input, convolved with a
//! high-pass kernel (the 3x3 Laplacian by default) and penalized by the L1 or
//! squared-L2 norm of the response. Smooth slabs score low, noisy ones high.
//!
//! Modules:
//!
//! - [`conv`]: same-size relative-indexed convolution and kernel flipping
//! - [`visloss`]: VL1/VL2 losses and their double-convolution gradients
//! - [`tikhonov`]: the sparse matrix `Gamma` with `VL2 = ||Gamma w||^2`
//! - [`network`]: small feed-forward nets with manual backprop
//! - [`trainer`]: SGD with momentum, learning-rate schedules, metrics
//! - [`data`]: MNIST IDX and CIFAR-10 binary readers/writers, minibatching
//! - [`visualize`]: node visualizations, PGM/PNG export, loss tables
//! - [`config`]: experiment config files
//! - [`verify`]: self-check suites comparing fast paths against [`oracle`]

pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod network;
pub mod oracle;
pub mod tikhonov;
pub mod trainer;
pub mod verify;
pub mod visloss;
pub mod visualize;

pub use conv::{conv_same, flip, Matrix2D, RelKernel};
pub use error::{Error, Result};
pub use visloss::{Norm, VrWeights};
