//! Inter-layer collision (IC) units for convolutional networks.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors, a reverse-mode tape and gradient checking
//! * [`nn`]: convolution, depthwise convolution, batch norm, pooling, dense, loss
//! * [`ic`]: IC neuron, IC convolution, rough feature, IC residual blocks
//! * [`geometry`]: the collision model and hyperplane-rotation analysis
//! * [`zoo`]: declarative model specs, network building, cost accounting
//! * [`train`]: SGD with momentum, step schedule, train/eval loops
//! * [`data`]: XOR, IDX and CIFAR-10 binary ingestion, normalization, augmentation
//! * [`verify`]: seeded property checks shared by the CLI and the test suites
//! * [`cli`]: the `icnet` command-line front end

#[cfg(feature = "cli")]
pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod ic;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
