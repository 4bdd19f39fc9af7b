//! Audio captioning with a residual convolutional encoder and two transformer
//! decoders whose log-probabilities are summed.
//!
//! The crate carries its own small tensor library ([`autograd`], [`nn`],
//! [`optim`]) so that every piece of the model can be trained and
//! gradient-checked on a CPU.

pub mod audio;
pub mod autograd;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod optim;
pub mod prepare;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod text;
pub mod train;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
