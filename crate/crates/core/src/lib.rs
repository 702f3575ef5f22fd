//! Consensus-gated multi-teacher masked distillation for vision transformers.

pub mod adapter;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gating;
pub mod gradcheck;
pub mod inspect;
pub mod loss;
pub mod masking;
pub mod nn;
pub mod optim;
pub mod probe;
pub mod ops;
pub mod rng;
pub mod teachers;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vit;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Tensor};
