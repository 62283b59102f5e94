//! Class-incremental learning with explanation-consistency replay.
//!
//! The crate is organised bottom-up: [`tensor`], [`kernels`] and [`autograd`]
//! provide a small double-backprop capable engine; [`model`] and
//! [`saliency`] build a classifier and its explanations on top; [`memory`],
//! [`strategies`] and [`eval`] implement the continual-learning loop; and
//! [`experiment`] ties everything to on-disk configs and run directories.

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod kernels;
pub mod memory;
pub mod model;
pub mod par;
pub mod saliency;
pub mod scenario;
pub mod seed;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
