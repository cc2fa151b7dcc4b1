//! Function-matching knowledge distillation at desk scale.

pub mod augment;
pub mod data;
pub mod error;
pub mod harness;
pub mod losses;
pub mod models;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
