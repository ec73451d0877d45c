//! Semi-supervised fine-grained sketch-based image retrieval with
//! relational knowledge distillation.

pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod distill;
pub mod ema;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod optim;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
