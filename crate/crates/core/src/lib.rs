//! Offsite fine-tuning for small decoder-only transformers.

pub mod accounting;
pub mod artifact;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod model;
pub mod pretrained;
pub mod surgery;
pub mod tensor;
pub mod tuning;

pub use error::{Error, Result};
