//! Polarity-congruity multimodal network for sarcasm detection.

pub mod atomic;
pub mod autograd;
pub mod composition;
pub mod config;
pub mod encoding;
pub mod error;
pub mod eval;
pub mod feature_store;
pub mod fusion;
pub mod model;
pub mod params;
pub mod polarity;
pub mod rgat;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
