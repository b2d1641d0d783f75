//! Minimum word error rate training for attention-based encoder/decoder models.

pub mod data;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
