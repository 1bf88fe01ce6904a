//! Two-stage parameter-efficient fine-tuning on a toy decoder-only transformer.

pub mod adapters;
pub mod analysis;
pub mod data;
pub mod error;
pub mod io;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
