//! Bicephalous convolutional autoencoders for lossy compression of sparse
//! TPC detector wedges.

pub mod bench;
pub mod codec;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod train;

mod binio;

pub use error::{Error, FormatError, Result};
