//! Joint image classification and weakly-supervised region-of-interest
//! localization built on a small reverse-mode differentiation core.

pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod overlay;
pub mod stn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
