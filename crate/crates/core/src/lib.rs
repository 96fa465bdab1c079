//! Two-party vertical federated learning simulator.

pub mod classification;
pub mod correction;
pub mod data;
pub mod encoding;
pub mod error;
pub mod estimation;
pub mod federation;
pub mod he;
pub mod matrix;
pub mod nn;
pub mod party;
pub mod protocol;
pub mod training;

pub use error::{Error, Result};
pub use matrix::Matrix;
