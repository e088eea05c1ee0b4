pub mod analyze;
pub mod corrupt;
pub mod data;
pub mod era;
pub mod error;
pub mod experiment;
pub mod grow;
pub mod nn;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
