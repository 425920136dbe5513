pub mod error;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
