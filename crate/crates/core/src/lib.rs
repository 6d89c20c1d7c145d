pub mod audio;
pub mod dsp;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod neural;
pub mod spatial;
pub mod volume;

pub use error::{Error, Result};
