pub mod embed;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod learner;
pub mod linalg;
pub mod metrics;
pub mod probe;
pub mod replay;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
