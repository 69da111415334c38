pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod feature_net;
pub mod generator;
pub mod objectives;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
