//! Empathetic dialogue model. Tracks how emotion, meaning and keywords shift
//! from turn to turn and conditions response decoding on the result.

pub mod config;
pub mod cpplm;
pub mod corpus;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod generation;
pub mod gradcheck;
pub mod model;
pub mod keypairs;
pub mod nn;
pub mod params;
pub mod tape;
pub mod training;
pub mod transition;

pub use error::{Error, Result};
