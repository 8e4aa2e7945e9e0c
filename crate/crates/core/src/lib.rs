pub mod autoencoder;
pub mod checkpoint;
pub mod dataset;
pub mod decision;
pub mod engine;
pub mod error;
pub mod eval;
pub mod models;
pub mod nn;
pub mod pngio;
pub mod synth;
pub mod train;
pub mod types;

pub use error::{Error, Result};
