//! Minimal CPU tensor substrate: NHWC feature maps, im2col convolutions with
//! hand-written backward passes, and Adam.
//!
//! Every network in the crate is a fixed composition of these layers, so
//! backpropagation is spelled out per network instead of going through a
//! dynamic tape. All kernels are single-threaded and deterministic.

mod layers;
mod map;
mod params;
mod scalar;

pub use layers::*;
pub use map::Map;
pub use params::{Adam, AdamConfig, AdamState, Grads, NamedTensors, ParamId, ParamStore};
pub use scalar::{gemm, Scalar};
