//! Subject-conditioned mixture-of-experts encoder for multi-subject signal
//! decoding, built on a minimal reverse-mode autodiff tape.
//!
//! The crate is generic over the scalar type via [`scalar::Scalar`]; the
//! aliases below pin the `f64` instantiation that the gradient-check
//! tolerances and the binary file formats are specified against.

pub mod error;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod ecphory;
pub mod encoder;
pub mod gradcheck;
pub mod harness;
pub mod moe;
pub mod params;
pub mod records;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod train;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::{derive_seed, Prng};
pub use scalar::Scalar;

/// Default-precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
/// Default-precision tape.
pub type Tape64 = tape::Tape<f64>;
/// Default-precision parameter store.
pub type ParamStore64 = params::ParamStore<f64>;

/// Single-precision tensor, for experiments outside the verification suite.
pub type Tensor32 = tensor::Tensor<f32>;
