//! Time-aligned spatio-temporal graph head for fine-grained action recognition.
//!
//! Token grids from a patch-embedding backbone receive learnable space-time
//! positional encodings, pass through a pre-norm Transformer encoder, and are
//! refined by parameter-free personalized-PageRank propagation over a graph
//! that fully connects sites within a frame and links each site to itself in
//! adjacent frames. Pooled features feed a linear softmax classifier.
//!
//! All numerics are generic over [`Scalar`] (`f32`/`f64`); the aliases below
//! name the double-precision instantiations used by tests and the CLI.

pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod head;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod wide;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type TokenGrid64 = backbone::TokenGrid<f64>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type TagHead64 = model::TagHead<f64>;
pub type TagHead32 = model::TagHead<f32>;
