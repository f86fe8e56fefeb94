//! Bidirectional multi-scale context blocks for TDNN speaker embedding
//! extractors, with a small reverse-mode autodiff engine, the training
//! recipe, and speaker-verification scoring.

pub mod audio;
pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod kernels;
pub mod mel;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, Reduce, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
