//! Generative sparse detection: a sparse tensor network engine and a
//! single-shot anchor-based 3D object detector built on it.

pub mod autograd;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod lattice;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod sparse_ops;

pub use error::{Error, Result};
