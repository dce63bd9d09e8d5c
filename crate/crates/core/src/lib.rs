//! Forward-only test-time adaptation engine.
//!
//! Everything in this crate runs on forward passes alone: the tensor kernels
//! carry no gradient machinery, parameter updates come from randomized
//! two-sided finite differences, and the streaming harness never sees a
//! backward pass. Reverse-mode differentiation lives in a separate crate
//! (`fwdadapt-autodiff`) that depends on this one, never the other way
//! around, so the no-backprop property of the adaptation path is enforced
//! by the build graph itself.

pub mod data;
pub mod drls;
pub mod error;
pub mod graph;
pub mod io;
pub mod models;
pub mod sfaa;
pub mod stream;
pub mod tensor;
pub mod util;
pub mod zoo;

pub use error::{Error, Result};
pub use tensor::Tensor;
