//! Decomposed (epistemic + aleatoric) uncertainty for density-map object
//! counting with a shared-trunk, multi-head bootstrap network.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod density;
pub mod dubnet;
pub mod error;
pub mod io;
pub mod recalib;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod uncertainty;

pub use error::{Error, Result};
