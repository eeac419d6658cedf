//! Neural processes with noise-augmented auxiliary layers for 1D meta-regression.
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod diffgrid;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod models;
pub mod oracle;
pub mod train;

pub use error::{Error, Result};
