//! Differentiable numerical substrate: a reverse-mode tape over dense
//! tensors, 1D convolutions, a U-Net trunk and set convolutions.

pub mod conv;
pub mod params;
pub mod setconv;
pub mod tape;
pub mod unet;

pub use params::{Array, ParamStore};
pub use setconv::Grid;
pub use tape::{value_and_grad, Tape, Var};
pub use unet::UNetConfig;
