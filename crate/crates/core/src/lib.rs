//! Hardware-constrained quantized training for NVM crossbar accelerators.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — dense `f64` tensors and a reverse-mode tape.
//! * [`quant`] — fake quantization, straight-through gradients and the
//!   globally shared range variables.
//! * [`model`] — layer specifications, reference networks and the
//!   float / quantized forward passes.
//! * [`train`] — composite loss, activation search and the training loop.
//! * [`crossbar`] — mapping onto fixed-size tiles and analog inference.
//! * [`cost`] — energy and area estimation from periphery figures.
//! * [`harness`] — datasets, experiment configuration and pipelines.

pub mod tensor;
pub mod quant;
pub mod model;
pub mod train;
pub mod crossbar;
pub mod cost;
pub mod harness;
