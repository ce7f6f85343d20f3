//! Training and inference engine for small convolutional networks that
//! operates directly on 8-bit linearly quantized tensors.
//!
//! The crate is split along the lifetime of a training step:
//!
//! - [`qcore`]: the linear quantization scheme (scale/zero-point), the
//!   [`qcore::QTensor`] / [`qcore::FTensor`] value types, and elementwise
//!   quantize/dequantize.
//! - [`layers`]: forward and backward kernels for every layer the engine
//!   supports, each in a quantized and a floating variant. Quantized
//!   kernels accumulate in 32-bit integers and requantize on write-out.
//! - [`graph`]: the sequential model container, tape-recorded forward
//!   execution, backward traversal over the trainable suffix, activation
//!   and error range calibration, and the three-segment memory planner.
//! - [`optim`]: buffered SGD with per-channel gradient standardization,
//!   quantized weight updates with dynamic scale/zero-point refresh, and
//!   the loss-adaptive sparse gradient selector.
//!
//! The crate is `no_std` (with `alloc`) so the numeric core stays portable
//! to bare-metal targets; all host concerns (file formats, datasets, CLI)
//! live in the companion `qtrain` crate.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

pub mod error;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod qcore;

pub use error::{Error, Result};
pub use qcore::{FTensor, QTensor, QuantParams, Value};
