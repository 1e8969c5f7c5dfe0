//! Time series forecasting by reprogramming a frozen decoder-only transformer.
//!
//! A univariate window is normalized, cut into patches, embedded, and mapped
//! into the backbone's word-embedding space by cross-attention against a small
//! bank of learned text prototypes. A natural-language prompt describing the
//! dataset, the task and the window's statistics is prepended, the sequence
//! runs through the frozen backbone, and the patch outputs are flattened and
//! projected to the forecast horizon. Only the input transformation and the
//! output head are trained.

pub mod backbone;
pub mod checkpoint;
pub mod data;
mod error;
pub mod head;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod reprogram;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::{ParamId, Parameter, ParameterStore, Tape, Tensor, Var};
