//! Drift-aware mixture-of-experts forecasting.
//!
//! A kernel two-sample detector watches the training stream; on a shift the
//! residuals of the current model are profiled, an expert of the matching
//! kind joins the pool, and only it and the router head are briefly
//! fine-tuned. Routing uses a GRU over patch embeddings with a memory of
//! states archived at earlier shifts.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod drift;
pub mod error;
pub mod exec;
pub mod experts;
pub mod fft;
pub mod manager;
pub mod model;
pub mod nn;
pub mod params;
pub mod router;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
