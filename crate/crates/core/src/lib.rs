//! Two domain experts distilled into one student whose late-stage filters
//! are split between domains by a learnable Gumbel-softmax gate, evaluated
//! on a procedurally generated two-domain few-shot benchmark.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod gate;
pub mod heads;
pub mod runtime;
pub mod trainer;

pub use error::{Error, Result};
