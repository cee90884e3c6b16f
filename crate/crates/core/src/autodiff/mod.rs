//! Dense-tensor reverse-mode automatic differentiation.

mod adam;
mod conv;
mod elementwise;
mod gumbel;
mod linalg;
mod loss;
mod norm;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gumbel::gumbel_noise;
pub use loss::log_softmax_rows;
pub use norm::{BatchStats, BN_EPS};
pub use tape::{Tape, Var};
pub use tensor::{argmax, Scalar, Tensor};
