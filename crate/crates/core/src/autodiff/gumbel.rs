use rand::Rng;

use super::tape::{Op, Tape, Var};
use super::tensor::{argmax, Scalar, Tensor};
use crate::error::{Error, Result};

const U_MIN: f64 = 1e-10;
const U_MAX: f64 = 1.0 - 1e-10;

/// I.i.d. standard Gumbel noise, `-ln(-ln u)` with `u` clamped away from 0 and 1.
pub fn gumbel_noise<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let u: f64 = rng.random::<f64>().clamp(U_MIN, U_MAX);
        T::of(-(-u.ln()).ln())
    })
}

impl<T: Scalar> Tape<T> {
    /// Forward value is the row-wise one-hot argmax of `x`; the backward pass
    /// treats the op as the identity.
    pub fn straight_through(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(Error::Shape(format!("straight_through expects [n, c], got {:?}", v.shape())));
        }
        let c = v.shape()[1];
        let mut out = vec![T::zero(); v.numel()];
        for (i, row) in v.data().chunks_exact(c).enumerate() {
            out[i * c + argmax(row)] = T::one();
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.requires(&[x]);
        Ok(self.push(value, rg, Op::StraightThrough { x }))
    }

    /// Gumbel-softmax relaxation with caller-supplied noise.
    pub fn gumbel_softmax_with_noise(
        &mut self,
        logits: Var,
        noise: Tensor<T>,
        tau: f64,
        hard: bool,
    ) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("gumbel temperature must be > 0, got {tau}")));
        }
        let g = self.constant(noise);
        let z = self.add(logits, g)?;
        let z = self.scale(z, T::of(1.0 / tau));
        let soft = self.softmax(z)?;
        if hard {
            self.straight_through(soft)
        } else {
            Ok(soft)
        }
    }

    /// Samples `softmax((logits + G) / tau)` over each row of `[n, c]`
    /// logits. With `hard`, the output is exactly one-hot and gradients flow
    /// through the soft sample.
    pub fn gumbel_softmax<R: Rng + ?Sized>(
        &mut self,
        logits: Var,
        tau: f64,
        rng: &mut R,
        hard: bool,
    ) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Parameter(format!("gumbel temperature must be > 0, got {tau}")));
        }
        let noise = gumbel_noise(self.shape(logits), rng);
        self.gumbel_softmax_with_noise(logits, noise, tau, hard)
    }
}
