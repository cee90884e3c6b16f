//! Per-channel batch normalization over `[b, c, ...]` inputs.

use super::tape::{GradSink, Op, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Statistics of one training-mode batch, used to update running averages.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

fn layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::dim(format!("batch_norm expects rank >= 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn check_affine(c: usize, gamma: &[usize], beta: &[usize]) -> Result<()> {
    if gamma != [c] || beta != [c] {
        return Err(Error::dim(format!(
            "batch_norm affine params {gamma:?}/{beta:?} for {c} channels"
        )));
    }
    Ok(())
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[T],
    inv_std: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (b, c, inner) = layout(sink.value(x).shape()).expect("validated in forward");
    let gv = sink.value(gamma).data();
    let n = T::of((b * inner) as f64);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * inner;
            let (gs, xs) = (&g[off..off + inner], &xhat[off..off + inner]);
            sum_g[ch] = sum_g[ch] + gs.iter().copied().sum::<T>();
            sum_gx[ch] = sum_gx[ch] + gs.iter().zip(xs).map(|(a, b)| *a * *b).sum::<T>();
        }
    }
    sink.add(gamma, &sum_gx);
    sink.add(beta, &sum_g);
    if sink.wants(x) {
        let slot = sink.slot(x);
        for bi in 0..b {
            for ch in 0..c {
                let k = gv[ch] * inv_std[ch] / n;
                let (sg, sgx) = (sum_g[ch], sum_gx[ch]);
                let off = (bi * c + ch) * inner;
                let rows = slot[off..off + inner].iter_mut().zip(&g[off..off + inner]).zip(&xhat[off..off + inner]);
                for ((d, gi), xh) in rows {
                    *d = *d + k * (n * *gi - sg - *xh * sgx);
                }
            }
        }
    }
}

pub(crate) fn batch_norm_eval_backward<T: Scalar>(
    x: Var,
    gamma: Var,
    beta: Var,
    mean: &[T],
    inv_std: &[T],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let xv = sink.value(x);
    let (b, c, inner) = layout(xv.shape()).expect("validated in forward");
    let gv = sink.value(gamma).data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    let mut dx = vec![T::zero(); xv.numel()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * inner;
            let (m, is) = (mean[ch], inv_std[ch]);
            let k = gv[ch] * is;
            let (gs, xs) = (&g[off..off + inner], &xv.data()[off..off + inner]);
            dbeta[ch] = dbeta[ch] + gs.iter().copied().sum::<T>();
            dgamma[ch] = dgamma[ch] + gs.iter().zip(xs).map(|(a, x)| *a * (*x - m) * is).sum::<T>();
            for (d, gi) in dx[off..off + inner].iter_mut().zip(gs) {
                *d = *gi * k;
            }
        }
    }
    sink.add(gamma, &dgamma);
    sink.add(beta, &dbeta);
    sink.add(x, &dx);
}

impl<T: Scalar> Tape<T> {
    /// Training-mode batch normalization using the statistics of `x` itself.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let (b, c, inner) = layout(self.shape(x))?;
        check_affine(c, self.shape(gamma), self.shape(beta))?;
        let xv = self.value(x).data();
        let count = b * inner;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for bi in 0..b {
            for (ch, m) in mean.iter_mut().enumerate() {
                let off = (bi * c + ch) * inner;
                *m += xv[off..off + inner].iter().map(|v| v.as_f64()).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                var[ch] += xv[off..off + inner]
                    .iter()
                    .map(|v| (v.as_f64() - mean[ch]).powi(2))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);

        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + BN_EPS).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|m| T::of(*m)).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                let (m, is, ga, be) = (mean_t[ch], inv_std[ch], gv[ch], bv[ch]);
                let rows = xhat[off..off + inner].iter_mut().zip(&mut out[off..off + inner]).zip(&xv[off..off + inner]);
                for ((xh, o), x) in rows {
                    *xh = (*x - m) * is;
                    *o = ga * *xh + be;
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.requires(&[x, gamma, beta]);
        let v = self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        );
        Ok((v, BatchStats { mean, var, count }))
    }

    /// Inference-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let (b, c, inner) = layout(self.shape(x))?;
        check_affine(c, self.shape(gamma), self.shape(beta))?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm running statistics length"));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|v| T::one() / (*v + T::of(BN_EPS)).sqrt())
            .collect();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * inner;
                let (m, k, be) = (running_mean[ch], gv[ch] * inv_std[ch], bv[ch]);
                for (o, x) in out[off..off + inner].iter_mut().zip(&xv[off..off + inner]) {
                    *o = (*x - m) * k + be;
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.requires(&[x, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
        ))
    }
}
