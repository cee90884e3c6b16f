use super::tape::{GradSink, Op, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

const DISTRIBUTION_TOL: f64 = 1e-6;

fn rows_cols(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [n, c] => Ok((*n, *c)),
        _ => Err(Error::Shape(format!("{what} expects [n, c], got {shape:?}"))),
    }
}

pub(crate) fn log_softmax_backward<T: Scalar>(x: Var, out: &Tensor<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(x) {
        return;
    }
    let c = out.shape()[1];
    let slot = sink.slot(x);
    for (i, (grow, yrow)) in g.chunks_exact(c).zip(out.data().chunks_exact(c)).enumerate() {
        let gs = grow.iter().copied().sum::<T>();
        for j in 0..c {
            slot[i * c + j] = slot[i * c + j] + grow[j] - yrow[j].exp() * gs;
        }
    }
}

pub(crate) fn softmax_backward<T: Scalar>(x: Var, out: &Tensor<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(x) {
        return;
    }
    let c = out.shape()[1];
    let slot = sink.slot(x);
    for (i, (grow, yrow)) in g.chunks_exact(c).zip(out.data().chunks_exact(c)).enumerate() {
        let dot = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum::<T>();
        for j in 0..c {
            slot[i * c + j] = slot[i * c + j] + yrow[j] * (grow[j] - dot);
        }
    }
}

pub(crate) fn cross_entropy_backward<T: Scalar>(x: Var, labels: &[usize], g: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(x) {
        return;
    }
    let c = sink.value(x).shape()[1];
    let scale = g[0] / T::of(labels.len() as f64);
    let slot = sink.slot(x);
    for (i, &l) in labels.iter().enumerate() {
        slot[i * c + l] = slot[i * c + l] - scale;
    }
}

pub(crate) fn kl_div_backward<T: Scalar>(x: Var, teacher: &[T], g: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(x) {
        return;
    }
    let n = sink.value(x).shape()[0];
    let scale = g[0] / T::of(n as f64);
    let slot = sink.slot(x);
    for (s, t) in slot.iter_mut().zip(teacher) {
        *s = *s - *t * scale;
    }
}

/// Row-wise stable log-softmax of a `[n, c]` slice.
pub fn log_softmax_rows<T: Scalar>(x: &[T], c: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(c) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|v| (*v - m).exp()).sum::<T>().ln() + m;
        out.extend(row.iter().map(|v| *v - lse));
    }
    out
}

impl<T: Scalar> Tape<T> {
    /// Log-softmax over the class axis of `[n, c]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x), "log_softmax")?;
        let out = log_softmax_rows(self.value(x).data(), c);
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.requires(&[x]);
        Ok(self.push(value, rg, Op::LogSoftmax { x }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (_, c) = rows_cols(self.shape(x), "softmax")?;
        let out = log_softmax_rows(self.value(x).data(), c)
            .into_iter()
            .map(|v| v.exp())
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let rg = self.requires(&[x]);
        Ok(self.push(value, rg, Op::Softmax { x }))
    }

    /// Mean negative log-likelihood of `labels` under `log_probs [n, c]`.
    pub fn cross_entropy(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = rows_cols(self.shape(log_probs), "cross_entropy")?;
        if labels.len() != n {
            return Err(Error::Shape(format!(
                "cross_entropy: {} labels for {n} rows",
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, l)| **l >= c) {
            return Err(Error::Label {
                index,
                label,
                classes: c,
            });
        }
        let lp = self.value(log_probs).data();
        let total = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -lp[i * c + l])
            .sum::<T>();
        let value = Tensor::scalar(total / T::of(n as f64));
        let rg = self.requires(&[log_probs]);
        Ok(self.push(
            value,
            rg,
            Op::CrossEntropy {
                x: log_probs,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Mean over rows of `KL(teacher || student)`. The teacher enters as a
    /// plain value, so no gradient reaches it.
    pub fn kl_div(&mut self, student_log_probs: Var, teacher_probs: &Tensor<T>) -> Result<Var> {
        let (n, c) = rows_cols(self.shape(student_log_probs), "kl_div")?;
        if teacher_probs.shape() != [n, c] {
            return Err(Error::Shape(format!(
                "kl_div: teacher {:?} vs student {:?}",
                teacher_probs.shape(),
                self.shape(student_log_probs)
            )));
        }
        for (i, row) in teacher_probs.data().chunks_exact(c).enumerate() {
            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
            if row.iter().any(|v| !(v.as_f64() >= 0.0)) || (s - 1.0).abs() > DISTRIBUTION_TOL {
                return Err(Error::Distribution(format!(
                    "teacher row {i} is not a distribution (sum {s})"
                )));
            }
        }
        let sv = self.value(student_log_probs).data();
        let total = teacher_probs
            .data()
            .iter()
            .zip(sv)
            .filter(|(t, _)| **t > T::zero())
            .map(|(t, s)| *t * (t.ln() - *s))
            .sum::<T>();
        let value = Tensor::scalar(total / T::of(n as f64));
        let rg = self.requires(&[student_log_probs]);
        Ok(self.push(
            value,
            rg,
            Op::KlDiv {
                x: student_log_probs,
                teacher: teacher_probs.data().to_vec(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(n: usize, c: usize, data: &[f64]) -> Tensor<f64> {
        Tensor::new([n, c], data.to_vec()).unwrap()
    }

    #[test]
    fn log_softmax_of_zeros_is_half() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(t2(1, 2, &[0.0, 0.0]));
        let y = t.log_softmax(x).unwrap();
        let half = 0.5f64.ln();
        assert_eq!(t.value(y).data(), &[half, half]);
    }

    #[test]
    fn log_softmax_row_constant_is_uniform() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(t2(2, 4, &[3.0, 3.0, 3.0, 3.0, -1e3, -1e3, -1e3, -1e3]));
        let y = t.log_softmax(x).unwrap();
        for v in t.value(y).data() {
            assert!((v.exp() - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn log_softmax_handles_large_logits() {
        let out = log_softmax_rows(&[1000.0f64, 0.0, -1000.0], 3);
        assert!(out.iter().all(|v| v.is_finite()));
        let s: f64 = out.iter().map(|v| v.exp()).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut t = Tape::<f64>::new();
        let lp = vec![(0.2f64).ln(); 10];
        let x = t.constant(t2(2, 5, &lp));
        let l = t.cross_entropy(x, &[0, 4]).unwrap();
        assert!((t.value(l).data()[0] - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_one_hot_is_zero() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(t2(1, 3, &[f64::NEG_INFINITY, 0.0, f64::NEG_INFINITY]));
        let l = t.cross_entropy(x, &[1]).unwrap();
        assert_eq!(t.value(l).data()[0], 0.0);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(t2(2, 3, &[0.0; 6]));
        let err = t.cross_entropy(x, &[0, 3]).unwrap_err();
        assert!(matches!(
            err,
            Error::Label {
                index: 1,
                label: 3,
                classes: 3
            }
        ));
    }

    #[test]
    fn kl_identical_is_zero() {
        let p = [0.1, 0.2, 0.7];
        let mut t = Tape::<f64>::new();
        let s = t.constant(t2(1, 3, &p.map(f64::ln)));
        let l = t.kl_div(s, &t2(1, 3, &p)).unwrap();
        assert!(t.value(l).data()[0].abs() < 1e-15);
    }

    #[test]
    fn kl_one_hot_teacher_uniform_student() {
        let mut t = Tape::<f64>::new();
        let s = t.constant(t2(1, 5, &[(0.2f64).ln(); 5]));
        let l = t
            .kl_div(s, &t2(1, 5, &[0.0, 0.0, 1.0, 0.0, 0.0]))
            .unwrap();
        assert!((t.value(l).data()[0] - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_rejects_invalid_teacher() {
        let mut t = Tape::<f64>::new();
        let s = t.constant(t2(1, 2, &[0.5f64.ln(); 2]));
        assert!(matches!(
            t.kl_div(s, &t2(1, 2, &[0.6, 0.6])),
            Err(Error::Distribution(_))
        ));
        assert!(matches!(
            t.kl_div(s, &t2(1, 2, &[1.5, -0.5])),
            Err(Error::Distribution(_))
        ));
    }

    #[test]
    fn kl_teacher_receives_no_gradient() {
        let mut t = Tape::<f64>::new();
        let s = t.param(&t2(1, 2, &[0.3f64.ln(), 0.7f64.ln()]));
        let l = t.kl_div(s, &t2(1, 2, &[0.5, 0.5])).unwrap();
        t.backward(l).unwrap();
        assert_eq!(t.grad(s).unwrap(), &[-0.5, -0.5]);
    }
}
