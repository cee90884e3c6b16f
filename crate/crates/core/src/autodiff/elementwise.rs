use super::tape::{Bcast, GradSink, Op, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

fn broadcast_kind(x: &[usize], y: &[usize]) -> Result<Bcast> {
    if x == y {
        return Ok(Bcast::Same);
    }
    if y.iter().product::<usize>() == 1 {
        return Ok(Bcast::Scalar);
    }
    if x.len() >= 2 && y.len() == 1 && y[0] == x[1] {
        return Ok(Bcast::Channel {
            c: x[1],
            inner: x[2..].iter().product(),
        });
    }
    Err(Error::dim(format!(
        "cannot broadcast {y:?} onto {x:?}"
    )))
}

#[inline]
fn rhs_index(bcast: Bcast, i: usize) -> usize {
    match bcast {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Channel { c, inner } => (i / inner) % c,
    }
}

/// Sums a full-shape gradient down to the broadcast operand's shape.
fn reduce<T: Scalar>(bcast: Bcast, full: impl Iterator<Item = T>, len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for (i, v) in full.enumerate() {
        let j = rhs_index(bcast, i);
        out[j] = out[j] + v;
    }
    out
}

pub(crate) fn add_backward<T: Scalar>(a: Var, b: Var, bcast: Bcast, g: &[T], sink: &mut GradSink<'_, T>) {
    sink.add(a, g);
    if sink.wants(b) {
        if bcast == Bcast::Same {
            sink.add(b, g);
        } else {
            let n = sink.value(b).numel();
            let r = reduce(bcast, g.iter().copied(), n);
            sink.add(b, &r);
        }
    }
}

pub(crate) fn mul_backward<T: Scalar>(a: Var, b: Var, bcast: Bcast, g: &[T], sink: &mut GradSink<'_, T>) {
    if sink.wants(a) {
        let bv = sink.value(b).data();
        let d: Vec<T> = g
            .iter()
            .enumerate()
            .map(|(i, g)| *g * bv[rhs_index(bcast, i)])
            .collect();
        sink.add(a, &d);
    }
    if sink.wants(b) {
        let av = sink.value(a).data();
        let n = sink.value(b).numel();
        let r = reduce(bcast, g.iter().zip(av).map(|(g, a)| *g * *a), n);
        sink.add(b, &r);
    }
}

pub(crate) fn relu_backward<T: Scalar>(x: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(x) {
        return;
    }
    let xv = sink.value(x).data();
    let d: Vec<T> = g
        .iter()
        .zip(xv)
        .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
        .collect();
    sink.add(x, &d);
}

impl<T: Scalar> Tape<T> {
    fn binary(&mut self, a: Var, b: Var, mul: bool) -> Result<Var> {
        let bcast = broadcast_kind(self.shape(a), self.shape(b))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let data: Vec<T> = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let y = bv[rhs_index(bcast, i)];
                if mul {
                    *x * y
                } else {
                    *x + y
                }
            })
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.requires(&[a, b]);
        let op = if mul {
            Op::Mul { a, b, bcast }
        } else {
            Op::Add { a, b, bcast }
        };
        Ok(self.push(value, rg, op))
    }

    /// `a + b`; `b` may be the same shape, a single element, or a `[c]`
    /// vector broadcast along dimension 1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, false)
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, true)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one());
        self.add(a, nb)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| *e * c).collect())
            .expect("scale preserves shape");
        let rg = self.requires(&[x]);
        self.push(value, rg, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|e| e.max(T::zero())).collect(),
        )
        .expect("relu preserves shape");
        let rg = self.requires(&[x]);
        self.push(value, rg, Op::Relu { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e.exp()).collect())
            .expect("exp preserves shape");
        let rg = self.requires(&[x]);
        self.push(value, rg, Op::Exp { x })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.requires(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::of(v.numel() as f64);
        let rg = self.requires(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.requires(&[x]);
        Ok(self.push(value, rg, Op::Reshape { x }))
    }

    /// Collapses all dimensions after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let shape = [s[0], s[1..].iter().product()];
        self.reshape(x, &shape)
    }

    /// Concatenation along dimension 0.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat of an empty list"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for x in xs {
            let v = self.value(*x);
            if v.shape()[1..] != tail[..] {
                return Err(Error::dim(format!(
                    "concat: {:?} does not match trailing dims {tail:?}",
                    v.shape()
                )));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        let rg = self.requires(xs);
        Ok(self.push(value, rg, Op::Concat { xs: xs.to_vec() }))
    }

    /// Rows `start..start + len` along dimension 0.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let rows = v.shape()[0];
        if len == 0 || start + len > rows {
            return Err(Error::dim(format!(
                "narrow {start}..{} out of range for {:?}",
                start + len,
                v.shape()
            )));
        }
        let row: usize = v.shape()[1..].iter().product();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(shape, v.data()[start * row..(start + len) * row].to_vec())?;
        let rg = self.requires(&[x]);
        Ok(self.push(
            value,
            rg,
            Op::Narrow {
                x,
                offset: start * row,
            },
        ))
    }

    /// Column `col` of a rank-2 tensor as a `[rows]` vector.
    pub fn column(&mut self, x: Var, col: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 2 || col >= v.shape()[1] {
            return Err(Error::dim(format!("column {col} of {:?}", v.shape())));
        }
        let rows = v.shape()[0];
        let data = (0..rows).map(|i| v.row(i)[col]).collect();
        let value = Tensor::new([rows], data)?;
        let rg = self.requires(&[x]);
        Ok(self.push(value, rg, Op::Column { x, col }))
    }
}
