use super::tape::{GradSink, Op, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub(crate) fn matmul_backward<T: Scalar>(a: Var, b: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    let (m, k) = (sink.value(a).shape()[0], sink.value(a).shape()[1]);
    let n = sink.value(b).shape()[1];
    if sink.wants(a) {
        // dA = G * B^T
        let bv = sink.value(b).data();
        let slot = sink.slot(a);
        T::gemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize), T::one(), slot, (k as isize, 1));
    }
    if sink.wants(b) {
        // dB = A^T * G
        let av = sink.value(a).data();
        let slot = sink.slot(b);
        T::gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), T::one(), slot, (n as isize, 1));
    }
}

pub(crate) fn sq_dist_backward<T: Scalar>(a: Var, b: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    let av = sink.value(a).data();
    let bv = sink.value(b).data();
    let (n, d) = (sink.value(a).shape()[0], sink.value(a).shape()[1]);
    let m = sink.value(b).shape()[0];
    let two = T::of(2.0);
    let mut da = vec![T::zero(); n * d];
    let mut db = vec![T::zero(); m * d];
    for i in 0..n {
        for j in 0..m {
            let gij = g[i * m + j] * two;
            for t in 0..d {
                let diff = (av[i * d + t] - bv[j * d + t]) * gij;
                da[i * d + t] = da[i * d + t] + diff;
                db[j * d + t] = db[j * d + t] - diff;
            }
        }
    }
    sink.add(a, &da);
    sink.add(b, &db);
}

impl<T: Scalar> Tape<T> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Tensor::new([m, n], out)?;
        let rg = self.requires(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul { a, b }))
    }

    /// Pairwise squared Euclidean distances between the rows of `a [n, d]`
    /// and `b [m, d]`, giving `[n, m]`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim(format!("sq_dist of {sa:?} and {sb:?}")));
        }
        let (n, m, d) = (sa[0], sb[0], sa[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                let s = (0..d)
                    .map(|t| {
                        let diff = av[i * d + t] - bv[j * d + t];
                        diff * diff
                    })
                    .sum::<T>();
                out.push(s);
            }
        }
        let value = Tensor::new([n, m], out)?;
        let rg = self.requires(&[a, b]);
        Ok(self.push(value, rg, Op::SqDist { a, b }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let mut t = Tape::<f64>::new();
        let i = t.constant(Tensor::new([2, 2], vec![1., 0., 0., 1.]).unwrap());
        let m = t.constant(Tensor::new([2, 2], vec![1., 2., 3., 4.]).unwrap());
        let p = t.matmul(i, m).unwrap();
        assert_eq!(t.value(p).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn row_times_column() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::new([1, 2], vec![1., 2.]).unwrap());
        let b = t.constant(Tensor::new([2, 1], vec![3., 4.]).unwrap());
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p).data(), &[11.]);
    }

    #[test]
    fn mismatch_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros([2, 3]));
        let b = t.constant(Tensor::zeros([2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("and [2, 3]"), "{err}");
    }

    #[test]
    fn sq_dist_values() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::new([2, 2], vec![0., 0., 1., 1.]).unwrap());
        let b = t.constant(Tensor::new([1, 2], vec![1., 0.]).unwrap());
        let d = t.sq_dist(a, b).unwrap();
        assert_eq!(t.value(d).data(), &[1., 1.]);
    }
}
