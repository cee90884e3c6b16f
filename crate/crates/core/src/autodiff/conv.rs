//! Convolution via batched im2col + GEMM, and spatial pooling.
//!
//! The column buffer is laid out `[c * kh * kw, b * oh * ow]` so a single
//! GEMM covers the whole batch.

use super::tape::{ConvGeom, GradSink, Op, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Output columns `lo..hi` whose input column `ox + kj - pad` is in range,
/// for stride 1.
fn unit_stride_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).min(g.ow);
    let hi = (g.w + g.pad).saturating_sub(kj).min(g.ow).max(lo);
    (lo, hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.oh * g.ow;
    let ncols = g.b * p;
    let mut cols = vec![T::zero(); g.c * g.kh * g.kw * ncols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.b {
                    let plane = &x[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let out = &mut dst[b * p + oy * g.ow..b * p + (oy + 1) * g.ow];
                        if g.stride == 1 {
                            let (lo, hi) = unit_stride_span(g, kj);
                            let shift = kj as isize - g.pad as isize;
                            let (s0, s1) = ((lo as isize + shift) as usize, (hi as isize + shift) as usize);
                            out[lo..hi].copy_from_slice(&src_row[s0..s1]);
                            continue;
                        }
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *o = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.oh * g.ow;
    let ncols = g.b * p;
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.b {
                    let base = (b * g.c + c) * g.h * g.w;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let drow = base + iy as usize * g.w;
                        if g.stride == 1 {
                            let (lo, hi) = unit_stride_span(g, kj);
                            let shift = kj as isize - g.pad as isize;
                            let d0 = (drow as isize + lo as isize + shift) as usize;
                            let from = &src[b * p + oy * g.ow + lo..b * p + oy * g.ow + hi];
                            for (d, v) in dx[d0..d0 + (hi - lo)].iter_mut().zip(from) {
                                *d = *d + *v;
                            }
                            continue;
                        }
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let d = &mut dx[drow + ix as usize];
                                *d = *d + src[b * p + oy * g.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: Var,
    k: Var,
    g: &ConvGeom,
    cols: Option<&[T]>,
    grad: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let p = g.oh * g.ow;
    let ncols = g.b * p;
    let ckk = g.c * g.kh * g.kw;
    // [b, o, p] -> [o, b * p]
    let mut gmat = vec![T::zero(); g.o * ncols];
    for b in 0..g.b {
        for o in 0..g.o {
            gmat[o * ncols + b * p..o * ncols + (b + 1) * p]
                .copy_from_slice(&grad[(b * g.o + o) * p..(b * g.o + o + 1) * p]);
        }
    }
    if sink.wants(k) {
        let owned;
        let cols = match cols {
            Some(c) => c,
            None => {
                owned = im2col(sink.value(x).data(), g);
                &owned
            }
        };
        let slot = sink.slot(k);
        // dK[o, ckk] += G[o, n] * cols^T
        T::gemm(
            g.o,
            ncols,
            ckk,
            &gmat,
            (ncols as isize, 1),
            cols,
            (1, ncols as isize),
            T::one(),
            slot,
            (ckk as isize, 1),
        );
    }
    if sink.wants(x) {
        let kv = sink.value(k).data();
        let mut dcols = vec![T::zero(); ckk * ncols];
        // dcols[ckk, n] = K^T * G
        T::gemm(
            ckk,
            g.o,
            ncols,
            kv,
            (1, ckk as isize),
            &gmat,
            (ncols as isize, 1),
            T::zero(),
            &mut dcols,
            (ncols as isize, 1),
        );
        let slot = sink.slot(x);
        col2im(&dcols, g, slot);
    }
}

pub(crate) fn max_pool_backward<T: Scalar>(x: Var, argmax: &[usize], g: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(x) {
        return;
    }
    let slot = sink.slot(x);
    for (gi, &src) in g.iter().zip(argmax) {
        slot[src] = slot[src] + *gi;
    }
}

pub(crate) fn global_avg_pool_backward<T: Scalar>(x: Var, g: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(x) {
        return;
    }
    let s = sink.value(x).shape();
    let hw = s[2] * s[3];
    let inv = T::one() / T::of(hw as f64);
    let slot = sink.slot(x);
    for (bc, gi) in g.iter().enumerate() {
        let v = *gi * inv;
        for e in &mut slot[bc * hw..(bc + 1) * hw] {
            *e = *e + v;
        }
    }
}

fn rank4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => Err(Error::dim(format!("{what} expects a rank-4 tensor, got {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    /// Zero-padded cross-correlation of `x [b, c, h, w]` with
    /// `kernel [o, c, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let [b, c, h, w] = rank4(self.shape(x), "conv2d input")?;
        let [o, kc, kh, kw] = rank4(self.shape(kernel), "conv2d kernel")?;
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d kernel {:?} does not match input {:?}",
                self.shape(kernel),
                self.shape(x)
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let geom = ConvGeom {
            b,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let p = geom.oh * geom.ow;
        let ncols = b * p;
        let ckk = c * kh * kw;
        let cols = im2col(self.value(x).data(), &geom);
        let mut omat = vec![T::zero(); o * ncols];
        T::gemm(
            o,
            ckk,
            ncols,
            self.value(kernel).data(),
            (ckk as isize, 1),
            &cols,
            (ncols as isize, 1),
            T::zero(),
            &mut omat,
            (ncols as isize, 1),
        );
        let mut out = vec![T::zero(); b * o * p];
        for bi in 0..b {
            for oi in 0..o {
                out[(bi * o + oi) * p..(bi * o + oi + 1) * p]
                    .copy_from_slice(&omat[oi * ncols + bi * p..oi * ncols + (bi + 1) * p]);
            }
        }
        let value = Tensor::new([b, o, geom.oh, geom.ow], out)?;
        let rg = self.requires(&[x, kernel]);
        let keep = rg && self.requires_grad(kernel);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                k: kernel,
                geom,
                cols: keep.then_some(cols),
            },
        ))
    }

    /// Non-overlapping max pooling with a square window; trailing rows and
    /// columns that do not fill a window are dropped.
    pub fn max_pool_2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let [b, c, h, w] = rank4(self.shape(x), "max_pool_2d")?;
        if size == 0 || size > h || size > w {
            return Err(Error::dim(format!("pool window {size} for {h}x{w} input")));
        }
        let (oh, ow) = (h / size, w / size);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    let mut best_v = xv[best];
                    for dy in 0..size {
                        let start = base + (oy * size + dy) * w + ox * size;
                        for (dx, v) in xv[start..start + size].iter().enumerate() {
                            if *v > best_v {
                                best_v = *v;
                                best = start + dx;
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new([b, c, oh, ow], out)?;
        let rg = self.requires(&[x]);
        Ok(self.push(value, rg, Op::MaxPool { x, argmax }))
    }

    /// `[b, c, h, w] -> [b, c]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = rank4(self.shape(x), "global_avg_pool")?;
        let hw = h * w;
        let inv = T::one() / T::of(hw as f64);
        let out = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new([b, c], out)?;
        let rg = self.requires(&[x]);
        Ok(self.push(value, rg, Op::GlobalAvgPool { x }))
    }
}
