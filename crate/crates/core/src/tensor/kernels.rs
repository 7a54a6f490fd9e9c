//! Forward/backward kernels on raw NCHW buffers.

use super::{gemm, Scalar, Shape, Strides};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: Shape, cout: usize, k: usize, stride: usize, pad: usize) -> Self {
        let ho = (x.h + 2 * pad - k) / stride + 1;
        let wo = (x.w + 2 * pad - k) / stride + 1;
        ConvGeom { cin: x.c, cout, k, stride, pad, h: x.h, w: x.w, ho, wo }
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_len(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let l = g.out_len();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * l..(row + 1) * l];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.wo..(oh + 1) * g.wo];
                    if ih < 0 || ih >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, v) in line.iter_mut().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        *v = if iw < 0 || iw >= g.w as isize { T::zero() } else { src[iw as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let l = g.out_len();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * l..(row + 1) * l];
                for oh in 0..g.ho {
                    let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                    if ih < 0 || ih >= g.h as isize {
                        continue;
                    }
                    let line = &src[oh * g.wo..(oh + 1) * g.wo];
                    let dst = &mut plane[ih as usize * g.w..(ih as usize + 1) * g.w];
                    for (ow, &v) in line.iter().enumerate() {
                        let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                        if iw >= 0 && iw < g.w as isize {
                            dst[iw as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution forward. `w` is `[cout, cin, k, k]` row-major.
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * g.out_len();
    let l = g.out_len();
    let rows = g.col_rows();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * l] };
    for b in 0..n {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let ob = &mut out[b * out_per..(b + 1) * out_per];
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(g.cout, rows, l, T::one(), w, Strides::row_major(rows), src, Strides::row_major(l), T::zero(), ob, Strides::row_major(l));
        if let Some(bias) = bias {
            for (o, &bv) in bias.iter().enumerate() {
                ob[o * l..(o + 1) * l].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

/// Dense convolution backward; each output gradient is optional.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let in_per = g.cin * g.h * g.w;
    let l = g.out_len();
    let out_per = g.cout * l;
    let rows = g.col_rows();
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * l] };
    let mut dcols = if g.is_pointwise() || dx.is_none() { Vec::new() } else { vec![T::zero(); rows * l] };
    for b in 0..n {
        let xb = &x[b * in_per..(b + 1) * in_per];
        let gb = &dout[b * out_per..(b + 1) * out_per];
        if let Some(dw) = dw.as_deref_mut() {
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            gemm(g.cout, l, rows, T::one(), gb, Strides::row_major(l), src, Strides::transposed(l), T::one(), dw, Strides::row_major(rows));
        }
        if let Some(db) = db.as_deref_mut() {
            for (o, d) in db.iter_mut().enumerate() {
                *d += gb[o * l..(o + 1) * l].iter().copied().sum::<T>();
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxb = &mut dx[b * in_per..(b + 1) * in_per];
            if g.is_pointwise() {
                gemm(rows, g.cout, l, T::one(), w, Strides::transposed(rows), gb, Strides::row_major(l), T::one(), dxb, Strides::row_major(l));
            } else {
                gemm(rows, g.cout, l, T::one(), w, Strides::transposed(rows), gb, Strides::row_major(l), T::zero(), &mut dcols, Strides::row_major(l));
                col2im(&dcols, g, dxb);
            }
        }
    }
}

/// Depthwise convolution (channel multiplier 1). `w` is `[c, 1, k, k]`.
pub(crate) fn dw_forward<T: Scalar>(x: &[T], n: usize, g: &ConvGeom, w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let kk = g.k * g.k;
    for b in 0..n {
        for c in 0..g.cin {
            let plane = &x[(b * g.cin + c) * g.h * g.w..][..g.h * g.w];
            let o = &mut out[(b * g.cin + c) * g.out_len()..][..g.out_len()];
            let wc = &w[c * kk..(c + 1) * kk];
            let bv = bias.map(|b| b[c]).unwrap_or_else(T::zero);
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let mut acc = bv;
                    for ki in 0..g.k {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        let row = &plane[ih as usize * g.w..];
                        for kj in 0..g.k {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.w as isize {
                                acc += wc[ki * g.k + kj] * row[iw as usize];
                            }
                        }
                    }
                    o[oh * g.wo + ow] = acc;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn dw_backward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let kk = g.k * g.k;
    let hw = g.h * g.w;
    let l = g.out_len();
    for b in 0..n {
        for c in 0..g.cin {
            let plane = &x[(b * g.cin + c) * hw..][..hw];
            let go = &dout[(b * g.cin + c) * l..][..l];
            let wc = &w[c * kk..(c + 1) * kk];
            if let Some(db) = db.as_deref_mut() {
                db[c] += go.iter().copied().sum::<T>();
            }
            for oh in 0..g.ho {
                for ow in 0..g.wo {
                    let gv = go[oh * g.wo + ow];
                    if gv == T::zero() {
                        continue;
                    }
                    for ki in 0..g.k {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.h as isize {
                            continue;
                        }
                        for kj in 0..g.k {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.w as isize {
                                continue;
                            }
                            let idx = ih as usize * g.w + iw as usize;
                            if let Some(dw) = dw.as_deref_mut() {
                                dw[c * kk + ki * g.k + kj] += gv * plane[idx];
                            }
                            if let Some(dx) = dx.as_deref_mut() {
                                dx[(b * g.cin + c) * hw + idx] += gv * wc[ki * g.k + kj];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel statistics over (N, H, W): returns (mean, biased var).
pub(crate) fn channel_moments<T: Scalar>(x: &[T], s: Shape) -> (Vec<T>, Vec<T>) {
    let hw = s.spatial();
    let m = T::c((s.n * hw) as f64);
    let mut mean = vec![T::zero(); s.c];
    let mut var = vec![T::zero(); s.c];
    for c in 0..s.c {
        let mut acc = T::zero();
        for b in 0..s.n {
            acc += x[(b * s.c + c) * hw..][..hw].iter().copied().sum::<T>();
        }
        let mu = acc / m;
        let mut sq = T::zero();
        for b in 0..s.n {
            for &v in &x[(b * s.c + c) * hw..][..hw] {
                let d = v - mu;
                sq += d * d;
            }
        }
        mean[c] = mu;
        var[c] = sq / m;
    }
    (mean, var)
}

/// Scaled dot-product attention over spatial tokens for one sample.
/// `q`, `k`, `v` are `[d, l]`; writes softmax probabilities `[l, l]` and output `[d, l]`.
pub(crate) fn attention_forward<T: Scalar>(q: &[T], k: &[T], v: &[T], d: usize, l: usize, probs: &mut [T], out: &mut [T]) {
    let scale = T::one() / T::c(d as f64).sqrt();
    gemm(l, d, l, scale, q, Strides::transposed(l), k, Strides::row_major(l), T::zero(), probs, Strides::row_major(l));
    for row in probs.chunks_exact_mut(l) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for p in row.iter_mut() {
            *p = (*p - mx).exp();
            s += *p;
        }
        for p in row.iter_mut() {
            *p = *p / s;
        }
    }
    gemm(d, l, l, T::one(), v, Strides::row_major(l), probs, Strides::transposed(l), T::zero(), out, Strides::row_major(l));
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    d: usize,
    l: usize,
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let scale = T::one() / T::c(d as f64).sqrt();
    gemm(d, l, l, T::one(), dout, Strides::row_major(l), probs, Strides::row_major(l), T::one(), dv, Strides::row_major(l));
    let mut ds = vec![T::zero(); l * l];
    gemm(l, d, l, T::one(), dout, Strides::transposed(l), v, Strides::row_major(l), T::zero(), &mut ds, Strides::row_major(l));
    for (drow, prow) in ds.chunks_exact_mut(l).zip(probs.chunks_exact(l)) {
        let dot: T = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum();
        for (dv_, &p) in drow.iter_mut().zip(prow.iter()) {
            *dv_ = p * (*dv_ - dot);
        }
    }
    gemm(d, l, l, scale, k, Strides::row_major(l), &ds, Strides::transposed(l), T::one(), dq, Strides::row_major(l));
    gemm(d, l, l, scale, q, Strides::row_major(l), &ds, Strides::row_major(l), T::one(), dk, Strides::row_major(l));
}
