//! Tape of operations with reverse-mode differentiation.

use super::kernels::{self, ConvGeom};
use super::{Scalar, Shape, Tensor};
use crate::nn::ParamId;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Relu6,
    Silu,
    Sigmoid,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom, depthwise: bool },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    ChannelNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    Unary { x: Var, kind: Unary },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, s: T },
    Concat { parts: Vec<Var> },
    GlobalAvgPool { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2 { x: Var },
    Attention { q: Var, k: Var, v: Var, probs: Vec<T> },
    RmsNormalize { x: Var, rms: Vec<T> },
    Mse { a: Var, b: Var },
    LinComb { terms: Vec<(Var, T)> },
    Custom { x: Var, grad: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for running-average updates.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

/// Gradients keyed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (used for input-gradient checks).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub(crate) fn param_leaf(&mut self, t: Tensor<T>, id: ParamId, trainable: bool) -> Var {
        self.push(t, Op::Param(id), trainable)
    }

    /// Constant copy of `v`; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, depthwise: bool) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(ws.h, ws.w, "square kernels only");
        if depthwise {
            assert!(ws.n == xs.c && ws.c == 1, "depthwise kernel {ws} for input {xs}");
        } else {
            assert_eq!(ws.c, xs.c, "conv kernel {ws} does not match input {xs}");
        }
        let geom = ConvGeom::new(xs, ws.n, ws.h, stride, pad);
        let os = Shape::new(xs.n, ws.n, geom.ho, geom.wo);
        let mut out = Tensor::zeros(os);
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| self.value(b).data());
            if depthwise {
                kernels::dw_forward(xv, xs.n, &geom, wv, bv, out.data_mut());
            } else {
                kernels::conv_forward(xv, xs.n, &geom, wv, bv, out.data_mut());
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv { x, w, b, geom, depthwise }, ng)
    }

    /// Batch normalisation. With `running = None` statistics come from the batch
    /// and are returned; otherwise the supplied `(mean, var)` are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
        running: Option<(&[T], &[T])>,
    ) -> (Var, Option<BnStats<T>>) {
        let s = self.shape(x);
        let (mean, var, stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), None),
            None => {
                let (m, v) = kernels::channel_moments(self.value(x).data(), s);
                let count = (s.n * s.spatial()) as f64;
                let unbiased = if count > 1.0 {
                    v.iter().map(|&x| x * T::c(count / (count - 1.0))).collect()
                } else {
                    v.clone()
                };
                (m.clone(), v, Some(BnStats { mean: m, var: unbiased }))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let hw = s.spatial();
        let mut out = Tensor::zeros(s);
        {
            let xv = self.value(x).data();
            let g = self.value(gamma).data();
            let bta = self.value(beta).data();
            let o = out.data_mut();
            for b in 0..s.n {
                for c in 0..s.c {
                    let off = (b * s.c + c) * hw;
                    let (mu, is, gc, bc) = (mean[c], inv_std[c], g[c], bta[c]);
                    for i in off..off + hw {
                        o[i] = gc * (xv[i] - mu) * is + bc;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let batch_stats = stats.is_some();
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats }, ng);
        (v, stats)
    }

    /// Normalisation over channels at each spatial position (token layer norm).
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let s = self.shape(x);
        let hw = s.spatial();
        let inv_c = T::one() / T::c(s.c as f64);
        let mut mean = vec![T::zero(); s.n * hw];
        let mut inv_std = vec![T::zero(); s.n * hw];
        let mut out = Tensor::zeros(s);
        {
            let xv = self.value(x).data();
            let g = self.value(gamma).data();
            let bt = self.value(beta).data();
            let o = out.data_mut();
            for b in 0..s.n {
                let base = b * s.c * hw;
                for p in 0..hw {
                    let mut mu = T::zero();
                    for c in 0..s.c {
                        mu += xv[base + c * hw + p];
                    }
                    mu = mu * inv_c;
                    let mut var = T::zero();
                    for c in 0..s.c {
                        let d = xv[base + c * hw + p] - mu;
                        var += d * d;
                    }
                    let is = T::one() / (var * inv_c + eps).sqrt();
                    mean[b * hw + p] = mu;
                    inv_std[b * hw + p] = is;
                    for c in 0..s.c {
                        let i = base + c * hw + p;
                        o[i] = g[c] * (xv[i] - mu) * is + bt[c];
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(out, Op::ChannelNorm { x, gamma, beta, mean, inv_std }, ng)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let six = T::c(6.0);
        let out = self.value(x).map(|v| match kind {
            Unary::Relu => if v < T::zero() { T::zero() } else { v },
            Unary::Relu6 => if v < T::zero() { T::zero() } else if v > six { six } else { v },
            Unary::Silu => v * sigmoid(v),
            Unary::Sigmoid => sigmoid(v),
        });
        let ng = self.ng(x);
        self.push(out, Op::Unary { x, kind }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn relu6(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu6)
    }
    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Silu)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    /// `a + b`, with `b` broadcast over any unit dimension.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.broadcast_binary(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add { a, b }, ng)
    }

    /// `a * b`, with `b` broadcast over any unit dimension.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.broadcast_binary(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul { a, b }, ng)
    }

    fn broadcast_binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        assert!(sa.accepts_broadcast(&sb), "cannot broadcast {sb} onto {sa}");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Tensor::zeros(sa);
        if sa == sb {
            for ((o, &x), &y) in out.data_mut().iter_mut().zip(av).zip(bv) {
                *o = f(x, y);
            }
        } else {
            let o = out.data_mut();
            for_each_broadcast(sa, sb, |ia, ib| o[ia] = f(av[ia], bv[ib]));
        }
        out
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(out, Op::Scale { x, s }, ng)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let first = self.shape(parts[0]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert!(s.n == first.n && s.h == first.h && s.w == first.w, "concat shape mismatch {s} vs {first}");
            c_total += s.c;
        }
        let os = Shape::new(first.n, c_total, first.h, first.w);
        let hw = first.spatial();
        let mut out = Tensor::zeros(os);
        {
            let o = out.data_mut();
            for b in 0..first.n {
                let mut c_off = 0;
                for &p in parts {
                    let s = self.shape(p);
                    let src = &self.value(p).data()[b * s.c * hw..(b + 1) * s.c * hw];
                    o[(b * c_total + c_off) * hw..][..s.c * hw].copy_from_slice(src);
                    c_off += s.c;
                }
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(out, Op::Concat { parts: parts.to_vec() }, ng)
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let hw = s.spatial();
        let inv = T::one() / T::c(hw as f64);
        let xv = self.value(x).data();
        let data: Vec<T> = xv.chunks_exact(hw).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec(Shape::new(s.n, s.c, 1, 1), data);
        let ng = self.ng(x);
        self.push(out, Op::GlobalAvgPool { x }, ng)
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert!(s.h % 2 == 0 && s.w % 2 == 0, "max_pool2 needs even spatial dims, got {s}");
        let (ho, wo) = (s.h / 2, s.w / 2);
        let os = Shape::new(s.n, s.c, ho, wo);
        let mut out = Tensor::zeros(os);
        let mut argmax = vec![0u32; os.numel()];
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            for plane in 0..s.n * s.c {
                let src = &xv[plane * s.spatial()..];
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut best = (2 * oh) * s.w + 2 * ow;
                        for (dh, dw) in [(0, 1), (1, 0), (1, 1)] {
                            let i = (2 * oh + dh) * s.w + 2 * ow + dw;
                            if src[i] > src[best] {
                                best = i;
                            }
                        }
                        let oi = plane * ho * wo + oh * wo + ow;
                        o[oi] = src[best];
                        argmax[oi] = best as u32;
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MaxPool2 { x, argmax }, ng)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let os = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
        let mut out = Tensor::zeros(os);
        {
            let xv = self.value(x).data();
            let o = out.data_mut();
            for plane in 0..s.n * s.c {
                let src = &xv[plane * s.spatial()..][..s.spatial()];
                let dst = &mut o[plane * os.spatial()..][..os.spatial()];
                for h in 0..os.h {
                    for w in 0..os.w {
                        dst[h * os.w + w] = src[(h / 2) * s.w + w / 2];
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Upsample2 { x }, ng)
    }

    /// Single-head softmax attention where each spatial position is a token and
    /// channels are the embedding.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let s = self.shape(q);
        assert!(self.shape(k) == s && self.shape(v) == s, "attention operands must share a shape");
        let (d, l) = (s.c, s.spatial());
        let mut probs = vec![T::zero(); s.n * l * l];
        let mut out = Tensor::zeros(s);
        {
            let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            let o = out.data_mut();
            for b in 0..s.n {
                let r = b * d * l..(b + 1) * d * l;
                kernels::attention_forward(&qv[r.clone()], &kv[r.clone()], &vv[r.clone()], d, l, &mut probs[b * l * l..(b + 1) * l * l], &mut o[r]);
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, probs }, ng)
    }

    /// Scales every sample to unit root-mean-square.
    pub fn rms_normalize(&mut self, x: Var, eps: T) -> Var {
        let s = self.shape(x);
        let per = s.c * s.spatial();
        let inv_m = T::one() / T::c(per as f64);
        let xv = self.value(x).data();
        let mut rms = Vec::with_capacity(s.n);
        let mut data = Vec::with_capacity(xv.len());
        for chunk in xv.chunks_exact(per) {
            let ms: T = chunk.iter().map(|&v| v * v).sum::<T>() * inv_m;
            let r = (ms + eps).sqrt();
            rms.push(r);
            data.extend(chunk.iter().map(|&v| v / r));
        }
        let ng = self.ng(x);
        self.push(Tensor::from_vec(s, data), Op::RmsNormalize { x, rms }, ng)
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse operands differ in shape");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let m = T::c(av.len() as f64);
        let v: T = av.iter().zip(bv).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / m;
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(v), Op::Mse { a, b }, ng)
    }

    /// Weighted sum of scalar nodes.
    pub fn lincomb(&mut self, terms: &[(Var, T)]) -> Var {
        let mut acc = T::zero();
        for &(v, c) in terms {
            acc += c * self.value(v).item();
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Tensor::scalar(acc), Op::LinComb { terms: terms.to_vec() }, ng)
    }

    /// Scalar node with a precomputed gradient with respect to `x`.
    pub fn custom_scalar(&mut self, x: Var, value: T, grad: Tensor<T>) -> Var {
        assert_eq!(grad.shape(), self.shape(x), "custom gradient shape mismatch");
        let ng = self.ng(x);
        self.push(Tensor::scalar(value), Op::Custom { x, grad }, ng)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.shape(root).numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut Tensor<T>> {
        if !self.ng(v) {
            return None;
        }
        let s = self.shape(v);
        Some(grads[v.0].get_or_insert_with(|| Tensor::zeros(s)))
    }

    fn take_acc(&self, grads: &mut [Option<Tensor<T>>], v: Var) -> Option<Tensor<T>> {
        if !self.ng(v) {
            return None;
        }
        Some(grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.shape(v))))
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, geom, depthwise } => {
                let xs = self.shape(*x);
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = self.take_acc(grads, *x);
                let mut dw = self.take_acc(grads, *w);
                let mut db = b.and_then(|b| self.take_acc(grads, b));
                let f = if *depthwise { kernels::dw_backward::<T> } else { kernels::conv_backward::<T> };
                f(
                    xv,
                    xs.n,
                    geom,
                    wv,
                    gd,
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(t) = dx {
                    grads[x.0] = Some(t);
                }
                if let Some(t) = dw {
                    grads[w.0] = Some(t);
                }
                if let (Some(t), Some(b)) = (db, b) {
                    grads[b.0] = Some(t);
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, inv_std, batch_stats } => {
                let s = self.shape(*x);
                let hw = s.spatial();
                let m = T::c((s.n * hw) as f64);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut sum_dy = vec![T::zero(); s.c];
                let mut sum_dy_xhat = vec![T::zero(); s.c];
                for b in 0..s.n {
                    for c in 0..s.c {
                        let off = (b * s.c + c) * hw;
                        for i in off..off + hw {
                            let xhat = (xv[i] - mean[c]) * inv_std[c];
                            sum_dy[c] += gd[i];
                            sum_dy_xhat[c] += gd[i] * xhat;
                        }
                    }
                }
                if let Some(dg) = self.acc(grads, *gamma) {
                    for (d, &v) in dg.data_mut().iter_mut().zip(&sum_dy_xhat) {
                        *d += v;
                    }
                }
                if let Some(dbt) = self.acc(grads, *beta) {
                    for (d, &v) in dbt.data_mut().iter_mut().zip(&sum_dy) {
                        *d += v;
                    }
                }
                if let Some(dx) = self.acc(grads, *x) {
                    let dxd = dx.data_mut();
                    for b in 0..s.n {
                        for c in 0..s.c {
                            let off = (b * s.c + c) * hw;
                            let k = gv[c] * inv_std[c];
                            for i in off..off + hw {
                                if *batch_stats {
                                    let xhat = (xv[i] - mean[c]) * inv_std[c];
                                    dxd[i] += k * (gd[i] - sum_dy[c] / m - xhat * sum_dy_xhat[c] / m);
                                } else {
                                    dxd[i] += k * gd[i];
                                }
                            }
                        }
                    }
                }
            }
            Op::ChannelNorm { x, gamma, beta, mean, inv_std } => {
                let s = self.shape(*x);
                let hw = s.spatial();
                let inv_c = T::one() / T::c(s.c as f64);
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data().to_vec();
                let mut dgamma = vec![T::zero(); s.c];
                let mut dbeta = vec![T::zero(); s.c];
                let mut dx_local = vec![T::zero(); xv.len()];
                for b in 0..s.n {
                    let base = b * s.c * hw;
                    for p in 0..hw {
                        let (mu, is) = (mean[b * hw + p], inv_std[b * hw + p]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for c in 0..s.c {
                            let i = base + c * hw + p;
                            let xhat = (xv[i] - mu) * is;
                            let dxhat = gd[i] * gv[c];
                            dgamma[c] += gd[i] * xhat;
                            dbeta[c] += gd[i];
                            s1 += dxhat;
                            s2 += dxhat * xhat;
                        }
                        for c in 0..s.c {
                            let i = base + c * hw + p;
                            let xhat = (xv[i] - mu) * is;
                            let dxhat = gd[i] * gv[c];
                            dx_local[i] = is * (dxhat - s1 * inv_c - xhat * s2 * inv_c);
                        }
                    }
                }
                if let Some(t) = self.acc(grads, *gamma) {
                    t.data_mut().iter_mut().zip(&dgamma).for_each(|(d, &v)| *d += v);
                }
                if let Some(t) = self.acc(grads, *beta) {
                    t.data_mut().iter_mut().zip(&dbeta).for_each(|(d, &v)| *d += v);
                }
                if let Some(t) = self.acc(grads, *x) {
                    t.data_mut().iter_mut().zip(&dx_local).for_each(|(d, &v)| *d += v);
                }
            }
            Op::Unary { x, kind } => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let six = T::c(6.0);
                if let Some(dx) = self.acc(grads, *x) {
                    for (((d, &gi), &xi), &yi) in dx.data_mut().iter_mut().zip(gd).zip(xv).zip(yv) {
                        let local = match kind {
                            Unary::Relu => {
                                if xi > T::zero() {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Relu6 => {
                                if xi > T::zero() && xi < six {
                                    T::one()
                                } else {
                                    T::zero()
                                }
                            }
                            Unary::Silu => {
                                let sg = sigmoid(xi);
                                sg * (T::one() + xi * (T::one() - sg))
                            }
                            Unary::Sigmoid => yi * (T::one() - yi),
                        };
                        *d += gi * local;
                    }
                }
            }
            Op::Add { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                if let Some(da) = self.acc(grads, *a) {
                    da.add_assign(g);
                }
                if let Some(db) = self.acc(grads, *b) {
                    if sa == sb {
                        db.add_assign(g);
                    } else {
                        let dbd = db.data_mut();
                        for_each_broadcast(sa, sb, |ia, ib| dbd[ib] += gd[ia]);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.acc(grads, *a) {
                    let dad = da.data_mut();
                    for_each_broadcast(sa, sb, |ia, ib| dad[ia] += gd[ia] * bv[ib]);
                }
                if let Some(db) = self.acc(grads, *b) {
                    let dbd = db.data_mut();
                    for_each_broadcast(sa, sb, |ia, ib| dbd[ib] += gd[ia] * av[ia]);
                }
            }
            Op::Scale { x, s } => {
                if let Some(dx) = self.acc(grads, *x) {
                    dx.data_mut().iter_mut().zip(gd).for_each(|(d, &gi)| *d += gi * *s);
                }
            }
            Op::Concat { parts } => {
                let os = node.value.shape();
                let hw = os.spatial();
                let mut c_off = 0;
                for &p in parts {
                    let s = self.shape(p);
                    if let Some(dp) = self.acc(grads, p) {
                        let dpd = dp.data_mut();
                        for b in 0..s.n {
                            let src = &gd[(b * os.c + c_off) * hw..][..s.c * hw];
                            dpd[b * s.c * hw..(b + 1) * s.c * hw].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                        }
                    }
                    c_off += s.c;
                }
            }
            Op::GlobalAvgPool { x } => {
                let s = self.shape(*x);
                let hw = s.spatial();
                let inv = T::one() / T::c(hw as f64);
                if let Some(dx) = self.acc(grads, *x) {
                    for (chunk, &gi) in dx.data_mut().chunks_exact_mut(hw).zip(gd) {
                        chunk.iter_mut().for_each(|d| *d += gi * inv);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let s = self.shape(*x);
                let per_out = s.spatial() / 4;
                if let Some(dx) = self.acc(grads, *x) {
                    let dxd = dx.data_mut();
                    for (oi, (&gi, &am)) in gd.iter().zip(argmax).enumerate() {
                        let plane = oi / per_out;
                        dxd[plane * s.spatial() + am as usize] += gi;
                    }
                }
            }
            Op::Upsample2 { x } => {
                let s = self.shape(*x);
                let os = node.value.shape();
                if let Some(dx) = self.acc(grads, *x) {
                    let dxd = dx.data_mut();
                    for plane in 0..s.n * s.c {
                        let src = &gd[plane * os.spatial()..][..os.spatial()];
                        let dst = &mut dxd[plane * s.spatial()..][..s.spatial()];
                        for h in 0..os.h {
                            for w in 0..os.w {
                                dst[(h / 2) * s.w + w / 2] += src[h * os.w + w];
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, probs } => {
                let s = self.shape(*q);
                let (d, l) = (s.c, s.spatial());
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                for b in 0..s.n {
                    let r = b * d * l..(b + 1) * d * l;
                    kernels::attention_backward(
                        &qv[r.clone()],
                        &kv[r.clone()],
                        &vv[r.clone()],
                        &probs[b * l * l..(b + 1) * l * l],
                        &gd[r.clone()],
                        d,
                        l,
                        &mut dq[r.clone()],
                        &mut dk[r.clone()],
                        &mut dv[r],
                    );
                }
                for (var, local) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(t) = self.acc(grads, var) {
                        t.data_mut().iter_mut().zip(&local).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            Op::RmsNormalize { x, rms } => {
                let s = self.shape(*x);
                let per = s.c * s.spatial();
                let inv_m = T::one() / T::c(per as f64);
                let yv = node.value.data();
                if let Some(dx) = self.acc(grads, *x) {
                    let dxd = dx.data_mut();
                    for (b, &r) in rms.iter().enumerate() {
                        let rg = b * per..(b + 1) * per;
                        let dot: T = gd[rg.clone()].iter().zip(&yv[rg.clone()]).map(|(&a, &b)| a * b).sum::<T>() * inv_m;
                        for i in rg {
                            dxd[i] += (gd[i] - yv[i] * dot) / r;
                        }
                    }
                }
            }
            Op::Mse { a, b } => {
                let gs = g.item();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let k = T::c(2.0) * gs / T::c(av.len() as f64);
                if let Some(da) = self.acc(grads, *a) {
                    da.data_mut().iter_mut().zip(av.iter().zip(bv)).for_each(|(d, (&x, &y))| *d += k * (x - y));
                }
                if let Some(db) = self.acc(grads, *b) {
                    db.data_mut().iter_mut().zip(av.iter().zip(bv)).for_each(|(d, (&x, &y))| *d -= k * (x - y));
                }
            }
            Op::LinComb { terms } => {
                let gs = g.item();
                for &(v, c) in terms {
                    if let Some(dv) = self.acc(grads, v) {
                        dv.data_mut()[0] += gs * c;
                    }
                }
            }
            Op::Custom { x, grad } => {
                let gs = g.item();
                if let Some(dx) = self.acc(grads, *x) {
                    dx.data_mut().iter_mut().zip(grad.data()).for_each(|(d, &v)| *d += gs * v);
                }
            }
        }
    }

    /// Parameter gradients recorded in `grads`, in node order.
    pub(crate) fn param_grads<'a>(&'a self, grads: &'a Gradients<T>) -> impl Iterator<Item = (ParamId, &'a Tensor<T>)> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(id) => grads.grads[i].as_ref().map(|g| (id, g)),
            _ => None,
        })
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Visits `(index_in_a, index_in_b)` for every element of `sa`, where `sb`
/// broadcasts onto `sa`.
fn for_each_broadcast(sa: Shape, sb: Shape, mut f: impl FnMut(usize, usize)) {
    let pick = |full: usize, small: usize, i: usize| if small == 1 && full != 1 { 0 } else { i };
    let mut ia = 0;
    for n in 0..sa.n {
        let bn = pick(sa.n, sb.n, n);
        for c in 0..sa.c {
            let bc = pick(sa.c, sb.c, c);
            for h in 0..sa.h {
                let bh = pick(sa.h, sb.h, h);
                let row = ((bn * sb.c + bc) * sb.h + bh) * sb.w;
                if sb.w == 1 && sa.w != 1 {
                    for _ in 0..sa.w {
                        f(ia, row);
                        ia += 1;
                    }
                } else {
                    for w in 0..sa.w {
                        f(ia, row + w);
                        ia += 1;
                    }
                }
            }
        }
    }
}
