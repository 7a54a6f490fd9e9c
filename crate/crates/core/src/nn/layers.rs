use serde::{Deserialize, Serialize};

use super::{Ctx, Init, ParamId};
use crate::tensor::{Scalar, Shape, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    Identity,
    Relu,
    Relu6,
    Silu,
    Sigmoid,
}

impl Act {
    pub fn apply<T: Scalar>(self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        match self {
            Act::Identity => x,
            Act::Relu => cx.graph.relu(x),
            Act::Relu6 => cx.graph.relu6(x),
            Act::Silu => cx.graph.silu(x),
            Act::Sigmoid => cx.graph.sigmoid(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub depthwise: bool,
}

impl Conv2d {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Self {
        let weight = init.he("weight", Shape::new(cout, cin, k, k), cin * k * k);
        let bias = bias.then(|| init.constant("bias", Shape::new(1, cout, 1, 1), 0.0));
        Conv2d { weight, bias, cin, cout, k, stride, depthwise: false }
    }

    pub fn depthwise<T: Scalar>(init: &mut Init<'_, T>, channels: usize, k: usize, stride: usize) -> Self {
        let weight = init.he("weight", Shape::new(channels, 1, k, k), k * k);
        Conv2d { weight, bias: None, cin: channels, cout: channels, k, stride, depthwise: true }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.graph.conv2d(x, w, b, self.stride, self.k / 2, self.depthwise)
    }

    pub fn param_count(&self) -> usize {
        let w = if self.depthwise { self.cout * self.k * self.k } else { self.cout * self.cin * self.k * self.k };
        w + if self.bias.is_some() { self.cout } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        BatchNorm2d {
            gamma: init.constant("gamma", s, 1.0),
            beta: init.constant("beta", s, 0.0),
            running_mean: init.buffer("running_mean", s, 0.0),
            running_var: init.buffer("running_var", s, 1.0),
            channels,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        let eps = T::c(BN_EPS);
        if cx.train {
            let (y, stats) = cx.graph.batch_norm(x, g, b, eps, None);
            if cx.update_stats {
                let stats = stats.expect("batch statistics in train mode");
                let m = T::c(BN_MOMENTUM);
                let keep = T::one() - m;
                for (r, &s) in cx.store.value_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                    *r = keep * *r + m * s;
                }
                for (r, &s) in cx.store.value_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
                    *r = keep * *r + m * s;
                }
            }
            y
        } else {
            let mean = cx.store.value(self.running_mean).data().to_vec();
            let var = cx.store.value(self.running_var).data().to_vec();
            cx.graph.batch_norm(x, g, b, eps, Some((&mean, &var))).0
        }
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}

/// Convolution, batch norm and activation.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Act,
}

impl ConvBnAct {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cin: usize, cout: usize, k: usize, stride: usize, act: Act) -> Self {
        let conv = init.scoped("conv", |i| Conv2d::new(i, cin, cout, k, stride, false));
        let bn = init.scoped("bn", |i| BatchNorm2d::new(i, cout));
        ConvBnAct { conv, bn, act }
    }

    pub fn depthwise<T: Scalar>(init: &mut Init<'_, T>, channels: usize, k: usize, stride: usize, act: Act) -> Self {
        let conv = init.scoped("conv", |i| Conv2d::depthwise(i, channels, k, stride));
        let bn = init.scoped("bn", |i| BatchNorm2d::new(i, channels));
        ConvBnAct { conv, bn, act }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.conv.forward(cx, x);
        let y = self.bn.forward(cx, y);
        self.act.apply(cx, y)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }
}

/// Channel re-weighting from globally pooled descriptors.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Conv2d,
    pub expand: Conv2d,
}

impl SqueezeExcite {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize, squeezed: usize) -> Self {
        let squeezed = squeezed.max(1);
        let reduce = init.scoped("reduce", |i| Conv2d::new(i, channels, squeezed, 1, 1, true));
        let expand = init.scoped("expand", |i| Conv2d::new(i, squeezed, channels, 1, 1, true));
        SqueezeExcite { reduce, expand }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let s = cx.graph.global_avg_pool(x);
        let s = self.reduce.forward(cx, s);
        let s = cx.graph.silu(s);
        let s = self.expand.forward(cx, s);
        let s = cx.graph.sigmoid(s);
        cx.graph.mul(x, s)
    }

    pub fn param_count(&self) -> usize {
        self.reduce.param_count() + self.expand.param_count()
    }
}

/// Additive attention gate on a skip connection: the decoder signal decides
/// which skip positions pass through.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub skip_proj: ConvBnAct,
    pub gate_proj: ConvBnAct,
    pub psi: ConvBnAct,
}

impl AttentionGate {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, skip_ch: usize, gate_ch: usize) -> Self {
        let inter = (skip_ch / 2).max(1);
        AttentionGate {
            skip_proj: init.scoped("skip", |i| ConvBnAct::new(i, skip_ch, inter, 1, 1, Act::Identity)),
            gate_proj: init.scoped("gate", |i| ConvBnAct::new(i, gate_ch, inter, 1, 1, Act::Identity)),
            psi: init.scoped("psi", |i| ConvBnAct::new(i, inter, 1, 1, 1, Act::Sigmoid)),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, skip: Var, gate: Var) -> Var {
        let a = self.skip_proj.forward(cx, skip);
        let b = self.gate_proj.forward(cx, gate);
        let s = cx.graph.add(a, b);
        let s = cx.graph.relu(s);
        let alpha = self.psi.forward(cx, s);
        cx.graph.mul(skip, alpha)
    }

    pub fn param_count(&self) -> usize {
        self.skip_proj.param_count() + self.gate_proj.param_count() + self.psi.param_count()
    }
}

/// Per-position normalisation across channels with a learned affine map.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl ChannelNorm {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize) -> Self {
        let s = Shape::new(1, channels, 1, 1);
        ChannelNorm { gamma: init.constant("gamma", s, 1.0), beta: init.constant("beta", s, 0.0), channels }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let g = cx.param(self.gamma);
        let b = cx.param(self.beta);
        cx.graph.channel_norm(x, g, b, T::c(BN_EPS))
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }
}
