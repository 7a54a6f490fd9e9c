//! Encoder building blocks.

use crate::nn::{Act, ChannelNorm, Conv2d, ConvBnAct, Ctx, Init, SqueezeExcite};
use crate::tensor::{Scalar, Var};

/// MobileNetV2 block: optional 1x1 expansion, depthwise 3x3, linear 1x1 projection.
#[derive(Clone, Debug)]
pub struct InvertedResidual {
    pub expand: Option<ConvBnAct>,
    pub dw: ConvBnAct,
    pub project: ConvBnAct,
    pub residual: bool,
}

impl InvertedResidual {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cin: usize, cout: usize, expansion: usize, stride: usize) -> Self {
        let hidden = cin * expansion;
        let expand = (expansion != 1).then(|| init.scoped("expand", |i| ConvBnAct::new(i, cin, hidden, 1, 1, Act::Relu6)));
        let dw = init.scoped("dw", |i| ConvBnAct::depthwise(i, hidden, 3, stride, Act::Relu6));
        let project = init.scoped("project", |i| ConvBnAct::new(i, hidden, cout, 1, 1, Act::Identity));
        InvertedResidual { expand, dw, project, residual: stride == 1 && cin == cout }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let mut y = x;
        if let Some(e) = &self.expand {
            y = e.forward(cx, y);
        }
        y = self.dw.forward(cx, y);
        y = self.project.forward(cx, y);
        if self.residual {
            cx.graph.add(x, y)
        } else {
            y
        }
    }

    pub fn param_count(&self) -> usize {
        self.expand.as_ref().map_or(0, |e| e.param_count()) + self.dw.param_count() + self.project.param_count()
    }
}

/// Fused-MBConv: a full 3x3 expansion convolution replaces expand + depthwise.
#[derive(Clone, Debug)]
pub struct FusedMbConv {
    pub expand: ConvBnAct,
    pub project: Option<ConvBnAct>,
    pub residual: bool,
}

impl FusedMbConv {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cin: usize, cout: usize, expansion: usize, stride: usize) -> Self {
        if expansion == 1 {
            let expand = init.scoped("expand", |i| ConvBnAct::new(i, cin, cout, 3, stride, Act::Silu));
            return FusedMbConv { expand, project: None, residual: stride == 1 && cin == cout };
        }
        let hidden = cin * expansion;
        let expand = init.scoped("expand", |i| ConvBnAct::new(i, cin, hidden, 3, stride, Act::Silu));
        let project = Some(init.scoped("project", |i| ConvBnAct::new(i, hidden, cout, 1, 1, Act::Identity)));
        FusedMbConv { expand, project, residual: stride == 1 && cin == cout }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let mut y = self.expand.forward(cx, x);
        if let Some(p) = &self.project {
            y = p.forward(cx, y);
        }
        if self.residual {
            cx.graph.add(x, y)
        } else {
            y
        }
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count() + self.project.as_ref().map_or(0, |p| p.param_count())
    }
}

/// MBConv with squeeze-excitation and SiLU.
#[derive(Clone, Debug)]
pub struct MbConv {
    pub expand: ConvBnAct,
    pub dw: ConvBnAct,
    pub se: SqueezeExcite,
    pub project: ConvBnAct,
    pub residual: bool,
}

impl MbConv {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, cin: usize, cout: usize, expansion: usize, stride: usize) -> Self {
        let hidden = cin * expansion;
        MbConv {
            expand: init.scoped("expand", |i| ConvBnAct::new(i, cin, hidden, 1, 1, Act::Silu)),
            dw: init.scoped("dw", |i| ConvBnAct::depthwise(i, hidden, 3, stride, Act::Silu)),
            se: init.scoped("se", |i| SqueezeExcite::new(i, hidden, cin / 4)),
            project: init.scoped("project", |i| ConvBnAct::new(i, hidden, cout, 1, 1, Act::Identity)),
            residual: stride == 1 && cin == cout,
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.expand.forward(cx, x);
        let y = self.dw.forward(cx, y);
        let y = self.se.forward(cx, y);
        let y = self.project.forward(cx, y);
        if self.residual {
            cx.graph.add(x, y)
        } else {
            y
        }
    }

    pub fn param_count(&self) -> usize {
        self.expand.param_count() + self.dw.param_count() + self.se.param_count() + self.project.param_count()
    }
}

/// Local convolution, a transformer layer over spatial tokens, then fusion
/// with the block input.
#[derive(Clone, Debug)]
pub struct MobileVitBlock {
    pub local: ConvBnAct,
    pub to_tokens: Conv2d,
    pub norm1: ChannelNorm,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub out: Conv2d,
    pub norm2: ChannelNorm,
    pub ffn1: Conv2d,
    pub ffn2: Conv2d,
    pub from_tokens: ConvBnAct,
    pub fuse: ConvBnAct,
}

impl MobileVitBlock {
    pub fn new<T: Scalar>(init: &mut Init<'_, T>, channels: usize, dim: usize) -> Self {
        let c = channels;
        MobileVitBlock {
            local: init.scoped("local", |i| ConvBnAct::new(i, c, c, 3, 1, Act::Silu)),
            to_tokens: init.scoped("to_tokens", |i| Conv2d::new(i, c, dim, 1, 1, false)),
            norm1: init.scoped("norm1", |i| ChannelNorm::new(i, dim)),
            q: init.scoped("q", |i| Conv2d::new(i, dim, dim, 1, 1, true)),
            k: init.scoped("k", |i| Conv2d::new(i, dim, dim, 1, 1, true)),
            v: init.scoped("v", |i| Conv2d::new(i, dim, dim, 1, 1, true)),
            out: init.scoped("out", |i| Conv2d::new(i, dim, dim, 1, 1, true)),
            norm2: init.scoped("norm2", |i| ChannelNorm::new(i, dim)),
            ffn1: init.scoped("ffn1", |i| Conv2d::new(i, dim, 2 * dim, 1, 1, true)),
            ffn2: init.scoped("ffn2", |i| Conv2d::new(i, 2 * dim, dim, 1, 1, true)),
            from_tokens: init.scoped("from_tokens", |i| ConvBnAct::new(i, dim, c, 1, 1, Act::Silu)),
            fuse: init.scoped("fuse", |i| ConvBnAct::new(i, 2 * c, c, 3, 1, Act::Silu)),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.local.forward(cx, x);
        let t = self.to_tokens.forward(cx, y);
        let n = self.norm1.forward(cx, t);
        let (q, k, v) = (self.q.forward(cx, n), self.k.forward(cx, n), self.v.forward(cx, n));
        let a = cx.graph.attention(q, k, v);
        let a = self.out.forward(cx, a);
        let t = cx.graph.add(t, a);
        let n = self.norm2.forward(cx, t);
        let f = self.ffn1.forward(cx, n);
        let f = cx.graph.silu(f);
        let f = self.ffn2.forward(cx, f);
        let t = cx.graph.add(t, f);
        let y = self.from_tokens.forward(cx, t);
        let cat = cx.graph.concat_channels(&[x, y]);
        self.fuse.forward(cx, cat)
    }

    pub fn param_count(&self) -> usize {
        self.local.param_count()
            + [&self.to_tokens, &self.q, &self.k, &self.v, &self.out, &self.ffn1, &self.ffn2].iter().map(|c| c.param_count()).sum::<usize>()
            + self.norm1.param_count()
            + self.norm2.param_count()
            + self.from_tokens.param_count()
            + self.fuse.param_count()
    }
}

#[derive(Clone, Debug)]
pub enum Block {
    Conv(ConvBnAct),
    MaxPool,
    InvertedResidual(InvertedResidual),
    FusedMbConv(FusedMbConv),
    MbConv(MbConv),
    MobileVit(MobileVitBlock),
}

impl Block {
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        match self {
            Block::Conv(b) => b.forward(cx, x),
            Block::MaxPool => cx.graph.max_pool2(x),
            Block::InvertedResidual(b) => b.forward(cx, x),
            Block::FusedMbConv(b) => b.forward(cx, x),
            Block::MbConv(b) => b.forward(cx, x),
            Block::MobileVit(b) => b.forward(cx, x),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Block::Conv(b) => b.param_count(),
            Block::MaxPool => 0,
            Block::InvertedResidual(b) => b.param_count(),
            Block::FusedMbConv(b) => b.param_count(),
            Block::MbConv(b) => b.param_count(),
            Block::MobileVit(b) => b.param_count(),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Block::Conv(_) => "conv_bn_act",
            Block::MaxPool => "max_pool",
            Block::InvertedResidual(_) => "inverted_residual",
            Block::FusedMbConv(_) => "fused_mbconv",
            Block::MbConv(_) => "mbconv",
            Block::MobileVit(_) => "mobilevit",
        }
    }
}
