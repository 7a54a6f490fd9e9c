//! U-Net style encoder-decoder networks with pluggable lightweight encoders.

mod blocks;
mod checkpoint;

pub use blocks::{Block, FusedMbConv, InvertedResidual, MbConv, MobileVitBlock};
pub use checkpoint::{load_checkpoint, read_checkpoint_meta, save_checkpoint, CheckpointMeta};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::nn::{Act, AttentionGate, Conv2d, ConvBnAct, Ctx, Init, ParamStore};
use crate::tensor::{Scalar, Shape, Tensor, Var};
use crate::{Error, Result};

pub const STAGES: usize = 5;
pub const DEFAULT_INPUT: usize = 256;
/// Fixed multiplier on the head convolution's output before the sigmoid.
pub const LOGIT_GAIN: f64 = 10.0;

/// Distance kept from 0 and 1 by [`Model::predict`].
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    VggLike,
    InvertedResidual,
    Mbconv,
    MobilevitLike,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::VggLike, Family::InvertedResidual, Family::Mbconv, Family::MobilevitLike];

    pub fn name(self) -> &'static str {
        match self {
            Family::VggLike => "vgg_like",
            Family::InvertedResidual => "inverted_residual",
            Family::Mbconv => "mbconv",
            Family::MobilevitLike => "mobilevit_like",
        }
    }

    /// Default stage widths at width multiplier 1.
    pub fn default_channels(self) -> [usize; STAGES] {
        match self {
            Family::VggLike => [32, 64, 128, 256, 384],
            Family::InvertedResidual => [16, 24, 32, 64, 96],
            Family::Mbconv => [24, 32, 48, 80, 112],
            Family::MobilevitLike => [16, 24, 48, 64, 80],
        }
    }

    pub fn default_decoder(self) -> [usize; STAGES] {
        match self {
            Family::VggLike => [128, 96, 64, 32, 16],
            _ => [96, 64, 48, 32, 16],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Family::ALL.into_iter().find(|f| f.name() == s).ok_or_else(|| Error::Config(format!("unknown encoder family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub family: Family,
    pub stage_channels: Vec<usize>,
    pub width_multiplier: f64,
}

impl EncoderSpec {
    pub fn new(family: Family) -> Self {
        EncoderSpec { family, stage_channels: family.default_channels().to_vec(), width_multiplier: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != STAGES {
            return Err(Error::Config(format!("stage_channels must list {STAGES} stages, got {}", self.stage_channels.len())));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("stage_channels must be positive".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config(format!("width_multiplier must be positive, got {}", self.width_multiplier)));
        }
        Ok(())
    }

    /// Stage widths after the multiplier, rounded to a multiple of 4 (at least 4).
    pub fn channels(&self) -> Vec<usize> {
        self.stage_channels.iter().map(|&c| (((c as f64 * self.width_multiplier) / 4.0).round() as usize).max(1) * 4).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(flatten)]
    pub encoder: EncoderSpec,
    pub decoder_channels: Vec<usize>,
    pub use_attention: bool,
    /// Square input side; must be a multiple of 32.
    #[serde(default = "default_input")]
    pub input_size: usize,
}

fn default_input() -> usize {
    DEFAULT_INPUT
}

impl ModelSpec {
    pub fn new(family: Family) -> Self {
        ModelSpec {
            encoder: EncoderSpec::new(family),
            decoder_channels: family.default_decoder().to_vec(),
            use_attention: false,
            input_size: DEFAULT_INPUT,
        }
    }

    pub fn with_input(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn with_width(mut self, w: f64) -> Self {
        self.encoder.width_multiplier = w;
        self
    }

    pub fn with_attention(mut self, on: bool) -> Self {
        self.use_attention = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder_channels.len() != STAGES {
            return Err(Error::Config(format!(
                "decoder depth {} does not match the {STAGES} encoder stages",
                self.decoder_channels.len()
            )));
        }
        if self.decoder_channels.contains(&0) {
            return Err(Error::Config("decoder_channels must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % (1 << STAGES) != 0 {
            return Err(Error::Config(format!("input_size {} must be a positive multiple of 32", self.input_size)));
        }
        Ok(())
    }

    /// Short display name, e.g. `mbconv-w1.00-att`.
    pub fn label(&self) -> String {
        format!(
            "{}-w{:.2}{}",
            self.encoder.family,
            self.encoder.width_multiplier,
            if self.use_attention { "-att" } else { "" }
        )
    }

    /// Spatial side of pyramid level `i`.
    pub fn level_side(&self, i: usize) -> usize {
        self.input_size >> (i + 1)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub stages: Vec<Vec<Block>>,
    pub channels: Vec<usize>,
}

impl Encoder {
    pub fn build<T: Scalar>(init: &mut Init<'_, T>, spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let ch = spec.channels();
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let cin = if s == 0 { 3 } else { ch[s - 1] };
            let c = ch[s];
            let blocks = init.scoped(format!("encoder.stage{s}"), |init| {
                let mut b = Vec::new();
                match (spec.family, s) {
                    (Family::VggLike, 0) => {
                        b.push(init.scoped("b0", |i| Block::Conv(ConvBnAct::new(i, cin, c, 3, 2, Act::Relu))));
                        b.push(init.scoped("b1", |i| Block::Conv(ConvBnAct::new(i, c, c, 3, 1, Act::Relu))));
                    }
                    (Family::VggLike, _) => {
                        b.push(Block::MaxPool);
                        b.push(init.scoped("b1", |i| Block::Conv(ConvBnAct::new(i, cin, c, 3, 1, Act::Relu))));
                        b.push(init.scoped("b2", |i| Block::Conv(ConvBnAct::new(i, c, c, 3, 1, Act::Relu))));
                    }
                    (Family::InvertedResidual, 0) => {
                        b.push(init.scoped("b0", |i| Block::Conv(ConvBnAct::new(i, cin, c, 3, 2, Act::Relu6))));
                        b.push(init.scoped("b1", |i| Block::InvertedResidual(InvertedResidual::new(i, c, c, 1, 1))));
                    }
                    (Family::InvertedResidual, _) => {
                        b.push(init.scoped("b0", |i| Block::InvertedResidual(InvertedResidual::new(i, cin, c, 4, 2))));
                        b.push(init.scoped("b1", |i| Block::InvertedResidual(InvertedResidual::new(i, c, c, 4, 1))));
                    }
                    (Family::Mbconv, 0) => {
                        b.push(init.scoped("b0", |i| Block::Conv(ConvBnAct::new(i, cin, c, 3, 2, Act::Silu))));
                        b.push(init.scoped("b1", |i| Block::FusedMbConv(FusedMbConv::new(i, c, c, 1, 1))));
                    }
                    (Family::Mbconv, 1 | 2) => {
                        b.push(init.scoped("b0", |i| Block::FusedMbConv(FusedMbConv::new(i, cin, c, 4, 2))));
                        b.push(init.scoped("b1", |i| Block::FusedMbConv(FusedMbConv::new(i, c, c, 2, 1))));
                    }
                    (Family::Mbconv, _) => {
                        b.push(init.scoped("b0", |i| Block::MbConv(MbConv::new(i, cin, c, 4, 2))));
                        b.push(init.scoped("b1", |i| Block::MbConv(MbConv::new(i, c, c, 4, 1))));
                    }
                    (Family::MobilevitLike, 0) => {
                        b.push(init.scoped("b0", |i| Block::Conv(ConvBnAct::new(i, cin, c, 3, 2, Act::Silu))));
                        b.push(init.scoped("b1", |i| Block::InvertedResidual(InvertedResidual::new(i, c, c, 2, 1))));
                    }
                    (Family::MobilevitLike, 1 | 2) => {
                        b.push(init.scoped("b0", |i| Block::InvertedResidual(InvertedResidual::new(i, cin, c, 4, 2))));
                        b.push(init.scoped("b1", |i| Block::InvertedResidual(InvertedResidual::new(i, c, c, 4, 1))));
                    }
                    (Family::MobilevitLike, _) => {
                        b.push(init.scoped("b0", |i| Block::InvertedResidual(InvertedResidual::new(i, cin, c, 4, 2))));
                        b.push(init.scoped("b1", |i| Block::MobileVit(MobileVitBlock::new(i, c, c))));
                    }
                }
                b
            });
            stages.push(blocks);
        }
        Ok(Encoder { stages, channels: ch })
    }

    /// Feature pyramid, finest level first.
    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Vec<Var> {
        let mut levels = Vec::with_capacity(STAGES);
        let mut h = x;
        for stage in &self.stages {
            for b in stage {
                h = b.forward(cx, h);
            }
            levels.push(h);
        }
        levels
    }

    pub fn param_count(&self) -> usize {
        self.stages.iter().flatten().map(|b| b.param_count()).sum()
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub gate: Option<AttentionGate>,
    pub conv1: ConvBnAct,
    pub conv2: ConvBnAct,
    pub has_skip: bool,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<DecoderBlock>,
}

impl Decoder {
    pub fn build<T: Scalar>(init: &mut Init<'_, T>, enc_ch: &[usize], dec_ch: &[usize], use_attention: bool) -> Result<Self> {
        if enc_ch.len() != STAGES || dec_ch.len() != STAGES {
            return Err(Error::Config(format!("decoder needs {STAGES} encoder and decoder widths")));
        }
        let mut blocks = Vec::with_capacity(STAGES);
        let mut prev = enc_ch[STAGES - 1];
        for (i, &out) in dec_ch.iter().enumerate() {
            let skip = (i + 1 < STAGES).then(|| enc_ch[STAGES - 2 - i]);
            let block = init.scoped(format!("decoder.block{i}"), |init| {
                let gate = match (use_attention, skip) {
                    (true, Some(s)) => Some(init.scoped("gate", |i| AttentionGate::new(i, s, prev))),
                    _ => None,
                };
                let cin = prev + skip.unwrap_or(0);
                let conv1 = init.scoped("conv1", |i| ConvBnAct::new(i, cin, out, 3, 1, Act::Relu));
                let conv2 = init.scoped("conv2", |i| ConvBnAct::new(i, out, out, 3, 1, Act::Relu));
                DecoderBlock { gate, conv1, conv2, has_skip: skip.is_some() }
            });
            blocks.push(block);
            prev = out;
        }
        Ok(Decoder { blocks })
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, levels: &[Var]) -> Var {
        let mut h = levels[STAGES - 1];
        for (i, b) in self.blocks.iter().enumerate() {
            h = cx.graph.upsample2(h);
            if b.has_skip {
                let mut skip = levels[STAGES - 2 - i];
                if let Some(g) = &b.gate {
                    skip = g.forward(cx, skip, h);
                }
                h = cx.graph.concat_channels(&[h, skip]);
            }
            h = b.conv1.forward(cx, h);
            h = b.conv2.forward(cx, h);
        }
        h
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.gate.as_ref().map_or(0, |g| g.param_count()) + b.conv1.param_count() + b.conv2.param_count())
            .sum()
    }
}

/// Layer structure of a U-Net; the parameter values live in [`Model::store`].
#[derive(Clone, Debug)]
pub struct Net {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: Conv2d,
    pub input_size: usize,
}

/// Outputs of one forward pass.
pub struct Forward {
    /// Probabilities `[N, 1, S, S]`.
    pub probs: Var,
    /// Encoder feature pyramid, finest level first.
    pub pyramid: Vec<Var>,
}

impl Net {
    fn check_input<T: Scalar>(&self, cx: &Ctx<'_, T>, x: Var) -> Result<()> {
        let s = cx.graph.shape(x);
        if s.c != 3 || s.h != self.input_size || s.w != self.input_size {
            return Err(Error::Shape(format!(
                "expected input [N, 3, {0}, {0}], got {s}; inputs are never resized",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn encode<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Vec<Var>> {
        self.check_input(cx, x)?;
        Ok(self.encoder.forward(cx, x))
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Forward> {
        let pyramid = self.encode(cx, x)?;
        let h = self.decoder.forward(cx, &pyramid);
        let logits = self.head.forward(cx, h);
        let logits = cx.graph.scale(logits, T::c(LOGIT_GAIN));
        let probs = cx.graph.sigmoid(logits);
        Ok(Forward { probs, pyramid })
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub spec: ModelSpec,
    pub seed: u64,
    pub net: Net,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Builds the encoder, decoder and head with He-normal weights drawn from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let encoder = Encoder::build(&mut init, &spec.encoder)?;
        let decoder = Decoder::build(&mut init, &encoder.channels, &spec.decoder_channels, spec.use_attention)?;
        let last = spec.decoder_channels[STAGES - 1];
        let head = init.scoped("head", |i| Conv2d::new(i, last, 1, 3, 1, true));
        let net = Net { encoder, decoder, head, input_size: spec.input_size };
        Ok(Model { spec: spec.clone(), seed, net, store })
    }

    /// Channels of each pyramid level.
    pub fn pyramid_channels(&self) -> Vec<usize> {
        self.net.encoder.channels.clone()
    }

    /// Stores an input batch as a graph constant and runs the network.
    pub fn forward(&mut self, x: &Tensor<T>, train: bool) -> Result<(Ctx<'_, T>, Forward)> {
        let mut cx = Ctx::new(&mut self.store, train);
        let xv = cx.graph.constant(x.clone());
        let out = self.net.forward(&mut cx, xv)?;
        Ok((cx, out))
    }

    /// Train-mode probabilities that leave the running statistics untouched.
    pub fn predict_batch_stats(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut cx = Ctx::new(&mut self.store, true);
        cx.update_stats = false;
        let xv = cx.graph.constant(x.clone());
        let out = self.net.forward(&mut cx, xv)?;
        Ok(cx.graph.value(out.probs).clone())
    }

    /// Probabilities in eval mode, clamped to `[PROB_EPS, 1 - PROB_EPS]`.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (cx, out) = self.forward(x, false)?;
        let (lo, hi) = (T::c(PROB_EPS), T::c(1.0 - PROB_EPS));
        Ok(cx.graph.value(out.probs).map(|v| if v < lo { lo } else if v > hi { hi } else { v }))
    }

    /// Feature pyramid in eval mode, as owned tensors.
    pub fn pyramid(&mut self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut cx = Ctx::new(&mut self.store, false);
        let xv = cx.graph.constant(x.clone());
        let levels = self.net.encode(&mut cx, xv)?;
        Ok(levels.iter().map(|&v| cx.graph.value(v).clone()).collect())
    }

    /// Per-layer parameter counts taken from the layer structure.
    pub fn layer_ledger(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        for (s, stage) in self.net.encoder.stages.iter().enumerate() {
            for (i, b) in stage.iter().enumerate() {
                out.push((format!("encoder.stage{s}.{i}.{}", b.kind()), b.param_count()));
            }
        }
        for (i, b) in self.net.decoder.blocks.iter().enumerate() {
            let g = b.gate.as_ref().map_or(0, |g| g.param_count());
            out.push((format!("decoder.block{i}"), g + b.conv1.param_count() + b.conv2.param_count()));
        }
        out.push(("head".into(), self.net.head.param_count()));
        out
    }

    /// Freezes or unfreezes every weight under `prefix`; returns the number of tensors changed.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        self.store.set_trainable(prefix, trainable)
    }
}

/// Exact number of trainable scalars.
pub fn count_params<T: Scalar>(model: &Model<T>) -> usize {
    model.store.count_trainable()
}

/// Parameter count of a spec without keeping the model.
pub fn spec_params(spec: &ModelSpec) -> Result<usize> {
    Model::<f32>::build(spec, 0).map(|m| count_params(&m))
}

/// Shipped presets: the teacher-scale VGG-like network and three students.
pub fn presets(input_size: usize) -> Vec<(String, ModelSpec)> {
    Family::ALL.iter().map(|&f| (f.name().to_string(), ModelSpec::new(f).with_input(input_size))).collect()
}

/// Batch of images `[N, 3, S, S]` from channel-major `[3, S, S]` buffers.
pub fn batch_images<T: Scalar>(images: &[&[f32]], size: usize) -> Tensor<T> {
    let per = 3 * size * size;
    let mut data = Vec::with_capacity(images.len() * per);
    for img in images {
        assert_eq!(img.len(), per, "image does not match input size {size}");
        data.extend(img.iter().map(|&v| T::c(v as f64)));
    }
    Tensor::from_vec(Shape::new(images.len(), 3, size, size), data)
}
