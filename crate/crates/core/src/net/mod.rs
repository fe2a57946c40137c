//! The dual-encoder network: two encoders, fused bottleneck, a decoder with
//! skips from both encoders, and three recognition heads.

mod config;
pub mod encoder1;
pub mod encoder2;

use crate::autograd::{concat_channels, global_avg_pool, mean_of, upsample_nn, Padding, Var};
use crate::error::{Error, Result};
use crate::nn::{self, join, BatchNorm2d, Conv2d, Ctx, Dense, Dropout, Module, Param, SeparableConv2d};
use crate::rng;
use crate::tensor::Tensor;

pub use config::{kv_pairs, NetworkConfig};
pub use encoder1::{Encoder1, ResidualBlock};
pub use encoder2::{DownBlock, Encoder2, MiddleBlock};

pub const IMAGE_CHANNELS: usize = 3;

/// Stage outputs `E_1 .. E_5` of one encoder, each at half the resolution of
/// the previous.
#[derive(Clone, Debug)]
pub struct EncoderOutputs<'t> {
    pub stages: Vec<Var<'t>>,
}

impl<'t> EncoderOutputs<'t> {
    pub(crate) fn new(stages: Vec<Var<'t>>) -> Self {
        debug_assert_eq!(stages.len(), 5);
        EncoderOutputs { stages }
    }

    /// Stage `n` in `1..=5`.
    pub fn stage(&self, n: usize) -> Var<'t> {
        self.stages[n - 1]
    }

    pub fn top(&self) -> Var<'t> {
        self.stages[4]
    }
}

/// Channel-wise concatenation of the two deepest encoder maps.
pub fn fuse_ffm<'t>(e1: Var<'t>, e2: Var<'t>) -> Result<Var<'t>> {
    concat_channels(&[e1, e2])
}

#[derive(Clone, Debug)]
pub struct DecoderStage {
    pub sep: SeparableConv2d,
    pub bn: BatchNorm2d,
}

/// Upsample, concatenate both encoder skips, separable conv + BN + ReLU; four
/// times, then a final upsample and a 1x1 convolution to one logit channel.
#[derive(Clone, Debug)]
pub struct Decoder {
    /// Stages for n = 4, 3, 2, 1 in that order.
    pub stages: Vec<DecoderStage>,
    pub head: Conv2d,
}

impl Decoder {
    pub fn new(channels: &[usize; 5]) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        let mut incoming = 2 * channels[4];
        for n in (1..=4).rev() {
            let c = channels[n - 1];
            stages.push(DecoderStage {
                sep: SeparableConv2d::new(3, 2 * c + incoming, c, 1, Padding::Same)?,
                bn: BatchNorm2d::new(c)?,
            });
            incoming = c;
        }
        Ok(Decoder {
            stages,
            head: Conv2d::new(1, channels[0], 1, 1, Padding::Same)?,
        })
    }

    /// Channels of the upsampled decoder map entering stage `n` (1..=4).
    pub fn incoming_channels(channels: &[usize; 5], n: usize) -> usize {
        if n == 4 {
            2 * channels[4]
        } else {
            channels[n]
        }
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        ffm: Var<'t>,
        enc1: &EncoderOutputs<'t>,
        enc2: &EncoderOutputs<'t>,
        zero_skips: bool,
    ) -> Result<Var<'t>> {
        let mut d = ffm;
        for (i, stage) in self.stages.iter().enumerate() {
            let n = 4 - i;
            let up = upsample_nn(d, 2)?;
            let (mut s1, mut s2) = (enc1.stage(n), enc2.stage(n));
            if s1.shape()[..3] != up.shape()[..3] || s2.shape()[..3] != up.shape()[..3] {
                return Err(Error::mismatch("decoder skip", &s1.shape(), &up.shape()));
            }
            if zero_skips {
                s1 = ctx.tape.constant(Tensor::zeros(&s1.shape())?);
                s2 = ctx.tape.constant(Tensor::zeros(&s2.shape())?);
            }
            let cat = concat_channels(&[s1, s2, up])?;
            d = stage.bn.forward(ctx, stage.sep.forward(ctx, cat)?)?.relu()?;
        }
        self.head.forward(ctx, upsample_nn(d, 2)?)
    }
}

impl Module for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{}", 4 - i));
            s.sep.visit(&join(&p, "sep"), f);
            s.bn.visit(&join(&p, "bn"), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            let p = join(prefix, &format!("stage{}", 4 - i));
            s.sep.visit_mut(&join(&p, "sep"), f);
            s.bn.visit_mut(&join(&p, "bn"), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// GAP -> Dense -> ReLU -> dropout -> Dense -> softmax.
#[derive(Clone, Debug)]
pub struct Head {
    pub fc1: Dense,
    pub dropout: Dropout,
    pub fc2: Dense,
}

impl Head {
    pub fn new(input: usize, width: usize, classes: usize, dropout: f64) -> Result<Self> {
        Ok(Head {
            fc1: Dense::new(input, width)?,
            dropout: Dropout::new(dropout)?,
            fc2: Dense::new(width, classes)?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let v = global_avg_pool(features)?;
        let h = self.fc1.forward(ctx, v)?.relu()?;
        let h = self.dropout.forward(ctx, h)?;
        self.fc2.forward(ctx, h)?.softmax()
    }
}

impl Module for Head {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Per-head probabilities and their average.
#[derive(Clone, Debug)]
pub struct HeadOutputs<'t> {
    pub lt: [Var<'t>; 3],
    pub probs: Var<'t>,
}

/// Everything one full forward pass produces.
#[derive(Clone, Debug)]
pub struct NetOutputs<'t> {
    pub enc1: EncoderOutputs<'t>,
    pub enc2: EncoderOutputs<'t>,
    pub ffm: Var<'t>,
    pub mask_logits: Option<Var<'t>>,
    pub mask_probs: Option<Var<'t>>,
    pub heads: Option<HeadOutputs<'t>>,
}

/// Which outputs a forward pass computes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outputs {
    Mask,
    Classes,
    Both,
}

#[derive(Clone, Debug)]
pub struct DermoNet {
    pub config: NetworkConfig,
    pub encoder1: Encoder1,
    pub encoder2: Encoder2,
    pub decoder: Decoder,
    /// Heads fed by encoder-1, encoder-2 and the fused map.
    pub heads: [Head; 3],
    /// Ablation switch replacing every decoder skip with zeros.
    pub zero_skips: bool,
}

impl DermoNet {
    /// Zero-filled network; see [`DermoNet::new`] for an initialized one.
    pub fn uninitialized(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let ch = &config.stage_channels;
        let mk_head = |input| Head::new(input, config.fcl_width, config.num_classes, config.dropout_rate);
        Ok(DermoNet {
            encoder1: Encoder1::new(IMAGE_CHANNELS, ch, &config.encoder1_stage_repeats)?,
            encoder2: Encoder2::new(IMAGE_CHANNELS, ch, config.encoder2_middle_repeats)?,
            decoder: Decoder::new(ch)?,
            heads: [mk_head(ch[4])?, mk_head(ch[4])?, mk_head(2 * ch[4])?],
            zero_skips: false,
            config,
        })
    }

    /// He-normal kernels, zero biases, unit gamma, zero beta.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        let mut net = Self::uninitialized(config)?;
        net.init_weights(seed)?;
        Ok(net)
    }

    pub fn init_weights(&mut self, seed: u64) -> Result<()> {
        let mut rng = rng::seeded(seed);
        nn::init_module(self, &mut rng)
    }

    pub fn encode<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<(EncoderOutputs<'t>, EncoderOutputs<'t>)> {
        let e1 = self.encoder1.forward(ctx, x)?;
        let e2 = self.encoder2.forward(ctx, x)?;
        Ok((e1, e2))
    }

    pub fn heads_forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        e1_top: Var<'t>,
        e2_top: Var<'t>,
        ffm: Var<'t>,
    ) -> Result<HeadOutputs<'t>> {
        let lt = [
            self.heads[0].forward(ctx, e1_top)?,
            self.heads[1].forward(ctx, e2_top)?,
            self.heads[2].forward(ctx, ffm)?,
        ];
        let probs = mean_of(&lt)?;
        Ok(HeadOutputs { lt, probs })
    }

    fn check_input(&self, x: &Var<'_>, hw: (usize, usize)) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || (s[1], s[2]) != hw || s[3] != IMAGE_CHANNELS {
            return Err(Error::Invalid(format!(
                "input {s:?} does not match expected B x {} x {} x {IMAGE_CHANNELS}",
                hw.0, hw.1
            )));
        }
        Ok(())
    }

    /// Run the network at detection resolution.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, outputs: Outputs) -> Result<NetOutputs<'t>> {
        self.check_input(&x, self.config.input_hw_detection)?;
        self.forward_any(ctx, x, outputs)
    }

    /// Encoders and heads only, at recognition resolution.
    pub fn forward_recognition<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<HeadOutputs<'t>> {
        self.check_input(&x, self.config.input_hw_recognition)?;
        let out = self.forward_any(ctx, x, Outputs::Classes)?;
        Ok(out.heads.expect("class outputs requested"))
    }

    fn forward_any<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, outputs: Outputs) -> Result<NetOutputs<'t>> {
        let (enc1, enc2) = self.encode(ctx, x)?;
        let ffm = fuse_ffm(enc1.top(), enc2.top())?;
        let (mask_logits, mask_probs) = if outputs != Outputs::Classes {
            let logits = self.decoder.forward(ctx, ffm, &enc1, &enc2, self.zero_skips)?;
            let probs = logits.sigmoid()?;
            (Some(logits), Some(probs))
        } else {
            (None, None)
        };
        let heads = if outputs != Outputs::Mask {
            Some(self.heads_forward(ctx, enc1.top(), enc2.top(), ffm)?)
        } else {
            None
        };
        Ok(NetOutputs {
            enc1,
            enc2,
            ffm,
            mask_logits,
            mask_probs,
            heads,
        })
    }

    /// Parameter names and shapes in visiting order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        self.visit("", &mut |name, p| v.push((name.to_string(), p.value.shape().to_vec())));
        v
    }

    /// Values of every parameter and buffer, in visiting order.
    pub fn snapshot(&self) -> Vec<Tensor> {
        let mut v = Vec::new();
        self.visit("", &mut |_, p| v.push(p.value.clone()));
        v
    }

    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        self.visit_mut("", &mut |name, p| {
            match values.get(i) {
                Some(v) if v.shape() == p.value.shape() => p.value = v.clone(),
                _ => {
                    err.get_or_insert_with(|| Error::Invalid(format!("snapshot does not fit `{name}`")));
                }
            }
            i += 1;
        });
        if i != values.len() {
            err.get_or_insert_with(|| Error::Invalid("snapshot length mismatch".into()));
        }
        err.map_or(Ok(()), Err)
    }
}

impl Module for DermoNet {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.encoder1.visit(&join(prefix, "enc1"), f);
        self.encoder2.visit(&join(prefix, "enc2"), f);
        self.decoder.visit(&join(prefix, "dec"), f);
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&join(prefix, &format!("lt{}", i + 1)), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.encoder1.visit_mut(&join(prefix, "enc1"), f);
        self.encoder2.visit_mut(&join(prefix, "enc2"), f);
        self.decoder.visit_mut(&join(prefix, "dec"), f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&join(prefix, &format!("lt{}", i + 1)), f);
        }
    }
}
