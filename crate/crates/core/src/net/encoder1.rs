//! Residual encoder: strided input convolution and max-pool, then stages of
//! one projection block followed by identity blocks.

use crate::autograd::{maxpool2d, Padding, Var};
use crate::error::Result;
use crate::nn::{join, BatchNorm2d, Conv2d, Ctx, Module, Param};

use super::EncoderOutputs;

pub const STEM_KERNEL: usize = 7;

/// Two 3x3 convolutions with a residual connection. With `projection`, the
/// shortcut is a strided 1x1 convolution; otherwise it is the identity.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv_a: Conv2d,
    pub bn_a: BatchNorm2d,
    pub conv_b: Conv2d,
    pub bn_b: BatchNorm2d,
    pub projection: Option<(Conv2d, BatchNorm2d)>,
    /// Ablation switch; when false the shortcut is dropped.
    pub residual: bool,
}

impl ResidualBlock {
    /// "Conv" block: projection shortcut.
    pub fn conv_block(cin: usize, cout: usize, stride: usize) -> Result<Self> {
        Ok(ResidualBlock {
            conv_a: Conv2d::new(3, cin, cout, stride, Padding::Same)?,
            bn_a: BatchNorm2d::new(cout)?,
            conv_b: Conv2d::new(3, cout, cout, 1, Padding::Same)?,
            bn_b: BatchNorm2d::new(cout)?,
            projection: Some((Conv2d::new(1, cin, cout, stride, Padding::Same)?, BatchNorm2d::new(cout)?)),
            residual: true,
        })
    }

    /// "Iden" block: identity shortcut.
    pub fn identity_block(c: usize) -> Result<Self> {
        Ok(ResidualBlock {
            conv_a: Conv2d::new(3, c, c, 1, Padding::Same)?,
            bn_a: BatchNorm2d::new(c)?,
            conv_b: Conv2d::new(3, c, c, 1, Padding::Same)?,
            bn_b: BatchNorm2d::new(c)?,
            projection: None,
            residual: true,
        })
    }

    /// The shortcut path alone.
    pub fn shortcut<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        match &self.projection {
            Some((conv, bn)) => bn.forward(ctx, conv.forward(ctx, x)?),
            None => Ok(x),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.bn_a.forward(ctx, self.conv_a.forward(ctx, x)?)?.relu()?;
        let h = self.bn_b.forward(ctx, self.conv_b.forward(ctx, h)?)?;
        if self.residual {
            h.add(self.shortcut(ctx, x)?)?.relu()
        } else {
            h.relu()
        }
    }
}

impl Module for ResidualBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.conv_a.visit(&join(prefix, "conv_a"), f);
        self.bn_a.visit(&join(prefix, "bn_a"), f);
        self.conv_b.visit(&join(prefix, "conv_b"), f);
        self.bn_b.visit(&join(prefix, "bn_b"), f);
        if let Some((conv, bn)) = &self.projection {
            conv.visit(&join(prefix, "proj"), f);
            bn.visit(&join(prefix, "proj_bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv_a.visit_mut(&join(prefix, "conv_a"), f);
        self.bn_a.visit_mut(&join(prefix, "bn_a"), f);
        self.conv_b.visit_mut(&join(prefix, "conv_b"), f);
        self.bn_b.visit_mut(&join(prefix, "bn_b"), f);
        if let Some((conv, bn)) = &mut self.projection {
            conv.visit_mut(&join(prefix, "proj"), f);
            bn.visit_mut(&join(prefix, "proj_bn"), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder1 {
    pub stem: Conv2d,
    pub stem_bn: BatchNorm2d,
    /// Stages 2 to 5, each a projection block then identity blocks.
    pub stages: Vec<Vec<ResidualBlock>>,
}

impl Encoder1 {
    pub fn new(in_channels: usize, channels: &[usize; 5], repeats: &[usize; 4]) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            // Stage 2 follows the max-pool and keeps its resolution.
            let stride = if s == 0 { 1 } else { 2 };
            let mut blocks = vec![ResidualBlock::conv_block(channels[s], channels[s + 1], stride)?];
            for _ in 0..repeats[s] {
                blocks.push(ResidualBlock::identity_block(channels[s + 1])?);
            }
            stages.push(blocks);
        }
        Ok(Encoder1 {
            stem: Conv2d::new(STEM_KERNEL, in_channels, channels[0], 2, Padding::Same)?,
            stem_bn: BatchNorm2d::new(channels[0])?,
            stages,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<EncoderOutputs<'t>> {
        let e1 = self.stem_bn.forward(ctx, self.stem.forward(ctx, x)?)?.relu()?;
        let mut h = maxpool2d(e1, 2, 2)?;
        let mut stages = vec![e1];
        for blocks in &self.stages {
            for block in blocks {
                h = block.forward(ctx, h)?;
            }
            stages.push(h);
        }
        Ok(EncoderOutputs::new(stages))
    }
}

impl Module for Encoder1 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.stem_bn.visit(&join(prefix, "stem_bn"), f);
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                block.visit(&join(prefix, &format!("stage{}.block{b}", s + 2)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        self.stem_bn.visit_mut(&join(prefix, "stem_bn"), f);
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            for (b, block) in blocks.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("stage{}.block{b}", s + 2)), f);
            }
        }
    }
}
