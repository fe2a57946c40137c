//! Separable-convolution encoder with entry, middle and exit flows. The only
//! standard convolutions are the 1x1 strided shortcut projections.

use crate::autograd::{maxpool2d, Padding, Var};
use crate::error::Result;
use crate::nn::{join, BatchNorm2d, Conv2d, Ctx, Module, Param, SeparableConv2d};

use super::EncoderOutputs;

/// Two separable convolutions and a max-pool, with a strided 1x1 projection
/// shortcut. Halves the resolution.
#[derive(Clone, Debug)]
pub struct DownBlock {
    pub sep_a: SeparableConv2d,
    pub bn_a: BatchNorm2d,
    pub sep_b: SeparableConv2d,
    pub bn_b: BatchNorm2d,
    pub proj: Conv2d,
    pub proj_bn: BatchNorm2d,
}

impl DownBlock {
    pub fn new(cin: usize, cout: usize) -> Result<Self> {
        Ok(DownBlock {
            sep_a: SeparableConv2d::new(3, cin, cout, 1, Padding::Same)?,
            bn_a: BatchNorm2d::new(cout)?,
            sep_b: SeparableConv2d::new(3, cout, cout, 1, Padding::Same)?,
            bn_b: BatchNorm2d::new(cout)?,
            proj: Conv2d::new(1, cin, cout, 2, Padding::Same)?,
            proj_bn: BatchNorm2d::new(cout)?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.bn_a.forward(ctx, self.sep_a.forward(ctx, x)?)?.relu()?;
        let h = self.bn_b.forward(ctx, self.sep_b.forward(ctx, h)?)?;
        let h = maxpool2d(h, 2, 2)?;
        let s = self.proj_bn.forward(ctx, self.proj.forward(ctx, x)?)?;
        h.add(s)?.relu()
    }
}

impl Module for DownBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.sep_a.visit(&join(prefix, "sep_a"), f);
        self.bn_a.visit(&join(prefix, "bn_a"), f);
        self.sep_b.visit(&join(prefix, "sep_b"), f);
        self.bn_b.visit(&join(prefix, "bn_b"), f);
        self.proj.visit(&join(prefix, "proj"), f);
        self.proj_bn.visit(&join(prefix, "proj_bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.sep_a.visit_mut(&join(prefix, "sep_a"), f);
        self.bn_a.visit_mut(&join(prefix, "bn_a"), f);
        self.sep_b.visit_mut(&join(prefix, "sep_b"), f);
        self.bn_b.visit_mut(&join(prefix, "bn_b"), f);
        self.proj.visit_mut(&join(prefix, "proj"), f);
        self.proj_bn.visit_mut(&join(prefix, "proj_bn"), f);
    }
}

/// Three ReLU -> separable conv -> BN units with an identity residual.
#[derive(Clone, Debug)]
pub struct MiddleBlock {
    pub units: Vec<(SeparableConv2d, BatchNorm2d)>,
}

impl MiddleBlock {
    pub fn new(c: usize) -> Result<Self> {
        let units = (0..3)
            .map(|_| Ok((SeparableConv2d::new(3, c, c, 1, Padding::Same)?, BatchNorm2d::new(c)?)))
            .collect::<Result<_>>()?;
        Ok(MiddleBlock { units })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut h = x;
        for (sep, bn) in &self.units {
            h = bn.forward(ctx, sep.forward(ctx, h.relu()?)?)?;
        }
        h.add(x)
    }
}

impl Module for MiddleBlock {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, (sep, bn)) in self.units.iter().enumerate() {
            sep.visit(&join(prefix, &format!("sep{i}")), f);
            bn.visit(&join(prefix, &format!("bn{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, (sep, bn)) in self.units.iter_mut().enumerate() {
            sep.visit_mut(&join(prefix, &format!("sep{i}")), f);
            bn.visit_mut(&join(prefix, &format!("bn{i}")), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoder2 {
    /// Entry flow: stages 1 to 3.
    pub entry: Vec<DownBlock>,
    /// Downsampling into the middle flow's resolution (stage 4).
    pub transition: DownBlock,
    pub middle: Vec<MiddleBlock>,
    /// Exit flow: stage 5.
    pub exit: DownBlock,
    pub exit_sep: SeparableConv2d,
    pub exit_bn: BatchNorm2d,
}

impl Encoder2 {
    pub fn new(in_channels: usize, channels: &[usize; 5], middle_repeats: usize) -> Result<Self> {
        Ok(Encoder2 {
            entry: vec![
                DownBlock::new(in_channels, channels[0])?,
                DownBlock::new(channels[0], channels[1])?,
                DownBlock::new(channels[1], channels[2])?,
            ],
            transition: DownBlock::new(channels[2], channels[3])?,
            middle: (0..middle_repeats)
                .map(|_| MiddleBlock::new(channels[3]))
                .collect::<Result<_>>()?,
            exit: DownBlock::new(channels[3], channels[4])?,
            exit_sep: SeparableConv2d::new(3, channels[4], channels[4], 1, Padding::Same)?,
            exit_bn: BatchNorm2d::new(channels[4])?,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<EncoderOutputs<'t>> {
        let mut stages = Vec::with_capacity(5);
        let mut h = x;
        for block in &self.entry {
            h = block.forward(ctx, h)?;
            stages.push(h);
        }
        h = self.transition.forward(ctx, h)?;
        for block in &self.middle {
            h = block.forward(ctx, h)?;
        }
        stages.push(h);
        h = self.exit.forward(ctx, h)?;
        h = self.exit_bn.forward(ctx, self.exit_sep.forward(ctx, h)?)?.relu()?;
        stages.push(h);
        Ok(EncoderOutputs::new(stages))
    }
}

impl Module for Encoder2 {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        for (i, b) in self.entry.iter().enumerate() {
            b.visit(&join(prefix, &format!("entry{}", i + 1)), f);
        }
        self.transition.visit(&join(prefix, "transition"), f);
        for (i, b) in self.middle.iter().enumerate() {
            b.visit(&join(prefix, &format!("middle{i}")), f);
        }
        self.exit.visit(&join(prefix, "exit"), f);
        self.exit_sep.visit(&join(prefix, "exit_sep"), f);
        self.exit_bn.visit(&join(prefix, "exit_bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, b) in self.entry.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("entry{}", i + 1)), f);
        }
        self.transition.visit_mut(&join(prefix, "transition"), f);
        for (i, b) in self.middle.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("middle{i}")), f);
        }
        self.exit.visit_mut(&join(prefix, "exit"), f);
        self.exit_sep.visit_mut(&join(prefix, "exit_sep"), f);
        self.exit_bn.visit_mut(&join(prefix, "exit_bn"), f);
    }
}
