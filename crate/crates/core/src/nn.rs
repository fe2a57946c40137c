//! Parameterized layers over the autograd core.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use crate::autograd::{self, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution or dense weight with its fan-in.
    Kernel { fan_in: usize },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// A named learnable tensor or a non-trainable buffer.
///
/// The id keys the parameter on a tape. Clones keep the id, so a clone
/// bound on the same tape is the same leaf.
#[derive(Clone, Debug)]
pub struct Param {
    id: u64,
    pub value: Tensor,
    pub kind: ParamKind,
}

impl Param {
    pub fn new(value: Tensor, kind: ParamKind) -> Self {
        Param {
            id: NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed),
            value,
            kind,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Var<'t> {
        if self.kind.trainable() {
            tape.param(self.id, &self.value)
        } else {
            tape.constant(self.value.clone())
        }
    }

    /// Reset according to the initialization rule for its kind. Kernel
    /// draws are rounded to f32 so a freshly initialized network survives a
    /// weight-file round trip unchanged.
    pub fn init(&mut self, rng: &mut Rng) -> Result<()> {
        let shape = self.value.shape().to_vec();
        self.value = match self.kind {
            ParamKind::Kernel { fan_in } => Tensor::he_normal_with(&shape, fan_in, rng)?.quantize_f32(),
            ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => Tensor::zeros(&shape)?,
            ParamKind::Gamma | ParamKind::RunningVar => Tensor::ones(&shape)?,
        };
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward context: the tape, the layer mode and the dropout stream.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    pub mode: Mode,
    rng: Option<&'t RefCell<Rng>>,
}

impl<'t> Ctx<'t> {
    pub fn eval(tape: &'t Tape) -> Self {
        Ctx {
            tape,
            mode: Mode::Eval,
            rng: None,
        }
    }

    pub fn train(tape: &'t Tape, rng: &'t RefCell<Rng>) -> Self {
        Ctx {
            tape,
            mode: Mode::Train,
            rng: Some(rng),
        }
    }

    pub fn new(tape: &'t Tape, mode: Mode, rng: Option<&'t RefCell<Rng>>) -> Self {
        Ctx { tape, mode, rng }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }
}

/// Hierarchical parameter traversal in a fixed order.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.kind.trainable() {
                n += p.value.len();
            }
        });
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    pub fn new(k: usize, cin: usize, n: usize, stride: usize, padding: Padding) -> Result<Self> {
        Ok(Conv2d {
            kernel: Param::new(Tensor::zeros(&[k, k, cin, n])?, ParamKind::Kernel { fan_in: k * k * cin }),
            bias: Param::new(Tensor::zeros(&[n])?, ParamKind::Bias),
            stride,
            padding,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.value.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.value.shape()[3]
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        autograd::conv2d(
            x,
            self.kernel.bind(ctx.tape),
            Some(self.bias.bind(ctx.tape)),
            self.stride,
            self.padding,
        )
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "kernel"), &self.kernel);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "kernel"), &mut self.kernel);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Depthwise `K x K` convolution followed by a pointwise `1 x 1` mix.
#[derive(Clone, Debug)]
pub struct SeparableConv2d {
    pub depthwise: Param,
    pub pointwise: Param,
    pub bias: Param,
    pub stride: usize,
    pub padding: Padding,
}

impl SeparableConv2d {
    pub fn new(k: usize, cin: usize, n: usize, stride: usize, padding: Padding) -> Result<Self> {
        Ok(SeparableConv2d {
            depthwise: Param::new(Tensor::zeros(&[k, k, cin, 1])?, ParamKind::Kernel { fan_in: k * k }),
            pointwise: Param::new(Tensor::zeros(&[1, 1, cin, n])?, ParamKind::Kernel { fan_in: cin }),
            bias: Param::new(Tensor::zeros(&[n])?, ParamKind::Bias),
            stride,
            padding,
        })
    }

    /// Weights excluding the bias: `K*K*Cin + Cin*N`.
    pub fn weight_count(&self) -> usize {
        self.depthwise.value.len() + self.pointwise.value.len()
    }

    /// Weights of a standard convolution with the same geometry: `K*K*Cin*N`.
    pub fn standard_weight_count(&self) -> usize {
        let s = self.depthwise.value.shape();
        s[0] * s[1] * s[2] * self.pointwise.value.shape()[3]
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let dw = autograd::depthwise_conv2d(x, self.depthwise.bind(ctx.tape), self.stride, self.padding)?;
        autograd::conv2d(
            dw,
            self.pointwise.bind(ctx.tape),
            Some(self.bias.bind(ctx.tape)),
            1,
            Padding::Valid,
        )
    }

    /// The equivalent standard kernel `[K, K, Cin, N]`, `w[ky,kx,c,n] = d[ky,kx,c] * p[c,n]`.
    pub fn composed_kernel(&self) -> Result<Tensor> {
        let s = self.depthwise.value.shape();
        let (k, cin) = (s[0], s[2]);
        let n = self.pointwise.value.shape()[3];
        let d = self.depthwise.value.data();
        let p = self.pointwise.value.data();
        let mut w = Vec::with_capacity(k * k * cin * n);
        for kk in 0..k * k {
            for c in 0..cin {
                for o in 0..n {
                    w.push(d[kk * cin + c] * p[c * n + o]);
                }
            }
        }
        Tensor::new(&[k, k, cin, n], w)
    }
}

impl Module for SeparableConv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "depthwise"), &self.depthwise);
        f(&join(prefix, "pointwise"), &self.pointwise);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "depthwise"), &mut self.depthwise);
        f(&join(prefix, "pointwise"), &mut self.pointwise);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Batch normalization. In training mode the batch statistics normalize
/// and new running statistics are staged on the tape; evaluation mode uses
/// the running statistics (initially mean 0, variance 1).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(c: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            gamma: Param::new(Tensor::ones(&[c])?, ParamKind::Gamma),
            beta: Param::new(Tensor::zeros(&[c])?, ParamKind::Beta),
            running_mean: Param::new(Tensor::zeros(&[c])?, ParamKind::RunningMean),
            running_var: Param::new(Tensor::ones(&[c])?, ParamKind::RunningVar),
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let tape = ctx.tape;
        let gamma = self.gamma.bind(tape);
        let beta = self.beta.bind(tape);
        if ctx.is_train() {
            let (y, stats) = autograd::batch_norm_train(x, gamma, beta, self.eps)?;
            let m = self.momentum;
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count - 1) as f64
            } else {
                1.0
            };
            let rm: Vec<f64> = self
                .running_mean
                .value
                .data()
                .iter()
                .zip(&stats.mean)
                .map(|(r, b)| m * r + (1.0 - m) * b)
                .collect();
            let rv: Vec<f64> = self
                .running_var
                .value
                .data()
                .iter()
                .zip(&stats.var)
                .map(|(r, b)| m * r + (1.0 - m) * b * unbias)
                .collect();
            let c = rm.len();
            tape.stage(self.running_mean.id(), Tensor::new(&[c], rm)?);
            tape.stage(self.running_var.id(), Tensor::new(&[c], rv)?);
            Ok(y)
        } else {
            let inv_std = self.running_var.value.map(|v| 1.0 / (v + self.eps).sqrt());
            let scale = gamma.mul(tape.constant(inv_std))?;
            let shift = beta.sub(scale.mul(tape.constant(self.running_mean.value.clone()))?)?;
            autograd::channel_affine(x, scale, shift)
        }
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
        f(&join(prefix, "running_mean"), &mut self.running_mean);
        f(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        Ok(Dropout { rate })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        if !ctx.is_train() || self.rate == 0.0 {
            return Ok(x);
        }
        let rng = ctx
            .rng
            .ok_or_else(|| Error::Invalid("training-mode dropout needs an rng".into()))?;
        let mut rng = rng.borrow_mut();
        let scale = 1.0 / (1.0 - self.rate);
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { scale })
            .collect();
        x.mul(ctx.tape.constant(Tensor::new(&shape, mask)?))
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
}

impl Dense {
    pub fn new(input: usize, output: usize) -> Result<Self> {
        Ok(Dense {
            weight: Param::new(Tensor::zeros(&[input, output])?, ParamKind::Kernel { fan_in: input }),
            bias: Param::new(Tensor::zeros(&[output])?, ParamKind::Bias),
        })
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(self.weight.bind(ctx.tape))?
            .add_bias(self.bias.bind(ctx.tape))
    }
}

impl Module for Dense {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Initialize every parameter of a module from one seeded stream.
pub fn init_module(m: &mut dyn Module, rng: &mut Rng) -> Result<()> {
    let mut res = Ok(());
    m.visit_mut("", &mut |_, p| {
        if res.is_ok() {
            res = p.init(rng);
        }
    });
    res
}

/// Apply buffers staged on `tape` (batch-norm running statistics).
pub fn commit_staged(m: &mut dyn Module, tape: &Tape) {
    let staged = tape.take_staged();
    if staged.is_empty() {
        return;
    }
    let map: std::collections::HashMap<u64, Tensor> = staged.into_iter().collect();
    m.visit_mut("", &mut |_, p| {
        if let Some(v) = map.get(&p.id()) {
            p.value = v.clone();
        }
    });
}
