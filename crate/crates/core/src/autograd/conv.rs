//! Spatial ops over `B x H x W x C` tensors: convolution, depthwise
//! convolution, pooling, upsampling and batch normalization.
//!
//! Standard convolutions lower to a patch matrix and a packed matrix
//! multiply. Weight gradients accumulate image by image in batch order, and
//! per-batch partials elsewhere are summed in batch order, so serial and
//! parallel runs produce identical bits.

use super::gemm::{gemm, MatRef};
use super::tape::Var;
use super::BackwardFn;
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
    pad_top: usize,
    pad_left: usize,
}

impl Geom {
    pub(crate) fn new(
        (b, h, w, cin): (usize, usize, usize, usize),
        k: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::Invalid("kernel size and stride must be >= 1".into()));
        }
        let (oh, ow, pad_top, pad_left) = match padding {
            Padding::Valid => {
                if h < k || w < k {
                    return Err(Error::Invalid(format!(
                        "valid padding needs input {h}x{w} >= kernel {k}"
                    )));
                }
                ((h - k) / stride + 1, (w - k) / stride + 1, 0, 0)
            }
            Padding::Same => {
                let oh = h.div_ceil(stride);
                let ow = w.div_ceil(stride);
                let ph = ((oh - 1) * stride + k).saturating_sub(h);
                let pw = ((ow - 1) * stride + k).saturating_sub(w);
                (oh, ow, ph / 2, pw / 2)
            }
        };
        Ok(Geom {
            b,
            h,
            w,
            cin,
            k,
            stride,
            oh,
            ow,
            pad_top,
            pad_left,
        })
    }

    #[inline]
    fn in_row(&self, o: usize, kk: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad_top as isize;
        (i >= 0 && (i as usize) < self.h).then_some(i as usize)
    }

    #[inline]
    fn in_col(&self, o: usize, kk: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad_left as isize;
        (i >= 0 && (i as usize) < self.w).then_some(i as usize)
    }
}

/// Output spatial size of a convolution, for shape planning.
pub fn conv_output_hw(h: usize, w: usize, k: usize, stride: usize, padding: Padding) -> Result<(usize, usize)> {
    let g = Geom::new((1, h, w, 1), k, stride, padding)?;
    Ok((g.oh, g.ow))
}

impl Geom {
    /// A 1x1, stride-1 convolution reads the input directly as its patch matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.oh == self.h && self.ow == self.w
    }

    fn patch_len(&self) -> usize {
        self.k * self.k * self.cin
    }
}

/// Patch matrix `[OH*OW, K*K*Cin]` of one image, zero where the window
/// leaves the input.
fn im2col(img: &[f64], g: &Geom, cols: &mut [f64]) {
    let (k, cin, pl) = (g.k, g.cin, g.patch_len());
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * pl..(oy * g.ow + ox + 1) * pl];
            for ky in 0..k {
                let iy = g.in_row(oy, ky);
                for kx in 0..k {
                    let dst = &mut row[(ky * k + kx) * cin..(ky * k + kx + 1) * cin];
                    match (iy, g.in_col(ox, kx)) {
                        (Some(iy), Some(ix)) => {
                            let s = (iy * g.w + ix) * cin;
                            dst.copy_from_slice(&img[s..s + cin]);
                        }
                        _ => dst.iter_mut().for_each(|v| *v = 0.0),
                    }
                }
            }
        }
    }
}

/// Scatter-add of a patch-matrix gradient back onto one image.
fn col2im(dcols: &[f64], g: &Geom, dimg: &mut [f64]) {
    let (k, cin, pl) = (g.k, g.cin, g.patch_len());
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &dcols[(oy * g.ow + ox) * pl..(oy * g.ow + ox + 1) * pl];
            for ky in 0..k {
                let Some(iy) = g.in_row(oy, ky) else { continue };
                for kx in 0..k {
                    let Some(ix) = g.in_col(ox, kx) else { continue };
                    let s = (iy * g.w + ix) * cin;
                    let src = &row[(ky * k + kx) * cin..(ky * k + kx + 1) * cin];
                    dimg[s..s + cin].iter_mut().zip(src).for_each(|(d, v)| *d += v);
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward_raw(x: &[f64], wt: &[f64], bias: Option<&[f64]>, g: &Geom, n: usize) -> Vec<f64> {
    let (p, pl, img_len) = (g.oh * g.ow, g.patch_len(), g.h * g.w * g.cin);
    let mut out = vec![0.0; g.b * p * n];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; p * pl] };
    let wmat = MatRef::row_major(wt, pl, n);
    for (b, ob) in out.chunks_exact_mut(p * n).enumerate() {
        let img = &x[b * img_len..(b + 1) * img_len];
        let a = if g.is_pointwise() {
            MatRef::row_major(img, p, pl)
        } else {
            im2col(img, g, &mut cols);
            MatRef::row_major(&cols, p, pl)
        };
        if let Some(bias) = bias {
            ob.chunks_exact_mut(n).for_each(|r| r.copy_from_slice(bias));
        }
        gemm(a, wmat, ob, bias.is_some());
    }
    out
}

fn conv2d_backward_input(gout: &[f64], wt: &[f64], g: &Geom, n: usize) -> Vec<f64> {
    let (p, pl, img_len) = (g.oh * g.ow, g.patch_len(), g.h * g.w * g.cin);
    let mut dx = vec![0.0; g.b * img_len];
    let wt_t = MatRef::row_major(wt, pl, n).t();
    let mut dcols = if g.is_pointwise() { Vec::new() } else { vec![0.0; p * pl] };
    for (b, dxb) in dx.chunks_exact_mut(img_len).enumerate() {
        let gb = MatRef::row_major(&gout[b * p * n..(b + 1) * p * n], p, n);
        if g.is_pointwise() {
            gemm(gb, wt_t, dxb, false);
        } else {
            gemm(gb, wt_t, &mut dcols, false);
            col2im(&dcols, g, dxb);
        }
    }
    dx
}

fn conv2d_backward_kernel(gout: &[f64], x: &[f64], g: &Geom, n: usize) -> Vec<f64> {
    let (p, pl, img_len) = (g.oh * g.ow, g.patch_len(), g.h * g.w * g.cin);
    let mut dw = vec![0.0; pl * n];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; p * pl] };
    for b in 0..g.b {
        let img = &x[b * img_len..(b + 1) * img_len];
        let a = if g.is_pointwise() {
            MatRef::row_major(img, p, pl)
        } else {
            im2col(img, g, &mut cols);
            MatRef::row_major(&cols, p, pl)
        };
        let gb = MatRef::row_major(&gout[b * p * n..(b + 1) * p * n], p, n);
        gemm(a.t(), gb, &mut dw, b > 0);
    }
    dw
}

fn channel_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut d = vec![0.0; c];
    for row in g.chunks(c) {
        d.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    d
}

/// Cross-correlation with kernel `[K, K, Cin, N]` and optional bias `[N]`.
pub fn conv2d<'t>(
    x: Var<'t>,
    kernel: Var<'t>,
    bias: Option<Var<'t>>,
    stride: usize,
    padding: Padding,
) -> Result<Var<'t>> {
    let xv = x.value();
    let wv = kernel.value();
    let dims = xv.dims4()?;
    let (k, n) = match wv.shape() {
        &[k, k2, cin, n] if k == k2 && cin == dims.3 => (k, n),
        _ => return Err(Error::mismatch("conv2d", xv.shape(), wv.shape())),
    };
    let bv = match bias {
        Some(b) => {
            let b = b.value();
            if b.shape() != [n] {
                return Err(Error::mismatch("conv2d bias", wv.shape(), b.shape()));
            }
            Some(b)
        }
        None => None,
    };
    let g = Geom::new(dims, k, stride, padding)?;
    let out = conv2d_forward_raw(xv.data(), wv.data(), bv.as_ref().map(|b| b.data()), &g, n);
    let out = Tensor::new(&[g.b, g.oh, g.ow, n], out)?;
    let has_bias = bias.is_some();
    let bw: BackwardFn = Box::new(move |gout, needs| {
        let mut res = vec![
            needs[0].then(|| conv2d_backward_input(gout, wv.data(), &g, n)),
            needs[1].then(|| conv2d_backward_kernel(gout, xv.data(), &g, n)),
        ];
        if has_bias {
            res.push(needs[2].then(|| channel_sums(gout, n)));
        }
        res
    });
    let parents: Vec<Var<'t>> = [Some(x), Some(kernel), bias].into_iter().flatten().collect();
    x.tape().push("conv2d", out, &parents, bw)
}

/// Per-channel spatial convolution with kernel `[K, K, C, 1]`.
pub fn depthwise_conv2d<'t>(x: Var<'t>, kernel: Var<'t>, stride: usize, padding: Padding) -> Result<Var<'t>> {
    let xv = x.value();
    let wv = kernel.value();
    let dims = xv.dims4()?;
    let c = dims.3;
    let k = match wv.shape() {
        &[k, k2, c2, 1] if k == k2 && c2 == c => k,
        _ => return Err(Error::mismatch("depthwise_conv2d", xv.shape(), wv.shape())),
    };
    let g = Geom::new(dims, k, stride, padding)?;
    let mut out = vec![0.0; g.b * g.oh * g.ow * c];
    {
        let (xd, wd) = (xv.data(), wv.data());
        par::for_each_chunk(&mut out, g.ow * c, |row, orow| {
            let (b, oy) = (row / g.oh, row % g.oh);
            for ox in 0..g.ow {
                let acc = &mut orow[ox * c..(ox + 1) * c];
                for ky in 0..k {
                    let Some(iy) = g.in_row(oy, ky) else { continue };
                    for kx in 0..k {
                        let Some(ix) = g.in_col(ox, kx) else { continue };
                        let xb = ((b * g.h + iy) * g.w + ix) * c;
                        let wb = (ky * k + kx) * c;
                        for ((a, xv), wv) in acc.iter_mut().zip(&xd[xb..xb + c]).zip(&wd[wb..wb + c]) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        });
    }
    let out = Tensor::new(&[g.b, g.oh, g.ow, c], out)?;
    let bw: BackwardFn = Box::new(move |gout, needs| {
        let (xd, wd) = (xv.data(), wv.data());
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; g.b * g.h * g.w * c];
            par::for_each_chunk(&mut dx, g.h * g.w * c, |b, dxb| {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let gb = ((b * g.oh + oy) * g.ow + ox) * c;
                        let grow = &gout[gb..gb + c];
                        for ky in 0..k {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            for kx in 0..k {
                                let Some(ix) = g.in_col(ox, kx) else { continue };
                                let xb = (iy * g.w + ix) * c;
                                let wb = (ky * k + kx) * c;
                                let dst = dxb[xb..xb + c].iter_mut();
                                for ((d, gv), wv) in dst.zip(grow).zip(&wd[wb..wb + c]) {
                                    *d += gv * wv;
                                }
                            }
                        }
                    }
                }
            });
            dx
        });
        let dw = needs[1].then(|| {
            let len = k * k * c;
            let partials = par::map_indexed(g.b, |b| {
                let mut dw = vec![0.0; len];
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let gb = ((b * g.oh + oy) * g.ow + ox) * c;
                        let grow = &gout[gb..gb + c];
                        for ky in 0..k {
                            let Some(iy) = g.in_row(oy, ky) else { continue };
                            for kx in 0..k {
                                let Some(ix) = g.in_col(ox, kx) else { continue };
                                let xb = ((b * g.h + iy) * g.w + ix) * c;
                                let wb = (ky * k + kx) * c;
                                let dst = dw[wb..wb + c].iter_mut();
                                for ((d, gv), xv) in dst.zip(grow).zip(&xd[xb..xb + c]) {
                                    *d += gv * xv;
                                }
                            }
                        }
                    }
                }
                dw
            });
            par::sum_partials(partials, len)
        });
        vec![dx, dw]
    });
    x.tape().push("depthwise_conv2d", out, &[x, kernel], bw)
}

/// Max pooling; ties resolve to the first element in row-major window order.
pub fn maxpool2d<'t>(x: Var<'t>, window: usize, stride: usize) -> Result<Var<'t>> {
    let xv = x.value();
    let (b, h, w, c) = xv.dims4()?;
    if window == 0 || stride == 0 || h % stride != 0 || w % stride != 0 || window < stride {
        return Err(Error::Invalid(format!(
            "maxpool2d: {h}x{w} not divisible by stride {stride} (window {window})"
        )));
    }
    let (oh, ow) = (h / stride, w / stride);
    let mut out = vec![0.0; b * oh * ow * c];
    let mut arg = vec![0usize; b * oh * ow * c];
    let xd = xv.data();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = ((bi * oh + oy) * ow + ox) * c;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for ky in 0..window {
                        let iy = oy * stride + ky;
                        if iy >= h {
                            break;
                        }
                        for kx in 0..window {
                            let ix = ox * stride + kx;
                            if ix >= w {
                                break;
                            }
                            let i = ((bi * h + iy) * w + ix) * c + ch;
                            if best_i == usize::MAX || xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out[o + ch] = best;
                    arg[o + ch] = best_i;
                }
            }
        }
    }
    let n_in = xv.len();
    let out = Tensor::new(&[b, oh, ow, c], out)?;
    let bw: BackwardFn = Box::new(move |g, _| {
        let mut d = vec![0.0; n_in];
        for (gv, &i) in g.iter().zip(&arg) {
            d[i] += gv;
        }
        vec![Some(d)]
    });
    x.tape().push("maxpool2d", out, &[x], bw)
}

/// Nearest-neighbour upsampling: every pixel becomes a `factor x factor` block.
pub fn upsample_nn<'t>(x: Var<'t>, factor: usize) -> Result<Var<'t>> {
    if factor < 1 {
        return Err(Error::Invalid("upsample factor must be >= 1".into()));
    }
    let xv = x.value();
    let (b, h, w, c) = xv.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let xd = xv.data();
    let mut out = Vec::with_capacity(b * oh * ow * c);
    for bi in 0..b {
        for oy in 0..oh {
            let iy = oy / factor;
            for ox in 0..ow {
                let i = ((bi * h + iy) * w + ox / factor) * c;
                out.extend_from_slice(&xd[i..i + c]);
            }
        }
    }
    let out = Tensor::new(&[b, oh, ow, c], out)?;
    let bw: BackwardFn = Box::new(move |g, _| {
        let mut d = vec![0.0; b * h * w * c];
        for bi in 0..b {
            for oy in 0..oh {
                let iy = oy / factor;
                for ox in 0..ow {
                    let i = ((bi * h + iy) * w + ox / factor) * c;
                    let o = ((bi * oh + oy) * ow + ox) * c;
                    for ch in 0..c {
                        d[i + ch] += g[o + ch];
                    }
                }
            }
        }
        vec![Some(d)]
    });
    x.tape().push("upsample_nn", out, &[x], bw)
}

/// Spatial mean per channel: `[B, H, W, C] -> [B, C]`.
pub fn global_avg_pool<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let xv = x.value();
    let (b, h, w, c) = xv.dims4()?;
    let hw = h * w;
    let inv = 1.0 / hw as f64;
    let mut out = vec![0.0; b * c];
    for (bi, img) in xv.data().chunks(hw * c).enumerate() {
        let o = &mut out[bi * c..(bi + 1) * c];
        for px in img.chunks(c) {
            o.iter_mut().zip(px).for_each(|(a, v)| *a += v);
        }
        o.iter_mut().for_each(|v| *v *= inv);
    }
    let out = Tensor::new(&[b, c], out)?;
    let bw: BackwardFn = Box::new(move |g, _| {
        let mut d = Vec::with_capacity(b * hw * c);
        for bi in 0..b {
            let grow = &g[bi * c..(bi + 1) * c];
            for _ in 0..hw {
                d.extend(grow.iter().map(|v| v * inv));
            }
        }
        vec![Some(d)]
    });
    x.tape().push("global_avg_pool", out, &[x], bw)
}

/// Batch statistics of a normalization step.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    pub count: usize,
}

/// Training-mode batch normalization over every axis but the last.
pub fn batch_norm_train<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    eps: f64,
) -> Result<(Var<'t>, BatchStats)> {
    let xv = x.value();
    let c = *xv.shape().last().unwrap();
    let (gv, bv) = (gamma.value(), beta.value());
    if gv.shape() != [c] || bv.shape() != [c] {
        return Err(Error::mismatch("batch_norm", xv.shape(), gv.shape()));
    }
    let m = xv.len() / c;
    let xd = xv.data();
    let mut mean = vec![0.0; c];
    for row in xd.chunks(c) {
        mean.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0; c];
    for row in xd.chunks(c) {
        for ch in 0..c {
            let d = row[ch] - mean[ch];
            var[ch] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(xd.len());
    for row in xd.chunks(c) {
        for ch in 0..c {
            xhat.push((row[ch] - mean[ch]) * inv_std[ch]);
        }
    }
    let (gd, bd) = (gv.data(), bv.data());
    let out: Vec<f64> = xhat
        .iter()
        .enumerate()
        .map(|(i, &xh)| gd[i % c] * xh + bd[i % c])
        .collect();
    let out = Tensor::new(xv.shape(), out)?;
    let stats = BatchStats {
        mean,
        var,
        count: m,
    };
    let bw: BackwardFn = Box::new(move |g, needs| {
        let gd = gv.data();
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
            for ch in 0..c {
                sum_g[ch] += grow[ch];
                sum_gx[ch] += grow[ch] * xrow[ch];
            }
        }
        let dx = needs[0].then(|| {
            let mf = m as f64;
            let mut d = Vec::with_capacity(g.len());
            for (grow, xrow) in g.chunks(c).zip(xhat.chunks(c)) {
                for ch in 0..c {
                    let s = gd[ch] * inv_std[ch] / mf;
                    d.push(s * (mf * grow[ch] - sum_g[ch] - xrow[ch] * sum_gx[ch]));
                }
            }
            d
        });
        vec![dx, needs[1].then(|| sum_gx.clone()), needs[2].then(|| sum_g.clone())]
    });
    let y = x.tape().push("batch_norm", out, &[x, gamma, beta], bw)?;
    Ok((y, stats))
}

/// `y = x * scale + shift` with per-channel `scale` and `shift` of shape `[C]`.
pub fn channel_affine<'t>(x: Var<'t>, scale: Var<'t>, shift: Var<'t>) -> Result<Var<'t>> {
    let xv = x.value();
    let c = *xv.shape().last().unwrap();
    let (sv, tv) = (scale.value(), shift.value());
    if sv.shape() != [c] || tv.shape() != [c] {
        return Err(Error::mismatch("channel_affine", xv.shape(), sv.shape()));
    }
    let (sd, td) = (sv.data(), tv.data());
    let out: Vec<f64> = xv
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * sd[i % c] + td[i % c])
        .collect();
    let out = Tensor::new(xv.shape(), out)?;
    let bw: BackwardFn = Box::new(move |g, needs| {
        let sd = sv.data();
        let dx = needs[0].then(|| g.iter().enumerate().map(|(i, v)| v * sd[i % c]).collect());
        let ds = needs[1].then(|| {
            let mut d = vec![0.0; c];
            for (grow, xrow) in g.chunks(c).zip(xv.data().chunks(c)) {
                for ch in 0..c {
                    d[ch] += grow[ch] * xrow[ch];
                }
            }
            d
        });
        vec![dx, ds, needs[2].then(|| channel_sums(g, c))]
    });
    x.tape().push("channel_affine", out, &[x, scale, shift], bw)
}
