//! Elementwise, linear-algebra and reduction ops.

use std::sync::Arc;

use super::tape::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Bin {
    Add,
    Sub,
    Mul,
    Div,
}

impl Bin {
    fn name(self) -> &'static str {
        match self {
            Bin::Add => "add",
            Bin::Sub => "sub",
            Bin::Mul => "mul",
            Bin::Div => "div",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Bin::Add => a + b,
            Bin::Sub => a - b,
            Bin::Mul => a * b,
            Bin::Div => a / b,
        }
    }
}

fn reduce_to(grad: Vec<f64>, scalar: bool) -> Vec<f64> {
    if scalar {
        vec![grad.iter().sum()]
    } else {
        grad
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    fn binary(self, other: Var<'t>, op: Bin) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (a_scalar, b_scalar) = if a.shape() == b.shape() {
            (false, false)
        } else if b.len() == 1 {
            (false, true)
        } else if a.len() == 1 {
            (true, false)
        } else {
            return Err(Error::mismatch(op.name(), a.shape(), b.shape()));
        };
        let out_shape = if a_scalar { b.shape() } else { a.shape() }.to_vec();
        let n = a.len().max(b.len());
        let ad = a.data();
        let bd = b.data();
        let at = |i: usize| if a_scalar { ad[0] } else { ad[i] };
        let bt = |i: usize| if b_scalar { bd[0] } else { bd[i] };
        if let Bin::Div = op {
            if (0..b.len()).any(|i| bd[i] == 0.0) {
                return Err(Error::domain("div", "division by zero"));
            }
        }
        let data: Vec<f64> = (0..n).map(|i| op.apply(at(i), bt(i))).collect();
        let out = Tensor::new(&out_shape, data)?;
        let bw: super::BackwardFn = Box::new(move |g, needs| {
            let ad = a.data();
            let bd = b.data();
            let at = |i: usize| if a_scalar { ad[0] } else { ad[i] };
            let bt = |i: usize| if b_scalar { bd[0] } else { bd[i] };
            let ga = needs[0].then(|| {
                let v: Vec<f64> = match op {
                    Bin::Add | Bin::Sub => g.to_vec(),
                    Bin::Mul => (0..n).map(|i| g[i] * bt(i)).collect(),
                    Bin::Div => (0..n).map(|i| g[i] / bt(i)).collect(),
                };
                reduce_to(v, a_scalar)
            });
            let gb = needs[1].then(|| {
                let v: Vec<f64> = match op {
                    Bin::Add => g.to_vec(),
                    Bin::Sub => g.iter().map(|v| -v).collect(),
                    Bin::Mul => (0..n).map(|i| g[i] * at(i)).collect(),
                    Bin::Div => (0..n)
                        .map(|i| -g[i] * at(i) / (bt(i) * bt(i)))
                        .collect(),
                };
                reduce_to(v, b_scalar)
            });
            vec![ga, gb]
        });
        self.tape().push(op.name(), out, &[self, other], bw)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Bin::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Bin::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Bin::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Bin::Div)
    }

    /// Unary op with derivative expressed through input `x` and output `y`.
    fn unary(
        self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Result<Var<'t>> {
        let x = self.value();
        let y = x.map(f);
        let (xs, ys) = (x.clone(), y.clone());
        let bw: super::BackwardFn = Box::new(move |g, _| {
            let d = g
                .iter()
                .zip(xs.data().iter().zip(ys.data()))
                .map(|(g, (&x, &y))| g * df(x, y))
                .collect();
            vec![Some(d)]
        });
        self.tape().push(name, y, &[self], bw)
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn mul_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("mul_scalar", move |x| x * c, move |_, _| c)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.mul_scalar(-1.0)
    }

    /// `c - x`.
    pub fn rsub_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary("rsub_scalar", move |x| c - x, |_, _| -1.0)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn log(self) -> Result<Var<'t>> {
        if self.value().data().iter().any(|&v| v <= 0.0) {
            return Err(Error::domain("log", "non-positive input; clip first"));
        }
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    /// Clamp into `[min, max]`; the gradient is zero where clamping engaged.
    pub fn clip(self, min: f64, max: f64) -> Result<Var<'t>> {
        if min > max {
            return Err(Error::domain("clip", format!("min {min} > max {max}")));
        }
        self.unary(
            "clip",
            move |x| x.clamp(min, max),
            move |x, _| if x < min || x > max { 0.0 } else { 1.0 },
        )
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        self.tape()
            .push("reshape", out, &[self], Box::new(|g, _| vec![Some(g.to_vec())]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = other.value();
        let (m, k, k2, n) = match (a.shape(), b.shape()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            _ => return Err(Error::mismatch("matmul", a.shape(), b.shape())),
        };
        if k != k2 {
            return Err(Error::mismatch("matmul", a.shape(), b.shape()));
        }
        let out = Tensor::new(&[m, n], matmul_raw(a.data(), b.data(), m, k, n))?;
        let bw: super::BackwardFn = Box::new(move |g, needs| {
            let ad = a.data();
            let bd = b.data();
            // dA = G . B^T
            let ga = needs[0].then(|| {
                let mut d = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let brow = &bd[p * n..(p + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        d[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                    }
                }
                d
            });
            // dB = A^T . G
            let gb = needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let av = ad[i * k + p];
                        let drow = &mut d[p * n..(p + 1) * n];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += av * gv;
                        }
                    }
                }
                d
            });
            vec![ga, gb]
        });
        self.tape().push("matmul", out, &[self, other], bw)
    }

    /// Sum over `axes`, dropping them. Reducing every axis yields shape `[1]`.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let rank = shape.len();
        if axes.iter().any(|&a| a >= rank) {
            return Err(Error::Invalid(format!("axes {axes:?} out of range for {shape:?}")));
        }
        let keep: Vec<bool> = (0..rank).map(|a| !axes.contains(&a)).collect();
        let mut out_shape: Vec<usize> = (0..rank).filter(|&a| keep[a]).map(|a| shape[a]).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out_len: usize = out_shape.iter().product();
        let index_map = Arc::new(reduction_index_map(&shape, &keep));
        let mut data = vec![0.0; out_len];
        for (i, &v) in x.data().iter().enumerate() {
            data[index_map[i]] += v;
        }
        let out = Tensor::new(&out_shape, data)?;
        let bw: super::BackwardFn =
            Box::new(move |g, _| vec![Some(index_map.iter().map(|&o| g[o]).collect())]);
        self.tape().push("sum", out, &[self], bw)
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let count: usize = axes.iter().map(|&a| shape.get(a).copied().unwrap_or(1)).product();
        self.sum_axes(axes)?.mul_scalar(1.0 / count as f64)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let x = self.value();
        let out = Tensor::scalar(x.data().iter().sum());
        let n = x.len();
        self.tape()
            .push("sum_all", out, &[self], Box::new(move |g, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.value().len();
        self.sum()?.mul_scalar(1.0 / n as f64)
    }

    /// Sum of all elements accumulated in ascending value order, so the
    /// result is independent of element order.
    pub fn sum_order_invariant(self) -> Result<Var<'t>> {
        let x = self.value();
        let mut sorted = x.data().to_vec();
        sorted.sort_by(f64::total_cmp);
        let out = Tensor::scalar(sorted.iter().sum());
        let n = x.len();
        self.tape().push(
            "sum_order_invariant",
            out,
            &[self],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    /// Add a `[C]` bias along the last axis.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let x = self.value();
        let b = bias.value();
        let c = *x.shape().last().unwrap_or(&0);
        if b.shape() != [c] {
            return Err(Error::mismatch("add_bias", x.shape(), b.shape()));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(b.data()).for_each(|(v, bv)| *v += bv);
        }
        let out = Tensor::new(x.shape(), data)?;
        let bw: super::BackwardFn = Box::new(move |g, needs| {
            let gb = needs[1].then(|| {
                let mut d = vec![0.0; c];
                for row in g.chunks(c) {
                    d.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                d
            });
            vec![needs[0].then(|| g.to_vec()), gb]
        });
        self.tape().push("add_bias", out, &[self, bias], bw)
    }

    /// Row-wise softmax over the last axis of a `[B, C]` tensor.
    pub fn softmax(self) -> Result<Var<'t>> {
        let x = self.value();
        let c = match x.shape() {
            &[_, c] => c,
            s => return Err(Error::Invalid(format!("softmax expects [B, C], got {s:?}"))),
        };
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        let y = Tensor::new(x.shape(), data)?;
        let ys = y.clone();
        let bw: super::BackwardFn = Box::new(move |g, _| {
            let mut d = vec![0.0; g.len()];
            for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(ys.data().chunks(c)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for i in 0..c {
                    drow[i] = yrow[i] * (grow[i] - dot);
                }
            }
            vec![Some(d)]
        });
        self.tape().push("softmax", y, &[self], bw)
    }
}

/// Concatenate along the last (channel) axis; all other dims must agree.
pub fn concat_channels<'t>(inputs: &[Var<'t>]) -> Result<Var<'t>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
    if inputs.len() == 1 {
        return Ok(*first);
    }
    let values: Vec<Tensor> = inputs.iter().map(|v| v.value()).collect();
    let lead = &values[0].shape()[..values[0].shape().len() - 1];
    for v in &values[1..] {
        let s = v.shape();
        if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
            return Err(Error::mismatch("concat_channels", values[0].shape(), s));
        }
    }
    let chans: Vec<usize> = values.iter().map(|v| *v.shape().last().unwrap()).collect();
    let total: usize = chans.iter().sum();
    let rows: usize = lead.iter().product();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (v, &c) in values.iter().zip(&chans) {
            data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    let out = Tensor::new(&shape, data)?;
    let bw: super::BackwardFn = Box::new(move |g, needs| {
        let mut offset = 0;
        chans
            .iter()
            .zip(needs)
            .map(|(&c, &need)| {
                let start = offset;
                offset += c;
                need.then(|| {
                    let mut d = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        d.extend_from_slice(&g[r * total + start..r * total + start + c]);
                    }
                    d
                })
            })
            .collect()
    });
    first.tape().push("concat_channels", out, inputs, bw)
}

/// Take channels `start..start + len` of the last axis.
pub fn slice_channels<'t>(x: Var<'t>, start: usize, len: usize) -> Result<Var<'t>> {
    let v = x.value();
    let c = *v.shape().last().unwrap();
    if len == 0 || start + len > c {
        return Err(Error::Invalid(format!("channel slice {start}+{len} of {c}")));
    }
    let rows = v.len() / c;
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&v.data()[r * c + start..r * c + start + len]);
    }
    let mut shape = v.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    let out = Tensor::new(&shape, data)?;
    let bw: super::BackwardFn = Box::new(move |g, _| {
        let mut d = vec![0.0; rows * c];
        for r in 0..rows {
            d[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
        }
        vec![Some(d)]
    });
    x.tape().push("slice_channels", out, &[x], bw)
}

/// Arithmetic mean of equally shaped tensors, evaluated as
/// `x0 + sum_i (x_i - x0) / n` so that identical inputs return `x0` exactly.
pub fn mean_of<'t>(inputs: &[Var<'t>]) -> Result<Var<'t>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Invalid("mean of zero tensors".into()))?;
    let values: Vec<Tensor> = inputs.iter().map(|v| v.value()).collect();
    for v in &values[1..] {
        if v.shape() != values[0].shape() {
            return Err(Error::mismatch("mean_of", values[0].shape(), v.shape()));
        }
    }
    let n = values.len() as f64;
    let base = values[0].data();
    let data: Vec<f64> = (0..base.len())
        .map(|i| {
            let spread: f64 = values[1..].iter().map(|v| v.data()[i] - base[i]).sum();
            base[i] + spread / n
        })
        .collect();
    let out = Tensor::new(values[0].shape(), data)?;
    let count = values.len();
    let bw: super::BackwardFn = Box::new(move |g, needs| {
        (0..count)
            .map(|i| needs[i].then(|| g.iter().map(|v| v / n).collect()))
            .collect()
    });
    first.tape().push("mean_of", out, inputs, bw)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn reduction_index_map(shape: &[usize], keep: &[bool]) -> Vec<usize> {
    let total: usize = shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    for _ in 0..total {
        let mut o = 0;
        for (a, &i) in idx.iter().enumerate() {
            if keep[a] {
                o = o * shape[a] + i;
            }
        }
        map.push(o);
        for a in (0..shape.len()).rev() {
            idx[a] += 1;
            if idx[a] < shape[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    map
}
