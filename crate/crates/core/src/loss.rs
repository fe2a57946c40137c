//! Training objectives: the soft-IoU plus binary cross-entropy mask loss and
//! class-weighted categorical cross-entropy.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clipped to `[EPSILON, 1 - EPSILON]` before logs and ratios.
pub const EPSILON: f64 = 1e-7;

fn check_binary(y: &Tensor, op: &'static str) -> Result<()> {
    if y.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        Ok(())
    } else {
        Err(Error::domain(op, "ground truth must be binary"))
    }
}

/// `1 - softIoU(y, p) + BCE(y, p)` over every pixel of `y_hat`, with
/// `p = clip(y_hat)`. Sums are order-invariant, so permuting pixels leaves
/// the value unchanged bit for bit.
pub fn combined_loss<'t>(y: &Tensor, y_hat: Var<'t>) -> Result<Var<'t>> {
    let shape = y_hat.shape();
    if y.shape() != shape.as_slice() {
        return Err(Error::mismatch("combined_loss", y.shape(), &shape));
    }
    check_binary(y, "combined_loss")?;
    let tape = y_hat.tape();
    let n = y.len() as f64;
    let p = y_hat.clip(EPSILON, 1.0 - EPSILON)?;
    let yv = tape.constant(y.clone());
    let not_y = tape.constant(y.map(|v| 1.0 - v));

    let inter = yv.mul(p)?.sum_order_invariant()?;
    let y_sum = yv.sum_order_invariant()?;
    let union = y_sum.add(p.sum_order_invariant()?)?.sub(inter)?;
    let soft_iou = inter.div(union)?;

    let ll = yv
        .mul(p.log()?)?
        .add(not_y.mul(p.rsub_scalar(1.0)?.log()?)?)?
        .sum_order_invariant()?;
    let bce = ll.mul_scalar(-1.0 / n)?;
    soft_iou.rsub_scalar(1.0)?.add(bce)
}

/// Scalar value of [`combined_loss`] for plain tensors.
pub fn combined_loss_value(y: &Tensor, y_hat: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    let v = combined_loss(y, tape.constant(y_hat.clone()))?;
    Ok(v.value().item())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightMode {
    /// `W_i = N_i / N`.
    PaperLiteral,
    /// `W_i = N / (C * N_i)`.
    InverseFrequency,
    /// All ones.
    Unit,
}

impl std::str::FromStr for WeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-literal" => Ok(WeightMode::PaperLiteral),
            "inverse-frequency" => Ok(WeightMode::InverseFrequency),
            "unit" => Ok(WeightMode::Unit),
            _ => Err(Error::Config(format!("unknown class-weight mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub mode: WeightMode,
}

impl ClassWeights {
    pub fn unit(classes: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; classes],
            mode: WeightMode::Unit,
        }
    }

    pub fn from_counts(counts: &[usize], mode: WeightMode) -> Result<Self> {
        if counts.is_empty() || counts.contains(&0) {
            return Err(Error::domain("class_weights", format!("every class needs samples, got {counts:?}")));
        }
        let total = counts.iter().sum::<usize>() as f64;
        let c = counts.len() as f64;
        let weights = match mode {
            WeightMode::Unit => vec![1.0; counts.len()],
            WeightMode::InverseFrequency => counts.iter().map(|&n| total / (c * n as f64)).collect(),
            WeightMode::PaperLiteral => {
                let mut w: Vec<f64> = counts.iter().map(|&n| n as f64 / total).collect();
                normalize_exact(&mut w);
                w
            }
        };
        Ok(ClassWeights { weights, mode })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// If the left-to-right sum is not exactly 1, replaces the last entry with
/// `1 - (sum of the rest)`, which is. The change is at most a few ulps.
fn normalize_exact(w: &mut [f64]) {
    if w.iter().sum::<f64>() == 1.0 {
        return;
    }
    if let Some((last, rest)) = w.split_last_mut() {
        *last = 1.0 - rest.iter().sum::<f64>();
    }
}

/// `-(1/B) * sum_b w[class(b)] * ln p[b, class(b)]` with probabilities
/// clipped below at [`EPSILON`].
pub fn weighted_categorical_crossentropy<'t>(
    probs: Var<'t>,
    labels: &Tensor,
    weights: &ClassWeights,
) -> Result<Var<'t>> {
    let shape = probs.shape();
    let &[b, c] = shape.as_slice() else {
        return Err(Error::mismatch("weighted_cce", &shape, labels.shape()));
    };
    if labels.shape() != [b, c] || weights.len() != c {
        return Err(Error::mismatch("weighted_cce", &shape, labels.shape()));
    }
    let mut scaled = Vec::with_capacity(b * c);
    for row in labels.data().chunks(c) {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::domain("weighted_cce", "labels must be one-hot"));
        }
        scaled.extend(row.iter().zip(&weights.weights).map(|(y, w)| y * w));
    }
    let tape = probs.tape();
    let w = tape.constant(Tensor::new(&[b, c], scaled)?);
    let logp = probs.clip(EPSILON, 1.0)?.log()?;
    w.mul(logp)?.sum()?.mul_scalar(-1.0 / b as f64)
}

/// One-hot rows for integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::domain("one_hot", format!("label {l} out of range for {classes} classes")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], data)
}
