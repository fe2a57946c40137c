use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

/// Compare the tape gradient of a scalar function against central
/// differences.
///
/// `f` is evaluated on a fresh tape each time. Two evaluations at `x` must
/// agree bit for bit, otherwise the check is rejected with
/// [`Error::NonDeterministic`]. Relative error uses
/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check<F>(mut f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> FnMut(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    let eval = |f: &mut F, t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        let y = f(&tape, v)?;
        let yv = y.value();
        if yv.len() != 1 {
            return Err(Error::NonScalarRoot(yv.shape().to_vec()));
        }
        Ok(yv.item())
    };

    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let y = f(&tape, xv)?;
    let y0 = y.value();
    if y0.len() != 1 {
        return Err(Error::NonScalarRoot(y0.shape().to_vec()));
    }
    tape.backward(y)?;
    let analytic = tape
        .grad(xv)
        .map(|g| g.into_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);
    drop(tape);

    if eval(&mut f, x)?.to_bits() != y0.item().to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&mut f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }

    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(1e-8);
        max_abs = max_abs.max(abs);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst_index: worst,
        analytic,
        numeric,
        tol,
        passed: max_rel < tol,
    })
}
