//! Task losses with mean reduction and their gradients.
//!
//! Predictions are laid out `[B, C, ...spatial]`; every spatial position
//! of every sample is one "position" for reduction purposes.

use crate::error::{Error, Result};
use crate::layers::LossKind;
use crate::tensor::Tensor;

/// Below this norm a cosine operand is treated as having this norm.
const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub value: f64,
    /// Gradient of `value` w.r.t. the prediction, in the prediction's dtype.
    pub grad: Tensor,
}

/// `(batch, channels, positions per sample)` of a prediction.
fn layout(pred: &Tensor) -> Result<(usize, usize, usize)> {
    if pred.rank() < 2 {
        return Err(Error::Shape(format!(
            "prediction must be [batch, channels, ...], got {:?}",
            pred.shape()
        )));
    }
    let (b, c) = (pred.shape()[0], pred.shape()[1]);
    Ok((b, c, pred.len() / (b * c)))
}

fn expect_same_shape(pred: &Tensor, target: &Tensor, kind: LossKind) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(kind.as_str(), pred.shape(), target.shape()));
    }
    Ok(())
}

pub fn task_loss(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<LossOutput> {
    match kind {
        LossKind::CrossEntropy => cross_entropy(pred, target),
        LossKind::L1 => {
            expect_same_shape(pred, target, kind)?;
            elementwise(pred, target, |d| (d.abs(), sign(d)))
        }
        LossKind::Mse => {
            expect_same_shape(pred, target, kind)?;
            elementwise(pred, target, |d| (d * d, 2.0 * d))
        }
        LossKind::Cosine => {
            expect_same_shape(pred, target, kind)?;
            cosine(pred, target)
        }
    }
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean over elements of `f(pred - target).0`; `.1` is the derivative.
fn elementwise(pred: &Tensor, target: &Tensor, f: impl Fn(f64) -> (f64, f64)) -> Result<LossOutput> {
    let p = pred.to_f64_vec();
    let t = target.to_f64_vec();
    let n = p.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(p.len());
    for (a, b) in p.iter().zip(&t) {
        let (v, g) = f(a - b);
        value += v;
        grad.push(g / n);
    }
    Ok(LossOutput {
        value: value / n,
        grad: Tensor::from_fn(pred.shape(), pred.dtype(), |i| grad[i])?,
    })
}

fn cross_entropy(pred: &Tensor, target: &Tensor) -> Result<LossOutput> {
    let (b, c, s) = layout(pred)?;
    let mut want = vec![b];
    want.extend_from_slice(&pred.shape()[2..]);
    if target.shape() != want.as_slice() && !(s == 1 && target.shape() == [b, 1]) {
        return Err(Error::dim("softmax-cross-entropy", pred.shape(), target.shape()));
    }
    let logits = pred.to_f64_vec();
    let labels = target.to_f64_vec();
    let positions = (b * s) as f64;
    let mut grad = vec![0.0; logits.len()];
    let mut value = 0.0;
    let mut probs = vec![0.0; c];
    for bi in 0..b {
        for si in 0..s {
            let raw = labels[bi * s + si];
            if raw < 0.0 || raw.fract() != 0.0 || raw as usize >= c {
                return Err(Error::Argument(format!(
                    "class label {raw} is not an index below {c}"
                )));
            }
            let label = raw as usize;
            let at = |ci: usize| (bi * c + ci) * s + si;
            let max = (0..c).map(|ci| logits[at(ci)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (ci, p) in probs.iter_mut().enumerate() {
                *p = (logits[at(ci)] - max).exp();
                z += *p;
            }
            value += z.ln() + max - logits[at(label)];
            for (ci, p) in probs.iter().enumerate() {
                let onehot = if ci == label { 1.0 } else { 0.0 };
                grad[at(ci)] = (p / z - onehot) / positions;
            }
        }
    }
    Ok(LossOutput {
        value: value / positions,
        grad: Tensor::from_fn(pred.shape(), pred.dtype(), |i| grad[i])?,
    })
}

fn cosine(pred: &Tensor, target: &Tensor) -> Result<LossOutput> {
    let (b, c, s) = layout(pred)?;
    let p = pred.to_f64_vec();
    let t = target.to_f64_vec();
    let positions = (b * s) as f64;
    let mut grad = vec![0.0; p.len()];
    let mut value = 0.0;
    for bi in 0..b {
        for si in 0..s {
            let at = |ci: usize| (bi * c + ci) * s + si;
            let (mut dot, mut pp, mut tt) = (0.0, 0.0, 0.0);
            for ci in 0..c {
                dot += p[at(ci)] * t[at(ci)];
                pp += p[at(ci)] * p[at(ci)];
                tt += t[at(ci)] * t[at(ci)];
            }
            let np = pp.sqrt();
            let nt = tt.sqrt().max(COSINE_EPS);
            let clamped = np <= COSINE_EPS;
            let np = np.max(COSINE_EPS);
            value += 1.0 - dot / (np * nt);
            for ci in 0..c {
                let mut d = t[at(ci)] / (np * nt);
                if !clamped {
                    d -= dot * p[at(ci)] / (np * np * np * nt);
                }
                grad[at(ci)] = -d / positions;
            }
        }
    }
    Ok(LossOutput {
        value: value / positions,
        grad: Tensor::from_fn(pred.shape(), pred.dtype(), |i| grad[i])?,
    })
}
