//! Binary cross entropy, on probabilities and on logits.

use crate::error::{Error, Result};

use super::layers::sigmoid;
use super::tensor::Real;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("{what}: {a} values vs {b}")));
    }
    Ok(())
}

fn pixel_bce(p: f64, y: f64) -> f64 {
    let p = p.clamp(EPS, 1.0 - EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Mean per-pixel binary cross entropy of probabilities against soft targets.
/// With `weights` the mean is weighted.
pub fn loss_bce(prob: &[f32], target: &[f32], weights: Option<&[f32]>) -> Result<f64> {
    check_len(prob.len(), target.len(), "prediction and target")?;
    if prob.is_empty() {
        return Err(Error::Contract("empty prediction".into()));
    }
    if let Some(&y) = target.iter().find(|y| !(0.0..=1.0).contains(*y)) {
        return Err(Error::Contract(format!("target value {y} outside [0, 1]")));
    }
    match weights {
        None => {
            let sum: f64 = prob
                .iter()
                .zip(target)
                .map(|(&p, &y)| pixel_bce(p as f64, y as f64))
                .sum();
            Ok(sum / prob.len() as f64)
        }
        Some(w) => {
            check_len(prob.len(), w.len(), "prediction and weights")?;
            let total: f64 = w.iter().map(|&v| v as f64).sum();
            if total <= 0.0 || w.iter().any(|&v| v < 0.0) {
                return Err(Error::Contract(
                    "weights must be non-negative with a positive sum".into(),
                ));
            }
            let sum: f64 = prob
                .iter()
                .zip(target)
                .zip(w)
                .map(|((&p, &y), &wv)| wv as f64 * pixel_bce(p as f64, y as f64))
                .sum();
            Ok(sum / total)
        }
    }
}

/// `BCE(prob, target) + lambda * BCE(prob, pseudo)`.
pub fn joint_bce(prob: &[f32], target: &[f32], pseudo: &[f32], lambda: f64) -> Result<f64> {
    let base = loss_bce(prob, target, None)?;
    if lambda == 0.0 {
        return Ok(base);
    }
    Ok(base + lambda * loss_bce(prob, pseudo, None)?)
}

/// Mean BCE computed from logits, with the gradient of the mean.
///
/// Each `(targets, weight)` pair contributes `weight * BCE(sigmoid(z), y)`.
pub fn bce_logits<T: Real>(logits: &[T], targets: &[(&[T], f64)]) -> Result<(f64, Vec<T>)> {
    let n = logits.len();
    if n == 0 {
        return Err(Error::Contract("empty prediction".into()));
    }
    for (y, _) in targets {
        check_len(n, y.len(), "logits and target")?;
    }
    let mut loss = 0.0;
    let mut grad = vec![T::zero(); n];
    let inv_n = 1.0 / n as f64;
    for (y, weight) in targets {
        if *weight == 0.0 {
            continue;
        }
        let mut sum = 0.0;
        for ((g, &z), &t) in grad.iter_mut().zip(logits).zip(y.iter()) {
            let zf = z.as_f64();
            let tf = t.as_f64();
            sum += zf.max(0.0) - zf * tf + (-zf.abs()).exp().ln_1p();
            *g += T::from_f64(weight * (sigmoid(zf) - tf) * inv_n);
        }
        loss += weight * sum * inv_n;
    }
    Ok((loss, grad))
}
