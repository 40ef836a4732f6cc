use ndarray::{Array2, ArrayView2};

use super::{ClassifierLoss, LossConfig};
use crate::error::{Error, Result};

/// Numerically stable softmax.
pub fn softmax(f: &[f64]) -> Vec<f64> {
    let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = f.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_logits(f: &[f64], y: usize) -> Result<()> {
    if f.is_empty() {
        return Err(Error::invalid("logits", "empty"));
    }
    if y >= f.len() {
        return Err(Error::invalid(
            "y",
            format!("class {y} out of range for {} logits", f.len()),
        ));
    }
    if f.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("logits", "non-finite entry"));
    }
    Ok(())
}

/// Cross-entropy of `f + shift` at class `y`.
///
/// The loss is assembled as `(max - z_y) + ln_1p(rest)` so that confident
/// correct predictions keep full relative precision.
fn shifted_ce(f: &[f64], y: usize, shift: impl Fn(usize) -> f64) -> (f64, Vec<f64>) {
    let z: Vec<f64> = f.iter().enumerate().map(|(i, &v)| v + shift(i)).collect();
    let (arg, max) = z
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let rest: f64 = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    let loss = (max - z[y]) + rest.ln_1p();
    let mut grad = softmax(&z);
    // p_y - 1 written as minus the other probabilities, exact when p_y ~ 1
    grad[y] = -grad
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != y)
        .map(|(_, p)| p)
        .sum::<f64>();
    (loss, grad)
}

/// Softmax cross-entropy; gradient is `softmax(f) - onehot(y)`.
pub fn ce_loss(f: &[f64], y: usize) -> Result<(f64, Vec<f64>)> {
    check_logits(f, y)?;
    Ok(shifted_ce(f, y, |_| 0.0))
}

/// `-log(n_y e^{f_y} / sum_i n_i e^{f_i})`.
pub fn balanced_softmax_loss(f: &[f64], y: usize, counts: &[usize]) -> Result<(f64, Vec<f64>)> {
    check_logits(f, y)?;
    if counts.len() != f.len() {
        return Err(Error::Shape {
            context: "balanced_softmax_loss",
            expected: format!("{} counts", f.len()),
            got: format!("{}", counts.len()),
        });
    }
    if counts.contains(&0) {
        return Err(Error::invalid("counts", "every class count must be >= 1"));
    }
    Ok(shifted_ce(f, y, |i| (counts[i] as f64).ln()))
}

/// Cross-entropy on `f_i + tau * log(pi_i)`.
pub fn logit_adjusted_loss(
    f: &[f64],
    y: usize,
    priors: &[f64],
    tau_logit: f64,
) -> Result<(f64, Vec<f64>)> {
    check_logits(f, y)?;
    if priors.len() != f.len() {
        return Err(Error::Shape {
            context: "logit_adjusted_loss",
            expected: format!("{} priors", f.len()),
            got: format!("{}", priors.len()),
        });
    }
    if priors.iter().any(|&p| !(p.is_finite() && p > 0.0)) {
        return Err(Error::invalid("priors", "every prior must be > 0"));
    }
    if !(tau_logit.is_finite() && tau_logit >= 0.0) {
        return Err(Error::invalid("tau_logit", "must be >= 0"));
    }
    Ok(shifted_ce(f, y, |i| tau_logit * priors[i].ln()))
}

/// Mean classifier loss over the rows of `logits` and its gradient.
pub fn classifier_batch_loss(
    logits: ArrayView2<'_, f64>,
    labels: &[usize],
    config: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    if logits.nrows() != labels.len() || logits.nrows() == 0 {
        return Err(Error::Shape {
            context: "classifier_batch_loss",
            expected: format!("{} non-empty logit rows", labels.len()),
            got: format!("{}", logits.nrows()),
        });
    }
    let n = labels.len() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.row(i).to_vec();
        let (loss, g) = match config.classifier {
            ClassifierLoss::CrossEntropy => ce_loss(&row, y)?,
            ClassifierLoss::BalancedSoftmax => balanced_softmax_loss(&row, y, &config.class_counts)?,
            ClassifierLoss::LogitAdjusted => {
                logit_adjusted_loss(&row, y, &config.priors, config.tau_logit)?
            }
        };
        total += loss;
        for (dst, src) in grad.row_mut(i).iter_mut().zip(g) {
            *dst = src / n;
        }
    }
    Ok((total / n, grad))
}
