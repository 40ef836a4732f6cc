//! The rebalanced contrastive loss rewritten as a softplus over pairwise
//! similarity gaps, each shifted by the margin `log(n_j / n_y)`:
//!
//! ```text
//! loss_i = (1/|P_i|) sum_{p in P_i} log(1 + sum_{k != i, p} (n_{j(k)} / n_y) e^{(s_ik - s_ip)})
//! ```
//!
//! Evaluated independently of the log-sum-exp path in `contrastive.rs`.

use super::contrastive::EmbeddingBatch;
use crate::error::{Error, Result};

/// Loss value only; see the module docs for the form.
pub fn rcl_pairwise_margin_form(
    batch: &EmbeddingBatch,
    counts: &[usize],
    temperature: f64,
) -> Result<f64> {
    rcl_pairwise_margin_form_with(batch, counts, temperature, false)
}

/// As [`rcl_pairwise_margin_form`], optionally dividing by `|B_y|` instead of `|P_i|`.
pub fn rcl_pairwise_margin_form_with(
    batch: &EmbeddingBatch,
    counts: &[usize],
    temperature: f64,
    strict_normalizer: bool,
) -> Result<f64> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::invalid("temperature", "must be > 0"));
    }
    if !batch.unit_normalized {
        let ok = batch
            .embeddings
            .outer_iter()
            .all(|r| (r.dot(&r).sqrt() - 1.0).abs() <= super::UNIT_NORM_TOL);
        if !ok {
            return Err(Error::invalid(
                "batch",
                "embeddings must be unit-normalized for this loss",
            ));
        }
    }
    if let Some(&y) = batch
        .labels
        .iter()
        .find(|&&y| y >= counts.len() || counts[y] == 0)
    {
        return Err(Error::invalid(
            "counts",
            format!("missing or zero training count for class {y}"),
        ));
    }

    let z = &batch.embeddings;
    let labels = &batch.labels;
    let n = labels.len();
    let mut batch_counts = vec![0usize; counts.len()];
    for &y in labels {
        batch_counts[y] += 1;
    }

    let mut total = 0.0;
    let mut anchors = 0usize;
    let mut exponents = Vec::with_capacity(n);
    for i in 0..n {
        let y = labels[i];
        let positives = batch_counts[y] - 1;
        if positives == 0 {
            continue;
        }
        anchors += 1;
        let zi = z.row(i);
        let mut anchor_sum = 0.0;
        for p in (0..n).filter(|&p| p != i && labels[p] == y) {
            let sp = zi.dot(&z.row(p)) / temperature;
            exponents.clear();
            for k in (0..n).filter(|&k| k != i && k != p) {
                let margin = (counts[labels[k]] as f64 / counts[y] as f64).ln();
                exponents.push(margin + zi.dot(&z.row(k)) / temperature - sp);
            }
            // log(1 + sum e^{a}) with the largest exponent factored out.
            let top = exponents.iter().copied().fold(0.0f64, f64::max);
            let inner: f64 =
                (-top).exp() + exponents.iter().map(|&a| (a - top).exp()).sum::<f64>();
            anchor_sum += top + inner.ln();
        }
        let norm = if strict_normalizer {
            batch_counts[y]
        } else {
            positives
        };
        total += anchor_sum / norm as f64;
    }
    Ok(if anchors == 0 {
        0.0
    } else {
        total / anchors as f64
    })
}
