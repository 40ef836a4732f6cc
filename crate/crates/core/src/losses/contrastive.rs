//! Supervised contrastive losses over a batch of embeddings.
//!
//! All four named losses are instances of one per-anchor form. For anchor `i`
//! of class `y`, with similarities `s_ik = z_i . z_k / t` over the candidate
//! set `C_i` (every other batch row, plus every prototype when prototypes are
//! used) and positives `P_i` (same-class members of `C_i`):
//!
//! ```text
//! loss_i = -(1/norm_i) * sum_{p in P_i} log( w_y e^{s_ip} / sum_{k in C_i} w_{j(k)} a_{ik} e^{s_ik} )
//! ```
//!
//! - `w_j = n_j` (training count) for the rebalanced losses, 1 otherwise;
//! - `a_ik = 1 / |{candidates of class j(k)}|` with class averaging, 1 otherwise;
//! - `norm_i = |P_i|`, or `|B_y|` in strict mode.
//!
//! Anchors with no positive are skipped; the batch loss is the mean over the
//! remaining anchors. The weight ratio enters as `ln n_j - ln n_y`, which is
//! exactly zero for equal counts, so RCL with equal counts reproduces SCL bit for bit.

use ndarray::{Array2, ArrayView2, Axis};

use super::lse;
use crate::error::{Error, Result};

/// Tolerance on row norms for anything flagged unit-normalized.
pub const UNIT_NORM_TOL: f64 = 1e-9;

fn rows_are_unit(m: ArrayView2<'_, f64>) -> bool {
    m.outer_iter()
        .all(|r| (r.dot(&r).sqrt() - 1.0).abs() <= UNIT_NORM_TOL)
}

/// Embeddings for a batch plus their labels.
///
/// When `unit_normalized` is set the rows are trusted to be unit length; when
/// it is clear, the unit-norm losses verify the rows before use.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
    pub unit_normalized: bool,
}

impl EmbeddingBatch {
    pub fn new(embeddings: Array2<f64>, labels: Vec<usize>, unit_normalized: bool) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(Error::Shape {
                context: "EmbeddingBatch",
                expected: format!("{} rows", labels.len()),
                got: format!("{}", embeddings.nrows()),
            });
        }
        if unit_normalized && !rows_are_unit(embeddings.view()) {
            return Err(Error::invalid("embeddings", "rows are not unit-normalized"));
        }
        Ok(Self {
            embeddings,
            labels,
            unit_normalized,
        })
    }

    /// Divides every row by its norm and sets the flag.
    pub fn normalized(mut embeddings: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        normalize_rows(&mut embeddings)?;
        Self::new(embeddings, labels, true)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn require_unit(&self) -> Result<()> {
        if !self.unit_normalized && !rows_are_unit(self.embeddings.view()) {
            return Err(Error::invalid(
                "batch",
                "embeddings must be unit-normalized for this loss",
            ));
        }
        Ok(())
    }
}

pub fn normalize_rows(m: &mut Array2<f64>) -> Result<()> {
    for mut row in m.outer_iter_mut() {
        // Scale by the largest entry first so huge-but-finite rows don't overflow.
        let scale = row.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        if !(scale.is_finite() && scale > 0.0) {
            let what = if scale == 0.0 { "cannot normalize a zero row" } else { "row is not finite" };
            return Err(Error::invalid("embeddings", what));
        }
        row /= scale;
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    Ok(())
}

/// One unit-length center per class, row `y` for class `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub centers: Array2<f64>,
}

impl Prototypes {
    pub fn new(centers: Array2<f64>) -> Result<Self> {
        if !rows_are_unit(centers.view()) {
            return Err(Error::invalid("prototypes", "rows are not unit-normalized"));
        }
        Ok(Self { centers })
    }

    pub fn normalized(mut centers: Array2<f64>) -> Result<Self> {
        normalize_rows(&mut centers)?;
        Ok(Self { centers })
    }

    /// Skips the norm check; used where rows are perturbed on purpose.
    pub fn new_unchecked(centers: Array2<f64>) -> Self {
        Self { centers }
    }

    pub fn num_classes(&self) -> usize {
        self.centers.nrows()
    }
}

/// Per-class positive scale factors applied to features before the contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionMap {
    factors: Vec<f64>,
}

impl CompressionMap {
    pub fn new(factors: Vec<f64>) -> Result<Self> {
        if factors.iter().any(|&f| !(f.is_finite() && f > 0.0)) {
            return Err(Error::invalid(
                "factors",
                "compression factors must be finite and > 0",
            ));
        }
        Ok(Self { factors })
    }

    pub fn identity(num_classes: usize) -> Self {
        Self {
            factors: vec![1.0; num_classes],
        }
    }

    pub fn factors(&self) -> &[f64] {
        &self.factors
    }

    pub fn is_identity(&self) -> bool {
        self.factors.iter().all(|&f| f == 1.0)
    }
}

/// Scales row `i` by `factors[label_i]`. The result is no longer unit-normalized.
pub fn compress_features(batch: &EmbeddingBatch, map: &CompressionMap) -> Result<EmbeddingBatch> {
    if let Some(&y) = batch.labels.iter().find(|&&y| y >= map.factors.len()) {
        return Err(Error::invalid(
            "map",
            format!("no compression factor for class {y}"),
        ));
    }
    let mut out = batch.embeddings.clone();
    for (mut row, &y) in out.outer_iter_mut().zip(&batch.labels) {
        row *= map.factors[y];
    }
    Ok(EmbeddingBatch {
        embeddings: out,
        labels: batch.labels.clone(),
        unit_normalized: false,
    })
}

/// Knobs selecting a member of the contrastive loss family.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveParams<'a> {
    pub temperature: f64,
    /// Training counts `n_y`; enables frequency rebalancing.
    pub class_counts: Option<&'a [usize]>,
    /// Average each class's denominator contribution over its candidates.
    pub class_averaging: bool,
    /// Scale features per class before computing similarities.
    pub compression: Option<&'a CompressionMap>,
    /// Normalize each anchor by `|B_y|` instead of by its positive count.
    pub strict_normalizer: bool,
}

impl ContrastiveParams<'_> {
    pub fn plain(temperature: f64) -> Self {
        ContrastiveParams {
            temperature,
            class_counts: None,
            class_averaging: false,
            compression: None,
            strict_normalizer: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_embeddings: Array2<f64>,
    /// Present iff prototypes were supplied.
    pub grad_prototypes: Option<Array2<f64>>,
    /// Number of anchors that had at least one positive.
    pub anchors: usize,
}

/// General form behind every contrastive loss in this module.
///
/// Does not check row norms: callers that need unit-length inputs validate
/// them first. Gradients are with respect to the uncompressed inputs.
pub fn contrastive_loss(
    embeddings: ArrayView2<'_, f64>,
    labels: &[usize],
    prototypes: Option<ArrayView2<'_, f64>>,
    num_classes: usize,
    params: &ContrastiveParams<'_>,
) -> Result<ContrastiveOutput> {
    let n = embeddings.nrows();
    let dim = embeddings.ncols();
    if labels.len() != n {
        return Err(Error::Shape {
            context: "contrastive_loss",
            expected: format!("{n} labels"),
            got: format!("{}", labels.len()),
        });
    }
    if !(params.temperature.is_finite() && params.temperature > 0.0) {
        return Err(Error::invalid("temperature", "must be > 0"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::invalid(
            "labels",
            format!("label {y} >= L = {num_classes}"),
        ));
    }
    if let Some(p) = prototypes {
        if p.nrows() != num_classes || p.ncols() != dim {
            return Err(Error::Shape {
                context: "prototypes",
                expected: format!("{num_classes} x {dim}"),
                got: format!("{} x {}", p.nrows(), p.ncols()),
            });
        }
    }
    if let Some(counts) = params.class_counts {
        if counts.len() != num_classes {
            return Err(Error::Shape {
                context: "class_counts",
                expected: format!("{num_classes} counts"),
                got: format!("{}", counts.len()),
            });
        }
        if let Some(&y) = labels.iter().find(|&&y| counts[y] == 0) {
            return Err(Error::invalid(
                "class_counts",
                format!("class {y} appears in the batch with count 0"),
            ));
        }
        if prototypes.is_some() && counts.contains(&0) {
            return Err(Error::invalid("class_counts", "every count must be >= 1"));
        }
    }
    if let Some(map) = params.compression {
        if map.factors.len() != num_classes {
            return Err(Error::Shape {
                context: "compression",
                expected: format!("{num_classes} factors"),
                got: format!("{}", map.factors.len()),
            });
        }
    }

    // Rows 0..n are batch members, rows n..n+L (if any) are prototypes.
    let num_protos = if prototypes.is_some() { num_classes } else { 0 };
    let total = n + num_protos;
    let mut row_class: Vec<usize> = labels.to_vec();
    row_class.extend(0..num_protos);
    let mut feats = Array2::zeros((total, dim));
    feats.slice_mut(ndarray::s![..n, ..]).assign(&embeddings);
    if let Some(p) = prototypes {
        feats.slice_mut(ndarray::s![n.., ..]).assign(&p);
    }
    let scale: Vec<f64> = match params.compression {
        Some(map) => row_class.iter().map(|&y| map.factors[y]).collect(),
        None => vec![1.0; total],
    };
    for (mut row, &s) in feats.outer_iter_mut().zip(&scale) {
        if s != 1.0 {
            row *= s;
        }
    }

    let mut batch_counts = vec![0usize; num_classes];
    for &y in labels {
        batch_counts[y] += 1;
    }
    let log_counts: Option<Vec<f64>> = params
        .class_counts
        .map(|c| c.iter().map(|&v| (v as f64).ln()).collect());

    let inv_t = 1.0 / params.temperature;
    let sims = feats.slice(ndarray::s![..n, ..]).dot(&feats.t()) * inv_t;

    // First pass: per-anchor softmax over candidates, collected as dL/ds_ik.
    let mut coeff = Array2::<f64>::zeros((n, total));
    let mut loss_sum = 0.0;
    let mut anchors = 0usize;
    let mut logits = Vec::with_capacity(total);
    let mut cand = Vec::with_capacity(total);
    for i in 0..n {
        let y = labels[i];
        let own = batch_counts[y] - 1 + usize::from(num_protos > 0);
        if own == 0 {
            continue;
        }
        anchors += 1;
        logits.clear();
        cand.clear();
        for k in 0..total {
            if k == i {
                continue;
            }
            let j = row_class[k];
            let mut lw = 0.0;
            if let Some(lc) = &log_counts {
                lw += lc[j] - lc[y];
            }
            if params.class_averaging {
                let members = batch_counts[j] - usize::from(j == y) + usize::from(num_protos > 0);
                lw -= (members as f64).ln();
            }
            logits.push(sims[[i, k]] + lw);
            cand.push(k);
        }
        let log_z = lse(&logits);
        let norm = if params.strict_normalizer {
            batch_counts[y] as f64
        } else {
            own as f64
        };
        let mut pos_sum = 0.0;
        for (&k, &logit) in cand.iter().zip(&logits) {
            let q = (logit - log_z).exp();
            let mut c = own as f64 * q;
            if row_class[k] == y {
                pos_sum += sims[[i, k]];
                c -= 1.0;
            }
            coeff[[i, k]] = c / norm;
        }
        loss_sum += (own as f64 * log_z - pos_sum) / norm;
    }

    let mut grad_feats = Array2::<f64>::zeros((total, dim));
    let loss = if anchors == 0 {
        0.0
    } else {
        let inv_a = 1.0 / anchors as f64;
        coeff *= inv_a * inv_t;
        // s_ik = x_i . x_k / t  =>  dL/dx_i += c_ik x_k / t, dL/dx_k += c_ik x_i / t.
        let anchor_part = coeff.dot(&feats);
        let cand_part = coeff.t().dot(&feats.slice(ndarray::s![..n, ..]));
        grad_feats += &cand_part;
        grad_feats
            .slice_mut(ndarray::s![..n, ..])
            .scaled_add(1.0, &anchor_part);
        loss_sum * inv_a
    };
    for (mut row, &s) in grad_feats.outer_iter_mut().zip(&scale) {
        if s != 1.0 {
            row *= s;
        }
    }

    let grad_prototypes = prototypes.map(|_| grad_feats.slice(ndarray::s![n.., ..]).to_owned());
    let grad_embeddings = grad_feats.slice_axis(Axis(0), (..n).into()).to_owned();
    Ok(ContrastiveOutput {
        loss,
        grad_embeddings,
        grad_prototypes,
        anchors,
    })
}

fn num_classes_of(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |&m| m + 1)
}

fn check_counts(counts: &[usize], labels: &[usize]) -> Result<()> {
    if let Some(&y) = labels.iter().find(|&&y| y >= counts.len()) {
        return Err(Error::invalid(
            "counts",
            format!("no training count for class {y}"),
        ));
    }
    Ok(())
}

/// Supervised contrastive loss; gradient with respect to the embeddings.
pub fn scl_loss(batch: &EmbeddingBatch, temperature: f64) -> Result<(f64, Array2<f64>)> {
    batch.require_unit()?;
    let out = contrastive_loss(
        batch.embeddings.view(),
        &batch.labels,
        None,
        num_classes_of(&batch.labels),
        &ContrastiveParams::plain(temperature),
    )?;
    Ok((out.loss, out.grad_embeddings))
}

/// Supervised contrastive loss with numerator weight `n_y` and denominator
/// weights `n_j` taken from the training-set class counts.
pub fn rcl_loss(
    batch: &EmbeddingBatch,
    counts: &[usize],
    temperature: f64,
) -> Result<(f64, Array2<f64>)> {
    batch.require_unit()?;
    check_counts(counts, &batch.labels)?;
    let params = ContrastiveParams {
        class_counts: Some(counts),
        ..ContrastiveParams::plain(temperature)
    };
    let out = contrastive_loss(
        batch.embeddings.view(),
        &batch.labels,
        None,
        counts.len(),
        &params,
    )?;
    Ok((out.loss, out.grad_embeddings))
}

/// Class-averaged contrastive loss in which every class prototype is an
/// extra member of its class. Returns gradients for embeddings and prototypes.
pub fn bcl_loss(
    batch: &EmbeddingBatch,
    prototypes: &Prototypes,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    batch.require_unit()?;
    let params = ContrastiveParams {
        class_averaging: true,
        ..ContrastiveParams::plain(temperature)
    };
    let out = contrastive_loss(
        batch.embeddings.view(),
        &batch.labels,
        Some(prototypes.centers.view()),
        prototypes.num_classes(),
        &params,
    )?;
    Ok((out.loss, out.grad_embeddings, out.grad_prototypes.unwrap()))
}

/// [`bcl_loss`] with rebalancing weights `n_y`/`n_j`, evaluated on features
/// (and prototypes) scaled by their class factor from `map`.
pub fn bcl_rcl_loss(
    batch: &EmbeddingBatch,
    prototypes: &Prototypes,
    counts: &[usize],
    map: &CompressionMap,
    temperature: f64,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    batch.require_unit()?;
    let params = ContrastiveParams {
        temperature,
        class_counts: Some(counts),
        class_averaging: true,
        compression: Some(map),
        strict_normalizer: false,
    };
    let out = contrastive_loss(
        batch.embeddings.view(),
        &batch.labels,
        Some(prototypes.centers.view()),
        prototypes.num_classes(),
        &params,
    )?;
    Ok((out.loss, out.grad_embeddings, out.grad_prototypes.unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_pair_has_zero_loss() {
        let b = EmbeddingBatch::new(array![[1.0, 0.0], [1.0, 0.0]], vec![0, 0], true).unwrap();
        let (l, g) = scl_loss(&b, 1.0).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scl_three_point_batch() {
        // anchors 0 and 1: -log(e / (e + 1)); anchor 2 has no positive.
        let b = EmbeddingBatch::new(
            array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            vec![0, 0, 1],
            true,
        )
        .unwrap();
        let (l, _) = scl_loss(&b, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l - (1.0 + 1.0 / e).ln()).abs() < 1e-15);
    }

    #[test]
    fn rcl_equal_counts_is_scl_bitwise() {
        let b = EmbeddingBatch::normalized(
            array![[1.0, 0.2], [0.3, 1.0], [-0.5, 0.4], [0.9, -0.1]],
            vec![0, 1, 0, 1],
        )
        .unwrap();
        let (a, ga) = scl_loss(&b, 0.5).unwrap();
        let (r, gr) = rcl_loss(&b, &[7, 7], 0.5).unwrap();
        assert_eq!(a.to_bits(), r.to_bits());
        assert_eq!(ga, gr);
    }

    #[test]
    fn rcl_tail_anchor_is_easier() {
        // Same three-point batch plus a second tail member so the tail anchor counts.
        let b = EmbeddingBatch::new(
            array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]],
            vec![0, 0, 1, 1],
            true,
        )
        .unwrap();
        let (eq, _) = rcl_loss(&b, &[1, 1], 1.0).unwrap();
        let (skew, _) = rcl_loss(&b, &[100, 1], 1.0).unwrap();
        // head anchors: -log(100e / (100e + 2)); tail anchors: -log(e / (e + 200))
        let e = std::f64::consts::E;
        let head = (1.0 + 2.0 / (100.0 * e)).ln();
        let tail = (1.0 + 200.0 / e).ln();
        assert!((skew - (head + tail) / 2.0).abs() < 1e-14);
        assert!(skew != eq);
    }

    #[test]
    fn unflagged_batch_must_be_unit() {
        let b = EmbeddingBatch::new(array![[2.0, 0.0], [1.0, 0.0]], vec![0, 0], false).unwrap();
        assert!(scl_loss(&b, 1.0).is_err());
        let ok = EmbeddingBatch::new(array![[1.0, 0.0], [1.0, 0.0]], vec![0, 0], false).unwrap();
        assert!(scl_loss(&ok, 1.0).is_ok());
        assert!(EmbeddingBatch::new(array![[2.0, 0.0]], vec![0], true).is_err());
    }

    #[test]
    fn bcl_singleton_with_matching_prototype() {
        let b = EmbeddingBatch::new(array![[0.6, 0.8]], vec![0], true).unwrap();
        let p = Prototypes::new(array![[0.6, 0.8]]).unwrap();
        let (l, _, _) = bcl_loss(&b, &p, 1.0).unwrap();
        assert!(l.abs() < 1e-15);
    }

    #[test]
    fn bcl_rejects_wrong_prototype_count() {
        let b = EmbeddingBatch::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1], true).unwrap();
        let p = Prototypes::new(array![[1.0, 0.0]]).unwrap();
        assert!(bcl_loss(&b, &p, 1.0).is_err());
    }

    #[test]
    fn compression_scales_rows() {
        let b = EmbeddingBatch::normalized(
            array![[1.0, 1.0], [0.0, 1.0], [1.0, 0.0]],
            vec![0, 1, 0],
        )
        .unwrap();
        let same = compress_features(&b, &CompressionMap::identity(2)).unwrap();
        assert_eq!(same.embeddings, b.embeddings);
        assert!(!same.unit_normalized);

        let map = CompressionMap::new(vec![0.005, 1.0]).unwrap();
        let c = compress_features(&b, &map).unwrap();
        for (row, &y) in c.embeddings.outer_iter().zip(&c.labels) {
            let norm = row.dot(&row).sqrt();
            let want = if y == 0 { 0.005 } else { 1.0 };
            assert!((norm - want).abs() < 1e-15);
        }
        let within = c.embeddings.row(0).dot(&c.embeddings.row(2));
        let within0 = b.embeddings.row(0).dot(&b.embeddings.row(2));
        assert!((within - 0.005 * 0.005 * within0).abs() < 1e-18);
        let cross = c.embeddings.row(0).dot(&c.embeddings.row(1));
        let cross0 = b.embeddings.row(0).dot(&b.embeddings.row(1));
        assert!((cross - 0.005 * cross0).abs() < 1e-17);
        assert!(CompressionMap::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn bcl_rcl_reduces_to_bcl() {
        let b = EmbeddingBatch::normalized(
            array![[1.0, 0.2, 0.1], [0.3, 1.0, -0.2], [-0.5, 0.4, 0.7], [0.9, -0.1, 0.3]],
            vec![0, 1, 2, 0],
        )
        .unwrap();
        let p = Prototypes::normalized(array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
            .unwrap();
        let (a, ga, pa) = bcl_loss(&b, &p, 0.2).unwrap();
        let (r, gr, pr) =
            bcl_rcl_loss(&b, &p, &[4, 4, 4], &CompressionMap::identity(3), 0.2).unwrap();
        assert_eq!(a.to_bits(), r.to_bits());
        assert_eq!(ga, gr);
        assert_eq!(pa, pr);
    }

    #[test]
    fn no_contributing_anchor_gives_zero() {
        let b = EmbeddingBatch::new(array![[1.0, 0.0], [0.0, 1.0]], vec![0, 1], true).unwrap();
        let out = contrastive_loss(
            b.embeddings.view(),
            &b.labels,
            None,
            2,
            &ContrastiveParams::plain(1.0),
        )
        .unwrap();
        assert_eq!(out.anchors, 0);
        assert_eq!(out.loss, 0.0);
    }
}
