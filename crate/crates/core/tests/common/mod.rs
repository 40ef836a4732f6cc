//! Independent oracles shared by the integration tests.
//!
//! Everything here is evaluated in double-double arithmetic (`TwoFloat`,
//! ~32 significant digits) by direct summation: no max-subtraction, no
//! shared code with the library beyond its public data types.
//!
//! Only twofloat's `+ - *` and division by an `f64` are used; its
//! transcendental functions and `TwoFloat / TwoFloat` round to roughly
//! double precision, so `exp`, `ln` and `div` are provided here.

#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use twofloat::consts::LN_2;
use twofloat::TwoFloat;

use rcl_core::data::Batch;
use rcl_core::losses::{ClassifierLoss, ContrastiveLoss, LossConfig};
use rcl_core::model::ModelShape;

pub type T = TwoFloat;

pub fn t(x: f64) -> T {
    T::from(x)
}

pub fn to_f64(x: T) -> f64 {
    x.hi() + x.lo()
}

/// `a / b` refined to double-double accuracy.
pub fn div(a: T, b: T) -> T {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    T::new_add(q1, q2) + q3
}

/// `e^x`: `x = k ln 2 + r`, Taylor series on `r / 256`, then eight squarings.
pub fn exp(x: T) -> T {
    assert!(x.hi().abs() < 700.0, "exp argument out of range: {}", x.hi());
    let k = (x.hi() / LN_2.hi()).round();
    let r = (x - LN_2 * k) / 256.0;
    let mut term = t(1.0);
    let mut sum = t(1.0);
    for i in 1..=14 {
        term = term * r / i as f64;
        sum += term;
    }
    for _ in 0..8 {
        sum = sum * sum;
    }
    sum * 2f64.powi(k as i32)
}

/// Natural log by two Newton steps on `e^y = x` from the `f64` estimate.
pub fn ln(x: T) -> T {
    assert!(x.hi() > 0.0);
    let mut y = t(x.hi().ln());
    for _ in 0..2 {
        y = y + x * exp(-y) - 1.0;
    }
    y
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- classifier

/// `ln(sum_i e^{f_i + shift_i}) - (f_y + shift_y)`, summed directly.
pub fn ce_oracle(f: &[T], y: usize, shift: &[f64]) -> T {
    let z: Vec<T> = f.iter().zip(shift).map(|(&v, &s)| v + s).collect();
    let mut sum = t(0.0);
    for &v in &z {
        sum += exp(v);
    }
    ln(sum) - z[y]
}

pub fn no_shift(len: usize) -> Vec<f64> {
    vec![0.0; len]
}

pub fn count_shift(counts: &[usize]) -> Vec<f64> {
    counts.iter().map(|&n| (n as f64).ln()).collect()
}

pub fn prior_shift(priors: &[f64], tau: f64) -> Vec<f64> {
    priors.iter().map(|&p| tau * p.ln()).collect()
}

// --------------------------------------------------------------- contrastive

/// Which member of the contrastive family the oracle evaluates.
#[derive(Debug, Clone, Default)]
pub struct Family {
    /// `n_y` weights; `None` for unweighted.
    pub counts: Option<Vec<usize>>,
    /// Divide each class's denominator terms by its candidate count.
    pub averaging: bool,
    /// Per-class feature scale.
    pub factors: Option<Vec<f64>>,
    /// Normalize by `|B_y|` instead of the positive count.
    pub strict: bool,
}

impl Family {
    pub fn scl() -> Self {
        Self::default()
    }

    pub fn rcl(counts: &[usize]) -> Self {
        Self {
            counts: Some(counts.to_vec()),
            ..Self::default()
        }
    }

    pub fn bcl() -> Self {
        Self {
            averaging: true,
            ..Self::default()
        }
    }

    pub fn bcl_rcl(counts: &[usize], factors: &[f64]) -> Self {
        Self {
            counts: Some(counts.to_vec()),
            averaging: true,
            factors: Some(factors.to_vec()),
            strict: false,
        }
    }
}

fn dot(a: &[T], b: &[T]) -> T {
    let mut s = t(0.0);
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Exhaustive double loop over anchors, positives and candidates:
///
/// `loss_i = -(1/norm_i) sum_p ln( w_y e^{s_ip} / sum_j w_j a_j sum_{k in C_i, class j} e^{s_ik} )`
///
/// Returns `None` when no anchor has a positive.
pub fn contrastive_oracle(
    emb: &[Vec<T>],
    labels: &[usize],
    protos: Option<&[Vec<T>]>,
    num_classes: usize,
    temperature: f64,
    fam: &Family,
) -> Option<T> {
    let scale = |v: &[T], class: usize| -> Vec<T> {
        let f = fam.factors.as_ref().map_or(1.0, |f| f[class]);
        v.iter().map(|&x| x * f).collect()
    };
    // Every member of the pool: batch rows first, then prototypes.
    let mut pool: Vec<(Vec<T>, usize)> = emb
        .iter()
        .zip(labels)
        .map(|(v, &y)| (scale(v, y), y))
        .collect();
    if let Some(p) = protos {
        for (c, v) in p.iter().enumerate() {
            pool.push((scale(v, c), c));
        }
    }
    let weight = |j: usize| fam.counts.as_ref().map_or(1.0, |n| n[j] as f64);

    let mut total = t(0.0);
    let mut anchors = 0usize;
    for i in 0..emb.len() {
        let y = labels[i];
        let candidates: Vec<usize> = (0..pool.len()).filter(|&k| k != i).collect();
        let mut per_class = vec![0usize; num_classes];
        for &k in &candidates {
            per_class[pool[k].1] += 1;
        }
        let positives: Vec<usize> = candidates
            .iter()
            .copied()
            .filter(|&k| pool[k].1 == y)
            .collect();
        if positives.is_empty() {
            continue;
        }
        let sim = |k: usize| dot(&pool[i].0, &pool[k].0) / temperature;
        let mut denom = t(0.0);
        for &k in &candidates {
            let j = pool[k].1;
            let a = if fam.averaging {
                1.0 / per_class[j] as f64
            } else {
                1.0
            };
            denom += exp(sim(k)) * (weight(j) * a);
        }
        let mut sum = t(0.0);
        for &p in &positives {
            sum += ln(div(exp(sim(p)) * weight(y), denom));
        }
        let norm = if fam.strict {
            labels.iter().filter(|&&l| l == y).count()
        } else {
            positives.len()
        };
        total -= sum / norm as f64;
        anchors += 1;
    }
    (anchors > 0).then(|| total / anchors as f64)
}

pub fn rows_tf(m: &Array2<f64>) -> Vec<Vec<T>> {
    m.outer_iter().map(|r| r.iter().map(|&v| t(v)).collect()).collect()
}

pub fn flat_tf(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| t(x)).collect()
}

pub fn unflatten(v: &[T], cols: usize) -> Vec<Vec<T>> {
    v.chunks(cols).map(<[T]>::to_vec).collect()
}

// ------------------------------------------------------------- finite diffs

/// Central difference `(f(x + h e_k) - f(x - h e_k)) / 2h` for every `k`,
/// with the perturbed points represented exactly.
pub fn fd_gradient(x: &[f64], h: f64, f: impl Fn(&[T]) -> T) -> Vec<f64> {
    let base = flat_tf(x);
    (0..x.len())
        .map(|k| {
            let mut p = base.clone();
            p[k] += h;
            let up = f(&p);
            p[k] = base[k] - h;
            let down = f(&p);
            to_f64((up - down) / (2.0 * h))
        })
        .collect()
}

/// Largest `|a - b| / max(|a|, 1e-8)` over coordinates.
pub fn max_rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    analytic
        .iter()
        .zip(reference)
        .map(|(&a, &b)| (a - b).abs() / a.abs().max(1e-8))
        .fold(0.0, f64::max)
}

pub const FD_STEP: f64 = 1e-6;

// ----------------------------------------------------------- random inputs

pub fn random_unit_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal));
    for mut r in m.outer_iter_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

/// Labels in `0..num_classes` with every class that appears appearing at
/// least twice (so every anchor has a positive) unless `allow_singletons`.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, num_classes: usize, allow_singletons: bool) -> Vec<usize> {
    loop {
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..num_classes)).collect();
        let ok = allow_singletons
            || (0..num_classes).all(|c| labels.iter().filter(|&&l| l == c).count() != 1);
        if ok {
            return labels;
        }
    }
}

/// Long-tail style counts: the largest is `max`, ratio up to `max`.
pub fn random_counts(rng: &mut ChaCha8Rng, num_classes: usize, max: usize) -> Vec<usize> {
    (0..num_classes).map(|_| rng.gen_range(1..=max)).collect()
}

// -------------------------------------------------------------- the network

fn tanh(x: T) -> T {
    // 1 - 2 / (e^{2x} + 1), accurate for the moderate arguments used here.
    t(1.0) - div(t(2.0), exp(x * 2.0) + 1.0)
}

struct Layer<'a> {
    w: &'a [T],
    b: &'a [T],
    inputs: usize,
    outputs: usize,
    tanh: bool,
}

impl Layer<'_> {
    fn apply(&self, x: &[T]) -> Vec<T> {
        (0..self.outputs)
            .map(|o| {
                let mut s = self.b[o];
                for i in 0..self.inputs {
                    s += self.w[o * self.inputs + i] * x[i];
                }
                if self.tanh {
                    tanh(s)
                } else {
                    s
                }
            })
            .collect()
    }
}

/// Splits a flat parameter vector (encoder, classifier, projector, then
/// prototypes; weight then bias per layer) into layers.
fn layers<'a>(flat: &'a [T], s: ModelShape) -> (Vec<Layer<'a>>, Layer<'a>, Layer<'a>, &'a [T]) {
    let mut off = 0;
    let mut take = |inputs: usize, outputs: usize, tanh: bool| {
        let w = &flat[off..off + inputs * outputs];
        off += inputs * outputs;
        let b = &flat[off..off + outputs];
        off += outputs;
        Layer {
            w,
            b,
            inputs,
            outputs,
            tanh,
        }
    };
    let enc = vec![
        take(s.input_dim, s.hidden, true),
        take(s.hidden, s.feat_dim, true),
    ];
    let cls = take(s.feat_dim, s.num_classes, false);
    let proj = take(s.feat_dim, s.embed_dim, false);
    let protos = &flat[off..];
    assert_eq!(protos.len(), s.num_classes * s.embed_dim);
    (enc, cls, proj, protos)
}

fn encode(enc: &[Layer<'_>], x: &[T]) -> Vec<T> {
    enc.iter().fold(x.to_vec(), |h, l| l.apply(&h))
}

/// `alpha * mean classifier loss(view a) + beta * contrastive loss(views b ++ c)`.
pub fn network_loss_oracle(
    flat: &[T],
    shape: ModelShape,
    batch: &Batch,
    config: &LossConfig,
    factors: Option<&[f64]>,
) -> T {
    let (enc, cls, proj, protos) = layers(flat, shape);
    let n = batch.labels.len();
    let shift = match config.classifier {
        ClassifierLoss::CrossEntropy => no_shift(shape.num_classes),
        ClassifierLoss::BalancedSoftmax => count_shift(&config.class_counts),
        ClassifierLoss::LogitAdjusted => prior_shift(&config.priors, config.tau_logit),
    };
    let mut cls_loss = t(0.0);
    for (row, &y) in batch.view_a.outer_iter().zip(&batch.labels) {
        let x: Vec<T> = row.iter().map(|&v| t(v)).collect();
        let logits = cls.apply(&encode(&enc, &x));
        cls_loss += ce_oracle(&logits, y, &shift);
    }
    let mut total = cls_loss / n as f64 * config.alpha;

    if config.contrastive != ContrastiveLoss::None {
        let mut z = Vec::with_capacity(2 * n);
        for view in [&batch.view_b, &batch.view_c] {
            for row in view.outer_iter() {
                let x: Vec<T> = row.iter().map(|&v| t(v)).collect();
                let u = proj.apply(&encode(&enc, &x));
                let norm = dot(&u, &u).sqrt();
                z.push(u.iter().map(|&v| div(v, norm)).collect::<Vec<T>>());
            }
        }
        let labels: Vec<usize> = batch.labels.iter().chain(&batch.labels).copied().collect();
        let rebalanced = matches!(config.contrastive, ContrastiveLoss::Rcl | ContrastiveLoss::BclRcl);
        let with_protos = matches!(config.contrastive, ContrastiveLoss::Bcl | ContrastiveLoss::BclRcl);
        let fam = Family {
            counts: rebalanced.then(|| config.class_counts.clone()),
            averaging: with_protos,
            factors: factors.map(<[f64]>::to_vec),
            strict: config.strict_normalizer,
        };
        let p = unflatten(protos, shape.embed_dim);
        let con = contrastive_oracle(
            &z,
            &labels,
            with_protos.then_some(p.as_slice()),
            shape.num_classes,
            config.temperature,
            &fam,
        );
        if let Some(con) = con {
            total += con * config.beta;
        }
    }
    total
}
