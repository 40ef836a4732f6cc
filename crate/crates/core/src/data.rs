//! Synthetic long-tail datasets: count profiles, Gaussian-mixture generation,
//! seeded two-view batch sampling and a plain-text dataset file format.
//!
//! File format (`longtail-v1`):
//!
//! ```text
//! longtail-v1 L=<classes> D=<input dim>
//! <label> <f_1> ... <f_D>
//! ...
//! ```
//!
//! Rows are written in dataset order, which for generated data is class-major.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};

pub const DATASET_MAGIC: &str = "longtail-v1";

/// Head count, class count and imbalance factor of a long-tail profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongTailProfile {
    pub num_classes: usize,
    pub max_count: usize,
    pub imbalance_factor: f64,
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Per-class counts decaying geometrically from `max_count` (class 0) to
/// `max_count / imbalance_factor` (class `L-1`), rounded half-up.
pub fn make_longtail_counts(profile: &LongTailProfile) -> Result<Vec<usize>> {
    let LongTailProfile {
        num_classes,
        max_count,
        imbalance_factor,
    } = *profile;
    if num_classes < 2 {
        return Err(Error::invalid(
            "num_classes",
            format!("need at least 2 classes, got {num_classes}"),
        ));
    }
    if max_count == 0 {
        return Err(Error::invalid("max_count", "must be at least 1"));
    }
    if !(imbalance_factor.is_finite() && imbalance_factor >= 1.0) {
        return Err(Error::invalid(
            "imbalance_factor",
            format!("must be finite and >= 1, got {imbalance_factor}"),
        ));
    }
    let last = (num_classes - 1) as f64;
    let counts: Vec<usize> = (0..num_classes)
        .map(|k| round_half_up(max_count as f64 * imbalance_factor.powf(-(k as f64) / last)))
        .collect();
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(
            "imbalance_factor",
            format!("class {k} rounds to zero instances ({max_count} / {imbalance_factor})"),
        ));
    }
    Ok(counts)
}

/// Labelled feature matrix with its per-class counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
}

impl Dataset {
    /// Validates the labels against `num_classes`; every class must occur.
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape {
                context: "Dataset::new",
                expected: format!("{} feature rows", labels.len()),
                got: format!("{}", features.nrows()),
            });
        }
        if features.ncols() == 0 {
            return Err(Error::invalid("features", "input dimension must be >= 1"));
        }
        let mut class_counts = vec![0usize; num_classes];
        for (row, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::invalid(
                    "labels",
                    format!("row {row} has label {y} >= L = {num_classes}"),
                ));
            }
            class_counts[y] += 1;
        }
        if let Some(y) = class_counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid(
                "labels",
                format!("class {y} has no instances"),
            ));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features", "non-finite feature value"));
        }
        Ok(Self {
            features,
            labels,
            class_counts,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Isotropic Gaussian classes around centers laid out on a circle in a
/// seed-chosen 2-D plane, neighbouring centers exactly `center_scale` apart.
///
/// The centers depend only on the seed, so train/validation/test splits drawn
/// from the same mixture share their geometry.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    centers: Array2<f64>,
    noise_sigma: f64,
    seed: u64,
}

impl GaussianMixture {
    pub fn new(
        num_classes: usize,
        input_dim: usize,
        center_scale: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("num_classes", "must be >= 1"));
        }
        if input_dim < 2 {
            return Err(Error::invalid(
                "input_dim",
                format!("need D >= 2, got {input_dim}"),
            ));
        }
        if !(noise_sigma.is_finite() && noise_sigma > 0.0) {
            return Err(Error::invalid(
                "noise_sigma",
                format!("must be positive, got {noise_sigma}"),
            ));
        }
        if !(center_scale.is_finite() && center_scale >= 0.0) {
            return Err(Error::invalid(
                "center_scale",
                format!("must be finite and >= 0, got {center_scale}"),
            ));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (u, v) = random_plane(&mut rng, input_dim);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let radius = if num_classes == 1 {
            0.0
        } else {
            center_scale / (2.0 * (std::f64::consts::PI / num_classes as f64).sin())
        };
        let mut centers = Array2::zeros((num_classes, input_dim));
        for (k, mut row) in centers.axis_iter_mut(Axis(0)).enumerate() {
            let angle = phase + std::f64::consts::TAU * k as f64 / num_classes as f64;
            let (s, c) = angle.sin_cos();
            row.assign(&((&u * c + &v * s) * radius));
        }
        Ok(Self {
            centers,
            noise_sigma,
            seed,
        })
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    /// Draws `counts[k]` points for each class `k`, class-major. Distinct
    /// `split` ids give independent samples from the same mixture.
    pub fn sample(&self, counts: &[usize], split: u64) -> Result<Dataset> {
        if counts.len() != self.centers.nrows() {
            return Err(Error::Shape {
                context: "GaussianMixture::sample",
                expected: format!("{} class counts", self.centers.nrows()),
                got: format!("{}", counts.len()),
            });
        }
        if let Some(k) = counts.iter().position(|&c| c == 0) {
            return Err(Error::invalid("counts", format!("class {k} has count 0")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(split + 1);
        let normal = Normal::new(0.0, self.noise_sigma).expect("sigma validated in new");

        let n: usize = counts.iter().sum();
        let dim = self.centers.ncols();
        let mut features = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for (k, &count) in counts.iter().enumerate() {
            let center = self.centers.row(k);
            for _ in 0..count {
                for (j, x) in features.row_mut(row).iter_mut().enumerate() {
                    *x = center[j] + normal.sample(&mut rng);
                }
                labels.push(k);
                row += 1;
            }
        }
        Dataset::new(features, labels, counts.len())
    }
}

fn random_plane(rng: &mut ChaCha8Rng, dim: usize) -> (Array1<f64>, Array1<f64>) {
    loop {
        let a: Array1<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let b: Array1<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let na = a.dot(&a).sqrt();
        if na < 1e-8 {
            continue;
        }
        let u = a / na;
        let b = &b - &(&u * u.dot(&b));
        let nb = b.dot(&b).sqrt();
        if nb < 1e-8 {
            continue;
        }
        return (u, b / nb);
    }
}

/// Single-split convenience wrapper around [`GaussianMixture`].
pub fn gen_gaussian_mixture(
    counts: &[usize],
    input_dim: usize,
    center_scale: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    GaussianMixture::new(counts.len(), input_dim, center_scale, noise_sigma, seed)?
        .sample(counts, 0)
}

/// Selected rows plus three views: `view_a` is the raw input for the
/// classifier branch, `view_b`/`view_c` are independently jittered copies for
/// the contrastive branch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub batch_class_counts: Vec<usize>,
    pub view_a: Array2<f64>,
    pub view_b: Array2<f64>,
    pub view_c: Array2<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Position of a ChaCha stream, enough to replay it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Seeded stream of batch draws.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream `stream` of the generator seeded by `seed`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { rng }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        Self { rng }
    }
}

/// Uniform without-replacement draw of `batch_size` rows with two jittered views.
pub fn sample_batch(
    dataset: &Dataset,
    batch_size: usize,
    sampler: &mut BatchSampler,
    jitter_sigma: f64,
) -> Result<Batch> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size", "must be >= 1"));
    }
    if batch_size > dataset.len() {
        return Err(Error::invalid(
            "batch_size",
            format!("{batch_size} exceeds dataset size {}", dataset.len()),
        ));
    }
    if !(jitter_sigma.is_finite() && jitter_sigma >= 0.0) {
        return Err(Error::invalid(
            "jitter_sigma",
            format!("must be finite and >= 0, got {jitter_sigma}"),
        ));
    }

    let indices = index::sample(&mut sampler.rng, dataset.len(), batch_size).into_vec();
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.labels()[i]).collect();
    let mut batch_class_counts = vec![0; dataset.num_classes()];
    for &y in &labels {
        batch_class_counts[y] += 1;
    }
    let view_a = dataset.features().select(Axis(0), &indices);
    let mut view_b = view_a.clone();
    let mut view_c = view_a.clone();
    if jitter_sigma > 0.0 {
        let normal = Normal::new(0.0, jitter_sigma).expect("sigma validated above");
        for x in view_b.iter_mut() {
            *x += normal.sample(&mut sampler.rng);
        }
        for x in view_c.iter_mut() {
            *x += normal.sample(&mut sampler.rng);
        }
    }
    Ok(Batch {
        indices,
        labels,
        batch_class_counts,
        view_a,
        view_b,
        view_c,
    })
}

/// Serializes a dataset in the `longtail-v1` text format.
pub fn format_dataset(dataset: &Dataset) -> String {
    let mut out = String::new();
    writeln!(
        out,
        "{DATASET_MAGIC} L={} D={}",
        dataset.num_classes(),
        dataset.input_dim()
    )
    .unwrap();
    for (row, &y) in dataset.features().outer_iter().zip(dataset.labels()) {
        write!(out, "{y}").unwrap();
        for v in row {
            // `Display` for f64 is the shortest representation that round-trips.
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, format_dataset(dataset)).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text, &path.display().to_string())
}

/// Parses `longtail-v1` text; `source` names the input in error messages.
pub fn parse_dataset(text: &str, source: &str) -> Result<Dataset> {
    let err = |line: usize, reason: String| Error::Parse {
        path: source.to_string(),
        line,
        reason,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| err(1, "empty file, expected header".into()))?;
    let (num_classes, dim) = parse_header(header).map_err(|r| err(1, r))?;

    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_ascii_whitespace();
        let label: usize = fields
            .next()
            .unwrap()
            .parse()
            .map_err(|e| err(lineno, format!("bad label: {e}")))?;
        if label >= num_classes {
            return Err(err(
                lineno,
                format!("label {label} out of range for L={num_classes}"),
            ));
        }
        let start = values.len();
        for f in fields {
            let v: f64 = f
                .parse()
                .map_err(|e| err(lineno, format!("bad feature `{f}`: {e}")))?;
            if !v.is_finite() {
                return Err(err(lineno, format!("non-finite feature `{f}`")));
            }
            values.push(v);
        }
        if values.len() - start != dim {
            return Err(err(
                lineno,
                format!("expected {dim} features, found {}", values.len() - start),
            ));
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(err(1, "header present but no instances".into()));
    }
    let features = Array2::from_shape_vec((labels.len(), dim), values)
        .expect("row lengths checked while parsing");
    Dataset::new(features, labels, num_classes).map_err(|e| err(0, e.to_string()))
}

fn parse_header(header: &str) -> std::result::Result<(usize, usize), String> {
    let mut parts = header.split_ascii_whitespace();
    if parts.next() != Some(DATASET_MAGIC) {
        return Err(format!("expected `{DATASET_MAGIC}` header, got `{header}`"));
    }
    let mut field = |key: &str| -> std::result::Result<usize, String> {
        let part = parts.next().ok_or_else(|| format!("missing {key}= field"))?;
        part.strip_prefix(key)
            .and_then(|s| s.strip_prefix('='))
            .ok_or_else(|| format!("expected {key}=<int>, got `{part}`"))?
            .parse()
            .map_err(|e| format!("bad {key}: {e}"))
    };
    let l = field("L")?;
    let d = field("D")?;
    if parts.next().is_some() {
        return Err("trailing tokens in header".into());
    }
    if l == 0 || d == 0 {
        return Err("L and D must be positive".into());
    }
    Ok((l, d))
}
