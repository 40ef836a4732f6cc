//! Classification accuracy summaries and embedding-space cluster quality.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Fraction of correctly predicted instances within each class.
pub fn per_class_accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape {
            context: "per_class_accuracy",
            expected: format!("{} predictions", labels.len()),
            got: format!("{}", predictions.len()),
        });
    }
    let mut correct = vec![0usize; num_classes];
    let mut total = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::invalid("labels", format!("label {y} >= L = {num_classes}")));
        }
        total[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    if let Some(y) = total.iter().position(|&t| t == 0) {
        return Err(Error::invalid(
            "labels",
            format!("class {y} has no instances; its accuracy is undefined"),
        ));
    }
    Ok(correct
        .iter()
        .zip(&total)
        .map(|(&c, &t)| c as f64 / t as f64)
        .collect())
}

pub fn arithmetic_mean_acc(per_class: &[f64]) -> f64 {
    if per_class.is_empty() {
        return 0.0;
    }
    per_class.iter().sum::<f64>() / per_class.len() as f64
}

/// `L / sum(1/a_y)`; zero as soon as any class has zero accuracy.
pub fn harmonic_mean_acc(per_class: &[f64]) -> f64 {
    if per_class.is_empty() || per_class.iter().any(|&a| a <= 0.0) {
        return 0.0;
    }
    per_class.len() as f64 / per_class.iter().map(|a| 1.0 / a).sum::<f64>()
}

struct Clusters {
    centroids: Array2<f64>,
    sizes: Vec<usize>,
    /// Original label of each compacted cluster index.
    classes: Vec<usize>,
    index: Vec<usize>,
}

fn clusters(x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Clusters> {
    if x.nrows() != labels.len() {
        return Err(Error::Shape {
            context: "cluster index",
            expected: format!("{} rows", labels.len()),
            got: format!("{}", x.nrows()),
        });
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let pos = |y: usize| classes.binary_search(&y).unwrap();
    let index: Vec<usize> = labels.iter().map(|&y| pos(y)).collect();
    let k = classes.len();
    let mut centroids = Array2::zeros((k, x.ncols()));
    let mut sizes = vec![0usize; k];
    for (row, &c) in x.outer_iter().zip(&index) {
        let mut dst = centroids.row_mut(c);
        dst += &row;
        sizes[c] += 1;
    }
    for (mut row, &s) in centroids.outer_iter_mut().zip(&sizes) {
        row /= s as f64;
    }
    Ok(Clusters {
        centroids,
        sizes,
        classes,
        index,
    })
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Between-cluster over within-cluster dispersion, each per degree of freedom.
pub fn calinski_harabasz(embeddings: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let c = clusters(embeddings, labels)?;
    let n = labels.len();
    let k = c.sizes.len();
    if k < 2 || n <= k {
        return Err(Error::Degenerate {
            metric: "calinski_harabasz",
            reason: format!("need n > k >= 2, got n = {n}, k = {k}"),
        });
    }
    let global: Array1<f64> = embeddings.mean_axis(ndarray::Axis(0)).unwrap();
    let between: f64 = c
        .centroids
        .outer_iter()
        .zip(&c.sizes)
        .map(|(cy, &ny)| ny as f64 * sq_dist(cy, global.view()))
        .sum();
    let within: f64 = embeddings
        .outer_iter()
        .zip(&c.index)
        .map(|(x, &ci)| sq_dist(x, c.centroids.row(ci)))
        .sum();
    if within == 0.0 {
        return Err(Error::Degenerate {
            metric: "calinski_harabasz",
            reason: "zero within-cluster dispersion".into(),
        });
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Mean over clusters of the worst `(S_y + S_j) / M_yj` ratio.
pub fn davies_bouldin(embeddings: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let c = clusters(embeddings, labels)?;
    let k = c.sizes.len();
    if k < 2 {
        return Err(Error::Degenerate {
            metric: "davies_bouldin",
            reason: format!("need at least 2 clusters, got {k}"),
        });
    }
    let mut scatter = vec![0.0; k];
    for (x, &ci) in embeddings.outer_iter().zip(&c.index) {
        scatter[ci] += sq_dist(x, c.centroids.row(ci)).sqrt();
    }
    for (s, &n) in scatter.iter_mut().zip(&c.sizes) {
        *s /= n as f64;
    }
    let mut total = 0.0;
    for a in 0..k {
        let mut worst = f64::NEG_INFINITY;
        for b in (0..k).filter(|&b| b != a) {
            let m = sq_dist(c.centroids.row(a), c.centroids.row(b)).sqrt();
            if m == 0.0 {
                return Err(Error::Degenerate {
                    metric: "davies_bouldin",
                    reason: format!(
                        "classes {} and {} have coincident centroids",
                        c.classes[a], c.classes[b]
                    ),
                });
            }
            worst = worst.max((scatter[a] + scatter[b]) / m);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Cosine-similarity structure of a set of unit embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginStats {
    /// Mean similarity over same-class pairs; `None` for singleton classes.
    pub intra: Vec<Option<f64>>,
    /// `inter[y][j]`: mean similarity between members of `y` and `j` (`None` on the
    /// diagonal or when either class is absent).
    pub inter: Vec<Vec<Option<f64>>>,
    /// `intra[y] - max_j inter[y][j]`.
    pub margin: Vec<Option<f64>>,
}

pub fn margin_stats(embeddings: ArrayView2<'_, f64>, labels: &[usize], num_classes: usize) -> Result<MarginStats> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::Shape {
            context: "margin_stats",
            expected: format!("{} rows", labels.len()),
            got: format!("{}", embeddings.nrows()),
        });
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::invalid("labels", format!("label {y} >= L = {num_classes}")));
    }
    let gram = embeddings.dot(&embeddings.t());
    let mut sum = vec![vec![0.0; num_classes]; num_classes];
    let mut cnt = vec![vec![0usize; num_classes]; num_classes];
    for i in 0..labels.len() {
        for k in 0..labels.len() {
            if i == k {
                continue;
            }
            sum[labels[i]][labels[k]] += gram[[i, k]];
            cnt[labels[i]][labels[k]] += 1;
        }
    }
    let mean = |y: usize, j: usize| (cnt[y][j] > 0).then(|| sum[y][j] / cnt[y][j] as f64);
    let intra: Vec<Option<f64>> = (0..num_classes).map(|y| mean(y, y)).collect();
    let inter: Vec<Vec<Option<f64>>> = (0..num_classes)
        .map(|y| {
            (0..num_classes)
                .map(|j| if j == y { None } else { mean(y, j) })
                .collect()
        })
        .collect();
    let margin = (0..num_classes)
        .map(|y| {
            let worst = inter[y].iter().flatten().copied().reduce(f64::max)?;
            Some(intra[y]? - worst)
        })
        .collect();
    Ok(MarginStats {
        intra,
        inter,
        margin,
    })
}

/// Evaluation summary for one trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_class_accuracy: Vec<f64>,
    pub arithmetic_mean: f64,
    pub harmonic_mean: f64,
    /// Set when some class has zero accuracy (harmonic mean reported as 0).
    pub harmonic_zero_class: bool,
    /// `None` when the index is degenerate for these embeddings.
    pub chi: Option<f64>,
    pub dbi: Option<f64>,
    pub margins: MarginStats,
}

impl MetricsReport {
    /// Builds a report from predictions and the contrastive embeddings of the same rows.
    pub fn evaluate(
        predictions: &[usize],
        labels: &[usize],
        embeddings: ArrayView2<'_, f64>,
        num_classes: usize,
    ) -> Result<Self> {
        let per_class_accuracy = per_class_accuracy(predictions, labels, num_classes)?;
        let arithmetic_mean = arithmetic_mean_acc(&per_class_accuracy);
        let harmonic_mean = harmonic_mean_acc(&per_class_accuracy);
        Ok(Self {
            harmonic_zero_class: per_class_accuracy.iter().any(|&a| a == 0.0),
            arithmetic_mean,
            harmonic_mean,
            chi: calinski_harabasz(embeddings, labels).ok(),
            dbi: davies_bouldin(embeddings, labels).ok(),
            margins: margin_stats(embeddings, labels, num_classes)?,
            per_class_accuracy,
        })
    }

    /// Flat `key = value` record, one entry per line, keys in a fixed order.
    pub fn to_key_values(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let fmt = |v: f64| format!("{v:.17e}");
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), fmt);
        kv.insert("arithmetic_mean".into(), fmt(self.arithmetic_mean));
        kv.insert("harmonic_mean".into(), fmt(self.harmonic_mean));
        kv.insert(
            "harmonic_zero_class".into(),
            self.harmonic_zero_class.to_string(),
        );
        kv.insert("chi".into(), opt(self.chi));
        kv.insert("dbi".into(), opt(self.dbi));
        kv.insert("num_classes".into(), self.per_class_accuracy.len().to_string());
        for (y, &a) in self.per_class_accuracy.iter().enumerate() {
            kv.insert(format!("acc.{y:04}"), fmt(a));
            kv.insert(format!("intra.{y:04}"), opt(self.margins.intra[y]));
            kv.insert(format!("margin.{y:04}"), opt(self.margins.margin[y]));
            for (j, &v) in self.margins.inter[y].iter().enumerate() {
                if j != y {
                    kv.insert(format!("inter.{y:04}.{j:04}"), opt(v));
                }
            }
        }
        kv
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_key_values() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    /// Parses [`MetricsReport::to_text`] output back.
    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Parse {
            path: source.to_string(),
            line,
            reason,
        };
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| err(i + 1, format!("expected `key = value`, got `{line}`")))?;
            kv.insert(k.to_string(), (i + 1, v.to_string()));
        }
        let get = |k: &str| -> Result<&(usize, String)> {
            kv.get(k).ok_or_else(|| err(0, format!("missing key `{k}`")))
        };
        let num = |k: &str| -> Result<f64> {
            let (line, v) = get(k)?;
            v.parse().map_err(|e| err(*line, format!("bad number for {k}: {e}")))
        };
        let opt = |k: &str| -> Result<Option<f64>> {
            let (line, v) = get(k)?;
            if v == "none" {
                Ok(None)
            } else {
                v.parse()
                    .map(Some)
                    .map_err(|e| err(*line, format!("bad number for {k}: {e}")))
            }
        };
        let l: usize = {
            let (line, v) = get("num_classes")?;
            v.parse().map_err(|e| err(*line, format!("bad num_classes: {e}")))?
        };
        let mut per_class_accuracy = Vec::with_capacity(l);
        let mut intra = Vec::with_capacity(l);
        let mut margin = Vec::with_capacity(l);
        let mut inter = Vec::with_capacity(l);
        for y in 0..l {
            per_class_accuracy.push(num(&format!("acc.{y:04}"))?);
            intra.push(opt(&format!("intra.{y:04}"))?);
            margin.push(opt(&format!("margin.{y:04}"))?);
            let mut row = Vec::with_capacity(l);
            for j in 0..l {
                row.push(if j == y {
                    None
                } else {
                    opt(&format!("inter.{y:04}.{j:04}"))?
                });
            }
            inter.push(row);
        }
        Ok(Self {
            per_class_accuracy,
            arithmetic_mean: num("arithmetic_mean")?,
            harmonic_mean: num("harmonic_mean")?,
            harmonic_zero_class: get("harmonic_zero_class")?.1 == "true",
            chi: opt("chi")?,
            dbi: opt("dbi")?,
            margins: MarginStats {
                intra,
                inter,
                margin,
            },
        })
    }
}
