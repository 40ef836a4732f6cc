//! Single runs, the ablation grid, and embedding comparisons.
//!
//! A run directory holds exactly five files:
//!
//! | file | content |
//! |---|---|
//! | `config.toml` | config snapshot that reruns this cell |
//! | `metrics.txt` | [`MetricsReport`] as `key = value` lines |
//! | `history.tsv` | per-epoch losses and validation accuracy |
//! | `checkpoint.txt` | final trainer state |
//! | `embeddings.txt` | test-set contrastive embeddings, `<label> <z_1> ... <z_K>` |

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;

use super::config::{Combination, ExperimentConfig};
use crate::data::{make_longtail_counts, Dataset, GaussianMixture};
use crate::error::{Error, Result};
use crate::metrics::{calinski_harabasz, davies_bouldin, MetricsReport};
use crate::model::{forward, predict, save_checkpoint, ModelParams, TrainHistory, Trainer};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.txt";
pub const HISTORY_FILE: &str = "history.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";

/// Data split ids within one mixture.
const SPLIT_TRAIN: u64 = 0;
const SPLIT_VAL: u64 = 1;
const SPLIT_TEST: u64 = 2;

/// Train (long-tail), validation (same profile) and balanced test splits.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Generates the three splits for run seed `seed`.
pub fn make_splits(config: &ExperimentConfig, seed: u64) -> Result<Splits> {
    let d = &config.dataset;
    let counts = make_longtail_counts(&d.profile())?;
    let mixture = GaussianMixture::new(
        d.num_classes,
        d.input_dim,
        d.center_scale,
        d.noise_sigma,
        d.seed.wrapping_add(seed),
    )?;
    Ok(Splits {
        train: mixture.sample(&counts, SPLIT_TRAIN)?,
        val: mixture.sample(&counts, SPLIT_VAL)?,
        test: mixture.sample(&vec![d.test_per_class; d.num_classes], SPLIT_TEST)?,
    })
}

/// Directory of one `(combination, seed)` cell under `root`.
pub fn run_dir(root: &Path, combo: Combination, seed: u64) -> PathBuf {
    root.join(combo.to_string()).join(format!("seed-{seed}"))
}

/// Creates `dir`, refusing a pre-existing one unless `overwrite`.
pub fn prepare_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        if !overwrite {
            return Err(Error::Exists(dir.to_path_buf()));
        }
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub combination: Combination,
    pub seed: u64,
    pub dir: PathBuf,
    pub metrics: MetricsReport,
    pub history: TrainHistory,
    pub params: ModelParams,
    /// Test-set contrastive embeddings, row-aligned with `labels`.
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
    pub seconds: f64,
}

/// Metrics of `params` on `dataset`: accuracy from the classifier head,
/// cluster indices and margins from the contrastive embeddings.
pub fn evaluate(params: &ModelParams, dataset: &Dataset) -> Result<(MetricsReport, Array2<f64>)> {
    let preds = predict(params, dataset.features().view())?;
    let out = forward(params, dataset.features().view())?;
    let report = MetricsReport::evaluate(
        &preds,
        dataset.labels(),
        out.embeddings.view(),
        dataset.num_classes(),
    )?;
    Ok((report, out.embeddings))
}

/// Generates data, trains one cell, evaluates on the balanced test split and
/// writes the run directory under `root`.
pub fn run_single(
    config: &ExperimentConfig,
    combo: Combination,
    seed: u64,
    root: &Path,
    overwrite: bool,
) -> Result<RunOutput> {
    let label = format!("{combo}/seed-{seed}");
    let wrap = |e: Error| Error::Run {
        run: label.clone(),
        source: Box::new(e),
    };
    let started = Instant::now();
    let dir = run_dir(root, combo, seed);
    prepare_dir(&dir, overwrite)?;

    let splits = make_splits(config, seed).map_err(wrap)?;
    let train_cfg = config.train_config(combo, seed, splits.train.class_counts());
    let mut trainer = Trainer::new(&splits.train, &splits.val, train_cfg).map_err(wrap)?;
    trainer.run_to_end().map_err(wrap)?;
    let ckpt = trainer.checkpoint();
    let (params, history) = trainer.into_parts();
    let (metrics, embeddings) = evaluate(&params, &splits.test).map_err(wrap)?;

    write(&dir.join(CONFIG_FILE), &config.snapshot_for(combo, seed).to_toml())?;
    write(&dir.join(METRICS_FILE), &metrics.to_text())?;
    write(&dir.join(HISTORY_FILE), &history.to_tsv())?;
    save_checkpoint(&ckpt, &dir.join(CHECKPOINT_FILE))?;
    write_embeddings(&embeddings, splits.test.labels(), &dir.join(EMBEDDINGS_FILE))?;

    Ok(RunOutput {
        combination: combo,
        seed,
        dir,
        metrics,
        history,
        params,
        embeddings,
        labels: splits.test.labels().to_vec(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

fn format_embeddings(embeddings: &Array2<f64>, labels: &[usize]) -> String {
    let mut out = String::new();
    for (row, y) in embeddings.outer_iter().zip(labels) {
        write!(out, "{y}").unwrap();
        for v in row {
            write!(out, " {v}").unwrap();
        }
        out.push('\n');
    }
    out
}

fn write_embeddings(embeddings: &Array2<f64>, labels: &[usize], path: &Path) -> Result<()> {
    write(path, &format_embeddings(embeddings, labels))
}

/// Writes the contrastive embeddings of every row of `dataset`, one line per instance.
pub fn export_embeddings(params: &ModelParams, dataset: &Dataset, path: &Path) -> Result<()> {
    let out = forward(params, dataset.features().view())?;
    write_embeddings(&out.embeddings, dataset.labels(), path)
}

/// Reads an embedding dump back as `(labels, matrix)`.
pub fn read_embeddings(path: &Path) -> Result<(Vec<usize>, Array2<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let err = |line: usize, reason: String| Error::Parse {
        path: path.display().to_string(),
        line,
        reason,
    };
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut fields = line.split_ascii_whitespace();
        let y: usize = fields
            .next()
            .unwrap()
            .parse()
            .map_err(|e| err(i + 1, format!("bad label: {e}")))?;
        let start = values.len();
        for f in fields {
            values.push(
                f.parse::<f64>()
                    .map_err(|e| err(i + 1, format!("bad value `{f}`: {e}")))?,
            );
        }
        let w = values.len() - start;
        if *width.get_or_insert(w) != w || w == 0 {
            return Err(err(i + 1, format!("row has {w} values")));
        }
        labels.push(y);
    }
    let w = width.ok_or_else(|| err(1, "empty embedding file".into()))?;
    let m = Array2::from_shape_vec((labels.len(), w), values).expect("widths checked");
    Ok((labels, m))
}

/// Cluster-quality comparison of two runs; deltas are `b - a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comparison {
    pub chi_a: f64,
    pub chi_b: f64,
    pub dbi_a: f64,
    pub dbi_b: f64,
    pub delta_chi: f64,
    pub delta_dbi: f64,
}

impl Comparison {
    pub fn from_values(chi_a: f64, dbi_a: f64, chi_b: f64, dbi_b: f64) -> Self {
        Self {
            chi_a,
            chi_b,
            dbi_a,
            dbi_b,
            delta_chi: chi_b - chi_a,
            delta_dbi: dbi_b - dbi_a,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "chi_a = {:.17e}\nchi_b = {:.17e}\ndelta_chi = {:.17e}\ndbi_a = {:.17e}\ndbi_b = {:.17e}\ndelta_dbi = {:.17e}\n",
            self.chi_a, self.chi_b, self.delta_chi, self.dbi_a, self.dbi_b, self.delta_dbi
        )
    }
}

fn indices_of(run: &Path) -> Result<(f64, f64)> {
    let path = run.join(EMBEDDINGS_FILE);
    if !path.is_file() {
        return Err(Error::MissingArtifact {
            run: run.display().to_string(),
            path,
        });
    }
    let (labels, z) = read_embeddings(&path)?;
    Ok((
        calinski_harabasz(z.view(), &labels)?,
        davies_bouldin(z.view(), &labels)?,
    ))
}

/// CHI/DBI of both runs' embedding dumps and their signed differences.
pub fn compare_embeddings(run_a: &Path, run_b: &Path) -> Result<Comparison> {
    let (chi_a, dbi_a) = indices_of(run_a)?;
    let (chi_b, dbi_b) = indices_of(run_b)?;
    Ok(Comparison::from_values(chi_a, dbi_a, chi_b, dbi_b))
}

/// One `(combination, seed)` cell of the ablation grid.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub combination: Combination,
    pub seed: u64,
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    pub metrics: MetricsReport,
    pub seconds: f64,
}

/// Median (mean of the middle pair for even counts); `None` when empty.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Medians across seeds of one combination's successful cells.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowMedians {
    pub arithmetic: Option<f64>,
    pub harmonic: Option<f64>,
    pub chi: Option<f64>,
    pub dbi: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub combinations: Vec<Combination>,
    pub seeds: Vec<u64>,
    /// Combination-major, seed-minor.
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, combo: Combination, seed: u64) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.combination == combo && c.seed == seed)
    }

    pub fn medians(&self, combo: Combination) -> RowMedians {
        let ok: Vec<&MetricsReport> = self
            .cells
            .iter()
            .filter(|c| c.combination == combo)
            .filter_map(|c| c.outcome.as_ref().ok().map(|m| &m.metrics))
            .collect();
        let col = |f: &dyn Fn(&MetricsReport) -> Option<f64>| {
            median(&ok.iter().filter_map(|m| f(m)).collect::<Vec<_>>())
        };
        RowMedians {
            arithmetic: col(&|m| Some(m.arithmetic_mean)),
            harmonic: col(&|m| Some(m.harmonic_mean)),
            chi: col(&|m| m.chi),
            dbi: col(&|m| m.dbi),
        }
    }

    /// Per-combination medians (the ablation table), one row per combination.
    pub fn table_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let mut out = format!(
            "{:<18} {:>10} {:>10} {:>12} {:>8}\n",
            "combination", "arith", "harmonic", "chi", "dbi"
        );
        for &c in &self.combinations {
            let m = self.medians(c);
            writeln!(
                out,
                "{:<18} {:>10} {:>10} {:>12} {:>8}",
                c.to_string(),
                fmt(m.arithmetic.map(|v| 100.0 * v)),
                fmt(m.harmonic.map(|v| 100.0 * v)),
                fmt(m.chi),
                fmt(m.dbi)
            )
            .unwrap();
        }
        out
    }

    /// One line per cell plus one median line per combination, tab-separated.
    pub fn to_tsv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |v| format!("{v:.17e}"));
        let mut out =
            String::from("combination\tseed\tarithmetic\tharmonic\tchi\tdbi\tseconds\terror\n");
        for c in &self.cells {
            match &c.outcome {
                Ok(m) => writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\t{:.3}\t",
                    c.combination,
                    c.seed,
                    fmt(Some(m.metrics.arithmetic_mean)),
                    fmt(Some(m.metrics.harmonic_mean)),
                    fmt(m.metrics.chi),
                    fmt(m.metrics.dbi),
                    m.seconds
                ),
                Err(e) => writeln!(
                    out,
                    "{}\t{}\tnone\tnone\tnone\tnone\tnone\t{}",
                    c.combination,
                    c.seed,
                    e.replace(['\t', '\n'], " ")
                ),
            }
            .unwrap();
        }
        for &c in &self.combinations {
            let m = self.medians(c);
            writeln!(
                out,
                "{c}\tmedian\t{}\t{}\t{}\t{}\tnone\t",
                fmt(m.arithmetic),
                fmt(m.harmonic),
                fmt(m.chi),
                fmt(m.dbi)
            )
            .unwrap();
        }
        out
    }

    /// Rebuilds the grid from the `metrics.txt` files under `root`.
    pub fn from_artifacts(root: &Path, combinations: &[Combination], seeds: &[u64]) -> Result<Self> {
        let mut cells = Vec::new();
        for &combo in combinations {
            for &seed in seeds {
                let path = run_dir(root, combo, seed).join(METRICS_FILE);
                let outcome = match std::fs::read_to_string(&path) {
                    Ok(text) => MetricsReport::from_text(&text, &path.display().to_string())
                        .map(|metrics| CellMetrics {
                            metrics,
                            seconds: 0.0,
                        })
                        .map_err(|e| e.to_string()),
                    Err(e) => Err(format!("{}: {e}", path.display())),
                };
                cells.push(AblationCell {
                    combination: combo,
                    seed,
                    outcome,
                });
            }
        }
        Ok(Self {
            combinations: combinations.to_vec(),
            seeds: seeds.to_vec(),
            cells,
        })
    }
}

pub const ABLATION_TABLE_FILE: &str = "ablation.txt";
pub const ABLATION_TSV_FILE: &str = "ablation.tsv";

/// Runs every `(combination, seed)` cell on up to `threads` worker threads,
/// then writes the table and TSV under `root`. Failed cells are recorded, not fatal.
pub fn run_ablation(
    config: &ExperimentConfig,
    root: &Path,
    threads: usize,
    overwrite: bool,
) -> Result<AblationReport> {
    let combinations = config.experiment.combinations.clone();
    let seeds: Vec<u64> = config.experiment.seeds().collect();
    let jobs: Vec<(Combination, u64)> = combinations
        .iter()
        .flat_map(|&c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    // Refuse up front so that no cell is trained only to be rejected afterwards.
    if !overwrite {
        for &(c, s) in &jobs {
            let dir = run_dir(root, c, s);
            if dir.exists() {
                return Err(Error::Exists(dir));
            }
        }
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let cells: Vec<AblationCell> = pool.install(|| {
        jobs.par_iter()
            .map(|&(combination, seed)| AblationCell {
                combination,
                seed,
                outcome: run_single(config, combination, seed, root, overwrite)
                    .map(|r| CellMetrics {
                        metrics: r.metrics,
                        seconds: r.seconds,
                    })
                    .map_err(|e| e.to_string()),
            })
            .collect()
    });
    let report = AblationReport {
        combinations,
        seeds,
        cells,
    };
    write(&root.join(ABLATION_TABLE_FILE), &report.table_text())?;
    write(&root.join(ABLATION_TSV_FILE), &report.to_tsv())?;
    Ok(report)
}
