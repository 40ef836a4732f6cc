//! Experiment configuration: a sectioned `key = value` (TOML) file in which
//! unknown keys are errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{make_longtail_counts, GaussianMixture, LongTailProfile};
use crate::error::{Error, Result};
use crate::losses::{ClassifierLoss, ContrastiveLoss, LossConfig};
use crate::model::{CompressionConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub max_count: usize,
    pub imbalance_factor: f64,
    pub input_dim: usize,
    /// Distance between neighbouring class centers.
    pub center_scale: f64,
    pub noise_sigma: f64,
    /// Base seed; run seed `s` uses `seed + s`.
    pub seed: u64,
    /// Instances per class in the balanced test split.
    pub test_per_class: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            max_count: 1000,
            imbalance_factor: 100.0,
            input_dim: 2,
            center_scale: 1.5,
            noise_sigma: 1.0,
            seed: 0,
            test_per_class: 400,
        }
    }
}

impl DatasetConfig {
    pub fn profile(&self) -> LongTailProfile {
        LongTailProfile {
            num_classes: self.num_classes,
            max_count: self.max_count,
            imbalance_factor: self.imbalance_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub jitter_sigma: f64,
    pub hidden: usize,
    pub feat_dim: usize,
    pub embed_dim: usize,
    /// Classifier loss used by the `LC` term.
    pub classifier: ClassifierLoss,
    pub tau_logit: f64,
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            jitter_sigma: 0.1,
            hidden: 64,
            feat_dim: 32,
            embed_dim: 16,
            classifier: ClassifierLoss::LogitAdjusted,
            tau_logit: 1.0,
            temperature: LossConfig::DEFAULT_TEMPERATURE,
            alpha: LossConfig::DEFAULT_ALPHA,
            beta: LossConfig::DEFAULT_BETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub combinations: Vec<Combination>,
    /// First repeat seed.
    pub first_seed: u64,
    /// Number of repeat seeds.
    pub repeats: usize,
    pub out_dir: PathBuf,
    /// Literal `1/|B_y|` normalizer and compression of the under-threshold classes.
    pub strict_paper: bool,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            combinations: Combination::TABLE.to_vec(),
            first_seed: 0,
            repeats: 5,
            out_dir: PathBuf::from("runs"),
            strict_paper: false,
        }
    }
}

impl ExperimentSection {
    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.repeats as u64).map(move |i| self.first_seed + i)
    }
}

/// Whole experiment description.
///
/// `compression.enabled` switches feature compression on for the
/// combinations that include `RCL`; it is never applied to the others.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainSection,
    pub compression: CompressionConfig,
    pub experiment: ExperimentSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.combinations.is_empty() {
            return Err(Error::Config("at least one combination is required".into()));
        }
        if e.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        make_longtail_counts(&self.dataset.profile())
            .map_err(|err| Error::Config(err.to_string()))?;
        if self.dataset.test_per_class == 0 {
            return Err(Error::Config("test_per_class must be >= 1".into()));
        }
        GaussianMixture::new(
            self.dataset.num_classes,
            self.dataset.input_dim,
            self.dataset.center_scale,
            self.dataset.noise_sigma,
            0,
        )
        .map_err(|err| Error::Config(err.to_string()))?;
        for c in &e.combinations {
            self.train_config(*c, e.first_seed, &vec![1; self.dataset.num_classes])
                .validate()
                .map_err(|err| Error::Config(format!("{c}: {err}")))?;
        }
        Ok(())
    }

    /// Training configuration for one `(combination, seed)` cell.
    pub fn train_config(&self, combo: Combination, seed: u64, class_counts: &[usize]) -> TrainConfig {
        let t = &self.train;
        let mut loss_config =
            LossConfig::for_counts(t.classifier, combo.contrastive(), class_counts);
        loss_config.tau_logit = t.tau_logit;
        loss_config.temperature = t.temperature;
        loss_config.alpha = t.alpha;
        loss_config.beta = if combo.contrastive() == ContrastiveLoss::None {
            0.0
        } else {
            t.beta
        };
        loss_config.strict_normalizer = self.experiment.strict_paper;
        let mut compression = self.compression;
        compression.enabled &= combo.rcl;
        compression.compress_underperformers |= self.experiment.strict_paper;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            seed,
            jitter_sigma: t.jitter_sigma,
            hidden: t.hidden,
            feat_dim: t.feat_dim,
            embed_dim: t.embed_dim,
            loss_config,
            compression,
        }
    }

    /// Config that reruns exactly one cell.
    pub fn snapshot_for(&self, combo: Combination, seed: u64) -> Self {
        let mut snap = self.clone();
        snap.experiment.combinations = vec![combo];
        snap.experiment.first_seed = seed;
        snap.experiment.repeats = 1;
        snap
    }
}

/// A row of the ablation table: the classifier term plus any of SCL/BCL/RCL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Combination {
    pub scl: bool,
    pub bcl: bool,
    pub rcl: bool,
}

impl Combination {
    pub const LC: Self = Self::new(false, false, false);
    pub const LC_SCL: Self = Self::new(true, false, false);
    pub const LC_SCL_BCL: Self = Self::new(true, true, false);
    pub const LC_SCL_RCL: Self = Self::new(true, false, true);
    pub const LC_SCL_BCL_RCL: Self = Self::new(true, true, true);

    /// The five rows of the standard ablation table.
    pub const TABLE: [Self; 5] = [
        Self::LC,
        Self::LC_SCL,
        Self::LC_SCL_BCL,
        Self::LC_SCL_RCL,
        Self::LC_SCL_BCL_RCL,
    ];

    pub const fn new(scl: bool, bcl: bool, rcl: bool) -> Self {
        Self { scl, bcl, rcl }
    }

    /// Contrastive loss selected by this row.
    pub fn contrastive(self) -> ContrastiveLoss {
        match (self.scl || self.bcl || self.rcl, self.bcl, self.rcl) {
            (false, _, _) => ContrastiveLoss::None,
            (true, true, true) => ContrastiveLoss::BclRcl,
            (true, true, false) => ContrastiveLoss::Bcl,
            (true, false, true) => ContrastiveLoss::Rcl,
            (true, false, false) => ContrastiveLoss::Scl,
        }
    }
}

impl fmt::Display for Combination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("LC")?;
        for (on, name) in [(self.scl, "SCL"), (self.bcl, "BCL"), (self.rcl, "RCL")] {
            if on {
                write!(f, "+{name}")?;
            }
        }
        Ok(())
    }
}

impl FromStr for Combination {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut combo = Combination::LC;
        let mut saw_lc = false;
        for tok in s.split('+').map(str::trim) {
            let slot = match tok.to_ascii_uppercase().as_str() {
                "LC" => &mut saw_lc,
                "SCL" => &mut combo.scl,
                "BCL" => &mut combo.bcl,
                "RCL" => &mut combo.rcl,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown term `{tok}` in combination `{s}` (expected LC, SCL, BCL, RCL)"
                    )))
                }
            };
            if *slot {
                return Err(Error::Config(format!("term `{tok}` repeated in `{s}`")));
            }
            *slot = true;
        }
        if !saw_lc {
            return Err(Error::Config(format!(
                "combination `{s}` must include the LC classifier term"
            )));
        }
        Ok(combo)
    }
}

impl Serialize for Combination {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Combination {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
