//! Deterministic training loop with the mid-training compression schedule.

use super::{backward, predict, sgd_step, ModelParams, ModelShape, SgdState};
use crate::data::{sample_batch, BatchSampler, Dataset};
use crate::error::{Error, Result};
use crate::losses::{CompressionMap, LossConfig};
use crate::metrics::{arithmetic_mean_acc, harmonic_mean_acc, per_class_accuracy};

/// When and how per-class compression factors are switched on.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompressionConfig {
    pub enabled: bool,
    /// Fraction of the total epochs after which validation accuracy is read.
    pub trigger_epoch_fraction: f64,
    pub accuracy_threshold: f64,
    pub low_factor: f64,
    /// Give `low_factor` to the classes *below* the threshold instead of above it.
    pub compress_underperformers: bool,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            trigger_epoch_fraction: 0.5,
            accuracy_threshold: 0.2,
            low_factor: 0.005,
            compress_underperformers: false,
        }
    }
}

impl CompressionConfig {
    pub fn trigger_epoch(&self, total_epochs: usize) -> usize {
        (total_epochs as f64 * self.trigger_epoch_fraction).floor() as usize
    }
}

/// Compression factors for `epoch`: all ones before the trigger epoch, then a
/// two-valued map built from the per-class validation accuracy.
///
/// By default classes under the threshold keep factor 1 and every other class
/// gets `low_factor`; `compress_underperformers` flips that.
pub fn compression_schedule(
    epoch: usize,
    total_epochs: usize,
    val_per_class_accuracy: &[f64],
    cfg: &CompressionConfig,
) -> CompressionMap {
    let l = val_per_class_accuracy.len();
    if !cfg.enabled || epoch < cfg.trigger_epoch(total_epochs) {
        return CompressionMap::identity(l);
    }
    let factors = val_per_class_accuracy
        .iter()
        .map(|&acc| {
            let below = acc < cfg.accuracy_threshold;
            if below == cfg.compress_underperformers {
                cfg.low_factor
            } else {
                1.0
            }
        })
        .collect();
    CompressionMap::new(factors).expect("low_factor validated with the train config")
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Gaussian jitter applied to the two contrastive views.
    pub jitter_sigma: f64,
    pub hidden: usize,
    pub feat_dim: usize,
    pub embed_dim: usize,
    pub loss_config: LossConfig,
    pub compression: CompressionConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if !(self.jitter_sigma.is_finite() && self.jitter_sigma >= 0.0) {
            return Err(Error::invalid("jitter_sigma", "must be >= 0"));
        }
        let c = &self.compression;
        if !(c.trigger_epoch_fraction > 0.0 && c.trigger_epoch_fraction < 1.0) {
            return Err(Error::invalid("trigger_epoch_fraction", "must be in (0, 1)"));
        }
        if !(c.low_factor.is_finite() && c.low_factor > 0.0) {
            return Err(Error::invalid("low_factor", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&c.accuracy_threshold) {
            return Err(Error::invalid("accuracy_threshold", "must be in [0, 1]"));
        }
        self.loss_config.validate()
    }

    pub fn model_shape(&self, input_dim: usize) -> ModelShape {
        ModelShape {
            input_dim,
            hidden: self.hidden,
            feat_dim: self.feat_dim,
            embed_dim: self.embed_dim,
            num_classes: self.loss_config.num_classes(),
        }
    }
}

/// Per-epoch summary; losses are means over the epoch's steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub classifier_loss: f64,
    pub contrastive_loss: f64,
    pub val_arithmetic: f64,
    pub val_harmonic: f64,
    pub compression: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "epoch\ttotal_loss\tclassifier_loss\tcontrastive_loss\tval_arithmetic\tval_harmonic\tcompression\n",
        );
        for r in &self.records {
            let factors: Vec<String> = r.compression.iter().map(|f| format!("{f:e}")).collect();
            out.push_str(&format!(
                "{}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{}\n",
                r.epoch,
                r.total_loss,
                r.classifier_loss,
                r.contrastive_loss,
                r.val_arithmetic,
                r.val_harmonic,
                factors.join(",")
            ));
        }
        out
    }
}

/// Per-class accuracy of `params` on `dataset`.
pub fn evaluate_accuracy(params: &ModelParams, dataset: &Dataset) -> Result<Vec<f64>> {
    let preds = predict(params, dataset.features().view())?;
    per_class_accuracy(&preds, dataset.labels(), dataset.num_classes())
}

/// Resumable training state over a fixed pair of datasets.
pub struct Trainer<'a> {
    pub(super) train: &'a Dataset,
    pub(super) val: &'a Dataset,
    pub(super) config: TrainConfig,
    pub(super) params: ModelParams,
    pub(super) optimizer: SgdState,
    pub(super) sampler: BatchSampler,
    pub(super) epoch: usize,
    /// Frozen once the trigger epoch is reached.
    pub(super) compression: Option<CompressionMap>,
    pub(super) history: TrainHistory,
}

impl<'a> Trainer<'a> {
    pub fn new(train: &'a Dataset, val: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let l = config.loss_config.num_classes();
        if train.num_classes() != l || val.num_classes() != l {
            return Err(Error::invalid(
                "datasets",
                format!(
                    "class counts differ: train {}, val {}, loss config {l}",
                    train.num_classes(),
                    val.num_classes()
                ),
            ));
        }
        if train.input_dim() != val.input_dim() {
            return Err(Error::invalid(
                "datasets",
                "train and validation input dimensions differ",
            ));
        }
        let params = ModelParams::init(config.model_shape(train.input_dim()), config.seed)?;
        Ok(Self {
            train,
            val,
            optimizer: SgdState::new(&params),
            sampler: BatchSampler::with_stream(config.seed, 1),
            params,
            config,
            epoch: 0,
            compression: None,
            history: TrainHistory::default(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn compression(&self) -> CompressionMap {
        self.compression
            .clone()
            .unwrap_or_else(|| CompressionMap::identity(self.config.loss_config.num_classes()))
    }

    /// Runs one epoch of `ceil(N / batch_size)` steps and records it.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        let cfg = &self.config;
        if self.compression.is_none()
            && cfg.compression.enabled
            && self.epoch >= cfg.compression.trigger_epoch(cfg.epochs)
        {
            let acc = evaluate_accuracy(&self.params, self.val)?;
            self.compression = Some(compression_schedule(
                self.epoch,
                cfg.epochs,
                &acc,
                &cfg.compression,
            ));
        }
        let map = self.compression();

        let n = self.train.len();
        let batch_size = cfg.batch_size.min(n);
        let steps = n.div_ceil(batch_size);
        let (mut total, mut cls, mut con) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let batch = sample_batch(self.train, batch_size, &mut self.sampler, cfg.jitter_sigma)?;
            let (loss, grads) = backward(&self.params, &batch, &cfg.loss_config, &map)?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence {
                    epoch: self.epoch,
                    step,
                    loss: loss.total,
                });
            }
            sgd_step(
                &mut self.params,
                &grads,
                &mut self.optimizer,
                cfg.learning_rate,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            if !self.params.is_finite() {
                return Err(Error::Divergence {
                    epoch: self.epoch,
                    step,
                    loss: f64::NAN,
                });
            }
            total += loss.total;
            cls += loss.classifier;
            con += loss.contrastive;
        }

        let acc = evaluate_accuracy(&self.params, self.val)?;
        let s = steps as f64;
        self.history.records.push(EpochRecord {
            epoch: self.epoch,
            total_loss: total / s,
            classifier_loss: cls / s,
            contrastive_loss: con / s,
            val_arithmetic: arithmetic_mean_acc(&acc),
            val_harmonic: harmonic_mean_acc(&acc),
            compression: map.factors().to_vec(),
        });
        self.epoch += 1;
        Ok(self.history.records.last().unwrap())
    }

    pub fn run_to_end(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn into_parts(self) -> (ModelParams, TrainHistory) {
        (self.params, self.history)
    }
}

/// Trains from a seeded initialization for `config.epochs` epochs.
pub fn train(
    dataset: &Dataset,
    val_dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    let mut trainer = Trainer::new(dataset, val_dataset, config.clone())?;
    trainer.run_to_end()?;
    Ok(trainer.into_parts())
}
