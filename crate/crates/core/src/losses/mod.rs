//! Classification and contrastive losses with hand-derived gradients.
//!
//! | Function | Role |
//! |---|---|
//! | [`ce_loss`] | plain softmax cross-entropy |
//! | [`balanced_softmax_loss`] | cross-entropy on logits shifted by `log n_y` |
//! | [`logit_adjusted_loss`] | cross-entropy on logits shifted by `tau * log pi_y` |
//! | [`scl_loss`] | supervised contrastive loss |
//! | [`rcl_loss`] | frequency-rebalanced supervised contrastive loss |
//! | [`rcl_pairwise_margin_form`] | the same loss written with explicit pairwise margins |
//! | [`bcl_loss`] | class-averaged contrastive loss with prototypes |
//! | [`bcl_rcl_loss`] | class-averaged, rebalanced, feature-compressed contrastive loss |
//!
//! Everything runs in `f64`; log-sum-exp is always evaluated with max subtraction.

mod classifier;
mod contrastive;
mod margin;

pub use classifier::{
    balanced_softmax_loss, ce_loss, classifier_batch_loss, logit_adjusted_loss, softmax,
};
pub use contrastive::{
    bcl_loss, bcl_rcl_loss, compress_features, contrastive_loss, normalize_rows, rcl_loss, scl_loss,
    CompressionMap, ContrastiveOutput, ContrastiveParams, EmbeddingBatch, Prototypes,
    UNIT_NORM_TOL,
};
pub use margin::rcl_pairwise_margin_form;

use crate::error::{Error, Result};

/// `log(sum(exp(v)))`, computed as `max + ln_1p(sum of the other shifted terms)`.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::invalid("v", "log_sum_exp of an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("v", "non-finite entry"));
    }
    Ok(lse(v))
}

/// Unchecked log-sum-exp for internal hot loops. `v` must be non-empty.
pub(crate) fn lse(v: &[f64]) -> f64 {
    let (arg, max) = v
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(ai, am), (i, x)| {
            if x > am {
                (i, x)
            } else {
                (ai, am)
            }
        });
    if max == f64::NEG_INFINITY {
        return max;
    }
    let rest: f64 = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, &x)| (x - max).exp())
        .sum();
    max + rest.ln_1p()
}

/// Classifier-branch loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierLoss {
    CrossEntropy,
    BalancedSoftmax,
    LogitAdjusted,
}

/// Contrastive-branch loss family. `None` disables the branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveLoss {
    None,
    Scl,
    Bcl,
    Rcl,
    BclRcl,
}

impl ContrastiveLoss {
    pub fn uses_prototypes(self) -> bool {
        matches!(self, ContrastiveLoss::Bcl | ContrastiveLoss::BclRcl)
    }

    pub fn rebalanced(self) -> bool {
        matches!(self, ContrastiveLoss::Rcl | ContrastiveLoss::BclRcl)
    }
}

/// Everything needed to evaluate the two-branch objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub classifier: ClassifierLoss,
    pub contrastive: ContrastiveLoss,
    /// Logit-adjustment strength.
    pub tau_logit: f64,
    /// Class priors for logit adjustment; a probability simplex.
    pub priors: Vec<f64>,
    /// Training-set class counts `n_y`, used by balanced softmax and the rebalanced losses.
    pub class_counts: Vec<usize>,
    pub temperature: f64,
    /// Weight on the classifier loss.
    pub alpha: f64,
    /// Weight on the contrastive loss.
    pub beta: f64,
    /// Divide each anchor's sum by `|B_y|` instead of by its number of positives.
    pub strict_normalizer: bool,
}

impl LossConfig {
    pub const DEFAULT_ALPHA: f64 = 2.0;
    pub const DEFAULT_BETA: f64 = 1.0;
    pub const DEFAULT_TEMPERATURE: f64 = 0.1;

    /// Defaults for the given training counts: priors `n / sum(n)`, `tau = 1`.
    pub fn for_counts(
        classifier: ClassifierLoss,
        contrastive: ContrastiveLoss,
        class_counts: &[usize],
    ) -> Self {
        let total: usize = class_counts.iter().sum();
        Self {
            classifier,
            contrastive,
            tau_logit: 1.0,
            priors: class_counts
                .iter()
                .map(|&n| n as f64 / total as f64)
                .collect(),
            class_counts: class_counts.to_vec(),
            temperature: Self::DEFAULT_TEMPERATURE,
            alpha: Self::DEFAULT_ALPHA,
            beta: Self::DEFAULT_BETA,
            strict_normalizer: false,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.class_counts.len();
        if l == 0 {
            return Err(Error::invalid("class_counts", "empty"));
        }
        if self.priors.len() != l {
            return Err(Error::invalid(
                "priors",
                format!("expected {l} priors, got {}", self.priors.len()),
            ));
        }
        if self.class_counts.contains(&0) {
            return Err(Error::invalid("class_counts", "every count must be >= 1"));
        }
        if self.priors.iter().any(|&p| !(p.is_finite() && p > 0.0)) {
            return Err(Error::invalid("priors", "every prior must be > 0"));
        }
        let sum: f64 = self.priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("priors", format!("sum to {sum}, not 1")));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("temperature", "must be > 0"));
        }
        if !(self.tau_logit.is_finite() && self.tau_logit >= 0.0) {
            return Err(Error::invalid("tau_logit", "must be >= 0"));
        }
        if !(self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::invalid("alpha/beta", "must be finite"));
        }
        Ok(())
    }
}

/// `alpha * classifier_loss + beta * contrastive_loss`.
pub fn total_loss(classifier_loss: f64, contrastive_loss: f64, config: &LossConfig) -> f64 {
    config.alpha * classifier_loss + config.beta * contrastive_loss
}
