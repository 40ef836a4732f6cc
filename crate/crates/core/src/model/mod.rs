//! Two-branch network: a shared tanh MLP encoder feeding a linear classifier
//! head and a linear projection head whose outputs are unit-normalized, plus
//! one learnable unit prototype per class.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC};
pub use optim::{sgd_step, SgdState};
pub use train::{
    compression_schedule, evaluate_accuracy, train, CompressionConfig, EpochRecord, TrainConfig,
    TrainHistory, Trainer,
};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::losses::{
    classifier_batch_loss, contrastive_loss, CompressionMap, ContrastiveLoss, ContrastiveParams,
    LossConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

/// `activation(x W^T + b)` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    /// Uniform fan-in initialization in `[-1/sqrt(in), 1/sqrt(in)]`, zero bias.
    fn init(inputs: usize, outputs: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = Array2::from_shape_fn((outputs, inputs), |_| rng.gen_range(-bound..bound));
        Self {
            weight,
            bias: Array1::zeros(outputs),
            activation,
        }
    }

    fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = x.dot(&self.weight.t()) + &self.bias;
        if self.activation == Activation::Tanh {
            out.mapv_inplace(f64::tanh);
        }
        out
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient.
    fn backward(
        &self,
        input: ArrayView2<'_, f64>,
        output: ArrayView2<'_, f64>,
        mut d_out: Array2<f64>,
        grad: &mut Dense,
    ) -> Array2<f64> {
        if self.activation == Activation::Tanh {
            d_out.zip_mut_with(&output, |d, &a| *d *= 1.0 - a * a);
        }
        grad.weight += &d_out.t().dot(&input);
        grad.bias += &d_out.sum_axis(Axis(0));
        d_out.dot(&self.weight)
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Layer widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub feat_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl ModelShape {
    pub const DEFAULT_HIDDEN: usize = 64;
    pub const DEFAULT_FEAT: usize = 32;
    pub const DEFAULT_EMBED: usize = 16;

    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: Self::DEFAULT_HIDDEN,
            feat_dim: Self::DEFAULT_FEAT,
            embed_dim: Self::DEFAULT_EMBED,
            num_classes,
        }
    }

    fn validate(&self) -> Result<()> {
        let ModelShape {
            input_dim,
            hidden,
            feat_dim,
            embed_dim,
            num_classes,
        } = *self;
        if [input_dim, hidden, feat_dim, embed_dim, num_classes].contains(&0) {
            return Err(Error::invalid("model shape", format!("zero width in {self:?}")));
        }
        Ok(())
    }
}

/// All learnable tensors. Also used as the container for their gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Dense>,
    pub classifier: Dense,
    pub projector: Vec<Dense>,
    /// `L x K` class prototypes, unit rows.
    pub prototypes: Array2<f64>,
}

impl ModelParams {
    /// Seeded initialization: uniform fan-in weights, zero biases, random unit prototypes.
    pub fn init(shape: ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = vec![
            Dense::init(shape.input_dim, shape.hidden, Activation::Tanh, &mut rng),
            Dense::init(shape.hidden, shape.feat_dim, Activation::Tanh, &mut rng),
        ];
        let classifier = Dense::init(
            shape.feat_dim,
            shape.num_classes,
            Activation::Identity,
            &mut rng,
        );
        let projector = vec![Dense::init(
            shape.feat_dim,
            shape.embed_dim,
            Activation::Identity,
            &mut rng,
        )];
        let mut prototypes = Array2::from_shape_fn((shape.num_classes, shape.embed_dim), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        crate::losses::normalize_rows(&mut prototypes)?;
        Ok(Self {
            encoder,
            classifier,
            projector,
            prototypes,
        })
    }

    /// Same layout, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let z = |d: &Dense| Dense::zeros(d.weight.ncols(), d.weight.nrows(), d.activation);
        Self {
            encoder: self.encoder.iter().map(z).collect(),
            classifier: z(&self.classifier),
            projector: self.projector.iter().map(z).collect(),
            prototypes: Array2::zeros(self.prototypes.raw_dim()),
        }
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.encoder[0].weight.ncols(),
            hidden: self.encoder[0].weight.nrows(),
            feat_dim: self.classifier.weight.ncols(),
            embed_dim: self.prototypes.ncols(),
            num_classes: self.classifier.weight.nrows(),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder
            .iter()
            .chain(std::iter::once(&self.classifier))
            .chain(&self.projector)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
            .chain(&mut self.projector)
    }

    pub fn num_params(&self) -> usize {
        self.layers().map(Dense::num_params).sum::<usize>() + self.prototypes.len()
    }

    /// Flattens every tensor in a fixed order: encoder, classifier, projector
    /// (weight then bias per layer), then prototypes.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in self.layers() {
            out.extend(layer.weight.iter());
            out.extend(layer.bias.iter());
        }
        out.extend(self.prototypes.iter());
        out
    }

    /// Inverse of [`ModelParams::to_flat`].
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape {
                context: "ModelParams::set_flat",
                expected: format!("{} values", self.num_params()),
                got: format!("{}", flat.len()),
            });
        }
        let mut it = flat.iter().copied();
        for layer in self.layers_mut() {
            layer.weight.iter_mut().for_each(|v| *v = it.next().unwrap());
            layer.bias.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        self.prototypes
            .iter_mut()
            .for_each(|v| *v = it.next().unwrap());
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Network outputs for a set of input rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Array2<f64>,
    /// Unit-normalized projector outputs.
    pub embeddings: Array2<f64>,
    /// Encoder output, the input to both heads.
    pub features: Array2<f64>,
}

struct EncoderTrace {
    activations: Vec<Array2<f64>>,
}

impl EncoderTrace {
    fn output(&self) -> &Array2<f64> {
        self.activations.last().unwrap()
    }
}

fn check_inputs(params: &ModelParams, inputs: ArrayView2<'_, f64>) -> Result<()> {
    let d = params.encoder[0].weight.ncols();
    if inputs.ncols() != d {
        return Err(Error::Shape {
            context: "forward",
            expected: format!("{d} input columns"),
            got: format!("{}", inputs.ncols()),
        });
    }
    Ok(())
}

fn run_layers(layers: &[Dense], inputs: ArrayView2<'_, f64>) -> EncoderTrace {
    let mut activations = vec![inputs.to_owned()];
    for layer in layers {
        let next = layer.forward(activations.last().unwrap().view());
        activations.push(next);
    }
    EncoderTrace { activations }
}

fn backprop_layers(
    layers: &[Dense],
    trace: &EncoderTrace,
    mut d_out: Array2<f64>,
    grads: &mut [Dense],
) -> Array2<f64> {
    for (idx, layer) in layers.iter().enumerate().rev() {
        d_out = layer.backward(
            trace.activations[idx].view(),
            trace.activations[idx + 1].view(),
            d_out,
            &mut grads[idx],
        );
    }
    d_out
}

/// Row-wise `u / |u|`, returning the norms for the backward pass.
fn normalize_with_norms(u: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms: Array1<f64> = u.outer_iter().map(|r| r.dot(&r).sqrt().max(1e-300)).collect();
    let z = u / &norms.view().insert_axis(Axis(1));
    (z, norms)
}

/// `d/du` of `u / |u|` applied to `dz`: `(dz - z (z . dz)) / |u|`.
fn normalize_backward(z: &Array2<f64>, norms: &Array1<f64>, dz: &Array2<f64>) -> Array2<f64> {
    let mut du = dz.clone();
    for ((mut row, zr), &n) in du.outer_iter_mut().zip(z.outer_iter()).zip(norms) {
        let dot = zr.dot(&row);
        row.scaled_add(-dot, &zr);
        row /= n;
    }
    du
}

pub fn forward(params: &ModelParams, inputs: ArrayView2<'_, f64>) -> Result<ForwardOutput> {
    check_inputs(params, inputs)?;
    let enc = run_layers(&params.encoder, inputs);
    let features = enc.output().clone();
    let logits = params.classifier.forward(features.view());
    let proj = run_layers(&params.projector, features.view());
    let (embeddings, _) = normalize_with_norms(proj.output());
    Ok(ForwardOutput {
        logits,
        embeddings,
        features,
    })
}

/// Argmax of the logits per row; ties go to the lower class index.
pub fn predict(params: &ModelParams, inputs: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let out = forward(params, inputs)?;
    Ok(out
        .logits
        .outer_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                .0
        })
        .collect())
}

/// Loss values of one two-branch evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub classifier: f64,
    pub contrastive: f64,
}

/// Contrastive-loss knobs implied by a loss config and the active compression map.
pub(crate) fn contrastive_params<'a>(
    config: &'a LossConfig,
    compression: &'a CompressionMap,
) -> ContrastiveParams<'a> {
    let kind = config.contrastive;
    ContrastiveParams {
        temperature: config.temperature,
        class_counts: kind.rebalanced().then_some(config.class_counts.as_slice()),
        class_averaging: kind.uses_prototypes(),
        compression: (!compression.is_identity()).then_some(compression),
        strict_normalizer: config.strict_normalizer,
    }
}

/// Loss and exact gradients of `alpha * classifier + beta * contrastive`.
///
/// `view_a` feeds the classifier loss; `view_b` and `view_c` are stacked into
/// one contrastive batch of `2 x batch` rows with duplicated labels.
pub fn backward(
    params: &ModelParams,
    batch: &Batch,
    config: &LossConfig,
    compression: &CompressionMap,
) -> Result<(LossBreakdown, ModelParams)> {
    check_inputs(params, batch.view_a.view())?;
    let shape = params.shape();
    if config.num_classes() != shape.num_classes {
        return Err(Error::Shape {
            context: "backward",
            expected: format!("{} classes in loss config", shape.num_classes),
            got: format!("{}", config.num_classes()),
        });
    }
    let mut grads = params.zeros_like();

    // Classifier branch.
    let enc_a = run_layers(&params.encoder, batch.view_a.view());
    let feat_a = enc_a.output();
    let logits = params.classifier.forward(feat_a.view());
    let (cls_loss, mut d_logits) = classifier_batch_loss(logits.view(), &batch.labels, config)?;
    d_logits *= config.alpha;
    let d_feat_a = params
        .classifier
        .backward(feat_a.view(), logits.view(), d_logits, &mut grads.classifier);
    backprop_layers(&params.encoder, &enc_a, d_feat_a, &mut grads.encoder);

    // Contrastive branch.
    let mut con_loss = 0.0;
    if config.contrastive != ContrastiveLoss::None {
        let views = ndarray::concatenate(Axis(0), &[batch.view_b.view(), batch.view_c.view()])
            .expect("views share a shape");
        let labels: Vec<usize> = batch.labels.iter().chain(&batch.labels).copied().collect();
        let enc_bc = run_layers(&params.encoder, views.view());
        let proj = run_layers(&params.projector, enc_bc.output().view());
        let (z, norms) = normalize_with_norms(proj.output());
        let protos = config
            .contrastive
            .uses_prototypes()
            .then(|| params.prototypes.view());
        let out = contrastive_loss(
            z.view(),
            &labels,
            protos,
            shape.num_classes,
            &contrastive_params(config, compression),
        )?;
        con_loss = out.loss;
        let dz = out.grad_embeddings * config.beta;
        if let Some(gp) = out.grad_prototypes {
            grads.prototypes.scaled_add(config.beta, &gp);
        }
        let du = normalize_backward(&z, &norms, &dz);
        let d_feat = backprop_layers(&params.projector, &proj, du, &mut grads.projector);
        backprop_layers(&params.encoder, &enc_bc, d_feat, &mut grads.encoder);
    }

    let total = crate::losses::total_loss(cls_loss, con_loss, config);
    Ok((
        LossBreakdown {
            total,
            classifier: cls_loss,
            contrastive: con_loss,
        },
        grads,
    ))
}
