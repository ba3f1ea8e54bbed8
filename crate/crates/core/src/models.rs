//! Face-recognition (FR) and attribute-recognition (AR) models.
//!
//! The centrepiece is [`SurrogateModel`], a hard-parameter-sharing
//! multi-task network: a shared encoder trunk feeds both an FR head
//! (identity embedding, L2-normalised) and an AR head (eight attribute
//! logits). Because the trunk is shared, gradients of either task move the
//! same early features — which is exactly what the cross-task attack
//! exploits.
//!
//! Black-box target models are independent single-task MLPs trained on the
//! same data with different architectures and seeds; the attacker never
//! reads their gradients, only their outputs.
//!
//! All training is plain SGD with deterministic shuffling, so weights are a
//! pure function of `(architecture seed, training seed, dataset)`.

use std::path::Path;

use thiserror::Error;

use crate::container::{self, ContainerError, NamedTensor};
use crate::rng::{seeded_rng, shuffle, stream, uniform};
use crate::synthface::{Dataset, FaceSample, IMG_PIXELS, N_ATTRS};
use crate::tensor::{Gradients, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("model {id:?} is an {actual} model, cannot be used as {wanted}")]
    WrongKind {
        id: String,
        actual: &'static str,
        wanted: &'static str,
    },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("batch_size must be at least 1")]
    BadBatchSize,
    #[error("parameters became non-finite during epoch {epoch} (learning rate too high?)")]
    NonFiniteParams { epoch: usize },
    #[error("weights file is malformed: {0}")]
    MalformedWeights(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// `[out, in]` weight matrix.
    pub w: Tensor,
    /// `[out]` bias.
    pub b: Tensor,
    pub act: Activation,
}

impl Layer {
    /// He-uniform init: weights uniform in `±sqrt(6 / fan_in)`, zero biases.
    pub fn init(out_dim: usize, in_dim: usize, act: Activation, rng: &mut rand_chacha::ChaCha8Rng) -> Layer {
        let limit = (6.0 / in_dim as f64).sqrt();
        let w: Vec<f64> = (0..out_dim * in_dim).map(|_| uniform(rng, -limit, limit)).collect();
        Layer {
            w: Tensor::matrix(out_dim, in_dim, w).expect("consistent dims"),
            b: Tensor::zeros(vec![out_dim]),
            act,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    fn forward_with(&self, tape: &Tape, w: &Tensor, b: &Tensor, x: &Tensor) -> Result<Tensor, TensorError> {
        let h = tape.add(&tape.matmul(w, x)?, b)?;
        match self.act {
            Activation::Relu => tape.relu(&h),
            Activation::Linear => Ok(h),
        }
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        self.forward_with(tape, &self.w, &self.b, x)
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Tape-registered copies of an MLP's parameters, for training steps.
pub struct BoundMlp {
    pub params: Vec<(Tensor, Tensor)>,
}

impl Mlp {
    /// Builds a stack `in_dim -> widths[0] -> ... -> widths[last]`. Hidden
    /// layers use relu; the final layer is relu only if `last_relu`.
    pub fn init(
        in_dim: usize,
        widths: &[usize],
        last_relu: bool,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Mlp {
        assert!(!widths.is_empty(), "mlp needs at least one layer");
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for (i, &width) in widths.iter().enumerate() {
            let act = if i + 1 == widths.len() && !last_relu {
                Activation::Linear
            } else {
                Activation::Relu
            };
            layers.push(Layer::init(width, prev, act, rng));
            prev = width;
        }
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn forward(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(tape, &h)?;
        }
        Ok(h)
    }

    /// Registers all parameters on the tape (for gradient steps).
    pub fn bind(&self, tape: &Tape) -> BoundMlp {
        BoundMlp {
            params: self
                .layers
                .iter()
                .map(|l| (tape.leaf(&l.w), tape.leaf(&l.b)))
                .collect(),
        }
    }

    pub fn forward_bound(&self, tape: &Tape, bound: &BoundMlp, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut h = x.clone();
        for (layer, (w, b)) in self.layers.iter().zip(bound.params.iter()) {
            h = layer.forward_with(tape, w, b, &h)?;
        }
        Ok(h)
    }

    /// One SGD step: `p <- p - lr * grad`.
    pub fn apply_sgd(&mut self, grads: &Gradients, bound: &BoundMlp, lr: f64) {
        for (layer, (wl, bl)) in self.layers.iter_mut().zip(bound.params.iter()) {
            layer.w = sgd_step(&layer.w, &grads.wrt(wl).expect("bound leaf"), lr);
            layer.b = sgd_step(&layer.b, &grads.wrt(bl).expect("bound leaf"), lr);
        }
    }

    pub fn params_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.w.data().iter().all(|v| v.is_finite()) && l.b.data().iter().all(|v| v.is_finite())
        })
    }

    fn acts_code(&self) -> Vec<f64> {
        self.layers
            .iter()
            .map(|l| match l.act {
                Activation::Relu => 1.0,
                Activation::Linear => 0.0,
            })
            .collect()
    }
}

fn sgd_step(param: &Tensor, grad: &Tensor, lr: f64) -> Tensor {
    let data: Vec<f64> = param
        .data()
        .iter()
        .zip(grad.data())
        .map(|(p, g)| p - lr * g)
        .collect();
    Tensor::from_vec(param.shape().to_vec(), data).expect("same shape")
}

/// Architecture of the multi-task surrogate. Configurable so tests can build
/// tiny instances; [`SurrogateArch::default`] is the desk-scale model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurrogateArch {
    pub input: usize,
    /// Shared encoder widths (all relu).
    pub encoder: Vec<usize>,
    /// FR head widths; last layer linear, then L2-normalised into the
    /// embedding.
    pub fr: Vec<usize>,
    /// AR trunk widths; last layer linear (the attribute feature vector).
    pub ar_trunk: Vec<usize>,
    pub n_attrs: usize,
}

impl Default for SurrogateArch {
    fn default() -> Self {
        SurrogateArch {
            input: IMG_PIXELS,
            encoder: vec![128, 64],
            fr: vec![48, 32],
            ar_trunk: vec![128, 64],
            n_attrs: N_ATTRS,
        }
    }
}

/// Hard-parameter-sharing multi-task surrogate: `encoder` is shared by the
/// FR head (`fr`) and the AR head (`ar_trunk` + `ar_logits`).
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub arch: SurrogateArch,
    pub encoder: Mlp,
    pub fr: Mlp,
    pub ar_trunk: Mlp,
    pub ar_logits: Layer,
}

impl SurrogateModel {
    pub fn build(arch: &SurrogateArch, arch_seed: u64) -> SurrogateModel {
        let mut rng = seeded_rng(&[arch_seed, stream::INIT]);
        let encoder = Mlp::init(arch.input, &arch.encoder, true, &mut rng);
        let enc_out = encoder.out_dim();
        let fr = Mlp::init(enc_out, &arch.fr, false, &mut rng);
        let ar_trunk = Mlp::init(enc_out, &arch.ar_trunk, false, &mut rng);
        let ar_logits = Layer::init(arch.n_attrs, ar_trunk.out_dim(), Activation::Linear, &mut rng);
        SurrogateModel {
            arch: arch.clone(),
            encoder,
            fr,
            ar_trunk,
            ar_logits,
        }
    }

    /// Pre-normalisation FR features (used by the training-time identity
    /// classifier head).
    pub fn fr_features(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        let enc = self.encoder.forward(tape, x)?;
        self.fr.forward(tape, &enc)
    }

    /// Unit-norm identity embedding.
    pub fn fr_embed(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        tape.l2_normalize(&self.fr_features(tape, x)?)
    }

    /// Attribute feature vector (input of the attribute logits layer).
    pub fn ar_features(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        let enc = self.encoder.forward(tape, x)?;
        self.ar_trunk.forward(tape, &enc)
    }

    pub fn ar_logit_values(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        let feats = self.ar_features(tape, x)?;
        self.ar_logits.forward(tape, &feats)
    }

    /// Attribute probabilities in `(0, 1)`.
    pub fn ar_predict(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, TensorError> {
        tape.sigmoid(&self.ar_logit_values(tape, x)?)
    }

    pub fn params_finite(&self) -> bool {
        self.encoder.params_finite()
            && self.fr.params_finite()
            && self.ar_trunk.params_finite()
            && self.ar_logits.w.data().iter().all(|v| v.is_finite())
            && self.ar_logits.b.data().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Fr,
    Ar,
}

impl TargetKind {
    fn name(self) -> &'static str {
        match self {
            TargetKind::Fr => "face-recognition",
            TargetKind::Ar => "attribute-recognition",
        }
    }
}

/// A single-task model used either as a black-box target or as a white-box
/// single-task baseline surrogate. For `Fr` the trunk output is the
/// pre-normalisation embedding; for `Ar` it is the attribute logits.
#[derive(Debug, Clone)]
pub struct TargetModel {
    pub id: String,
    pub kind: TargetKind,
    pub trunk: Mlp,
}

impl TargetModel {
    /// Builds a single-task model; `widths` end with the embedding dimension
    /// (FR) or must end with the attribute count (AR). Hidden layers relu,
    /// final layer linear.
    pub fn build(id: impl Into<String>, kind: TargetKind, input: usize, widths: &[usize], arch_seed: u64) -> TargetModel {
        let mut rng = seeded_rng(&[arch_seed, stream::INIT]);
        TargetModel {
            id: id.into(),
            kind,
            trunk: Mlp::init(input, widths, false, &mut rng),
        }
    }

    pub fn fr_embed(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, ModelError> {
        if self.kind != TargetKind::Fr {
            return Err(ModelError::WrongKind {
                id: self.id.clone(),
                actual: self.kind.name(),
                wanted: "face-recognition",
            });
        }
        Ok(tape.l2_normalize(&self.trunk.forward(tape, x)?)?)
    }

    pub fn ar_logit_values(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, ModelError> {
        if self.kind != TargetKind::Ar {
            return Err(ModelError::WrongKind {
                id: self.id.clone(),
                actual: self.kind.name(),
                wanted: "attribute-recognition",
            });
        }
        Ok(self.trunk.forward(tape, x)?)
    }

    pub fn ar_predict(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, ModelError> {
        let logits = self.ar_logit_values(tape, x)?;
        Ok(tape.sigmoid(&logits)?)
    }

    pub fn params_finite(&self) -> bool {
        self.trunk.params_finite()
    }
}

/// Anything that maps an image to a unit-norm identity embedding.
pub trait FrModel: Sync {
    fn embed(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, ModelError>;
    fn embed_dim(&self) -> usize;
    fn model_id(&self) -> &str;
}

impl FrModel for SurrogateModel {
    fn embed(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, ModelError> {
        Ok(self.fr_embed(tape, x)?)
    }

    fn embed_dim(&self) -> usize {
        self.fr.out_dim()
    }

    fn model_id(&self) -> &str {
        "surrogate_fr"
    }
}

impl FrModel for TargetModel {
    fn embed(&self, tape: &Tape, x: &Tensor) -> Result<Tensor, ModelError> {
        self.fr_embed(tape, x)
    }

    fn embed_dim(&self) -> usize {
        self.trunk.out_dim()
    }

    fn model_id(&self) -> &str {
        &self.id
    }
}

/// Cosine similarity between FR embeddings of two images.
pub fn fr_similarity(model: &dyn FrModel, a: &Tensor, b: &Tensor) -> Result<f64, ModelError> {
    let tape = Tape::new();
    let ea = model.embed(&tape, a)?;
    let eb = model.embed(&tape, b)?;
    Ok(tape.cosine_similarity(&ea, &eb)?.item())
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 0.05,
            batch_size: 32,
            seed: 0,
        }
    }
}

fn flat_image(sample: &FaceSample) -> Tensor {
    sample
        .image
        .with_shape(vec![sample.image.len()])
        .expect("flatten preserves element count")
}

fn attr_targets(sample: &FaceSample) -> Tensor {
    Tensor::vector(sample.attributes.iter().map(|&a| a as f64).collect())
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(&[seed, stream::SHUFFLE, epoch as u64]);
    shuffle(&mut rng, &mut order);
    order
}

fn chain_mean(tape: &Tape, losses: Vec<Tensor>) -> Result<Tensor, TensorError> {
    let n = losses.len();
    let mut it = losses.into_iter();
    let mut total = it.next().expect("at least one loss");
    for loss in it {
        total = tape.add(&total, &loss)?;
    }
    tape.scalar_mul(&total, 1.0 / n as f64)
}

/// Jointly trains the surrogate's identity and attribute tasks: softmax
/// cross-entropy over training identities (through a throwaway classifier
/// head on the FR features) plus mean BCE on the attribute logits, equally
/// weighted. Returns the mean per-sample loss for each epoch.
pub fn train_surrogate(
    model: &mut SurrogateModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, ModelError> {
    if cfg.batch_size == 0 {
        return Err(ModelError::BadBatchSize);
    }
    let samples: Vec<&FaceSample> = dataset.train_samples().collect();
    if samples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let n_classes = dataset.n_train_identities;
    let mut aux_rng = seeded_rng(&[cfg.seed, stream::AUX]);
    let mut aux = Layer::init(n_classes, model.fr.out_dim(), Activation::Linear, &mut aux_rng);

    let xs: Vec<Tensor> = samples.iter().map(|s| flat_image(s)).collect();
    let ys: Vec<Tensor> = samples.iter().map(|s| attr_targets(s)).collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let enc_b = model.encoder.bind(&tape);
            let fr_b = model.fr.bind(&tape);
            let ar_b = model.ar_trunk.bind(&tape);
            let (arlog_w, arlog_b) = (tape.leaf(&model.ar_logits.w), tape.leaf(&model.ar_logits.b));
            let (aux_w, aux_b) = (tape.leaf(&aux.w), tape.leaf(&aux.b));

            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let s = samples[idx];
                let enc = model.encoder.forward_bound(&tape, &enc_b, &xs[idx])?;
                let fr_pre = model.fr.forward_bound(&tape, &fr_b, &enc)?;
                let id_logits = tape.add(&tape.matmul(&aux_w, &fr_pre)?, &aux_b)?;
                let l_id = tape.softmax_cross_entropy(&id_logits, s.id_index)?;
                let ar_feat = model.ar_trunk.forward_bound(&tape, &ar_b, &enc)?;
                let ar_logits = tape.add(&tape.matmul(&arlog_w, &ar_feat)?, &arlog_b)?;
                let l_attr = tape.bce_with_logits(&ar_logits, &ys[idx])?;
                losses.push(tape.add(&l_id, &l_attr)?);
            }
            let mean = chain_mean(&tape, losses)?;
            epoch_loss += mean.item() * batch.len() as f64;
            let grads = tape.backward(&mean)?;
            model.encoder.apply_sgd(&grads, &enc_b, cfg.lr);
            model.fr.apply_sgd(&grads, &fr_b, cfg.lr);
            model.ar_trunk.apply_sgd(&grads, &ar_b, cfg.lr);
            model.ar_logits.w = sgd_step(&model.ar_logits.w, &grads.wrt(&arlog_w).expect("leaf"), cfg.lr);
            model.ar_logits.b = sgd_step(&model.ar_logits.b, &grads.wrt(&arlog_b).expect("leaf"), cfg.lr);
            aux.w = sgd_step(&aux.w, &grads.wrt(&aux_w).expect("leaf"), cfg.lr);
            aux.b = sgd_step(&aux.b, &grads.wrt(&aux_b).expect("leaf"), cfg.lr);
        }
        if !model.params_finite() {
            return Err(ModelError::NonFiniteParams { epoch });
        }
        history.push(epoch_loss / samples.len() as f64);
    }
    Ok(history)
}

/// Trains a single-task FR target with softmax cross-entropy over training
/// identities (throwaway classifier head on the embedding features).
pub fn train_fr_target(
    model: &mut TargetModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, ModelError> {
    if model.kind != TargetKind::Fr {
        return Err(ModelError::WrongKind {
            id: model.id.clone(),
            actual: model.kind.name(),
            wanted: "face-recognition",
        });
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::BadBatchSize);
    }
    let samples: Vec<&FaceSample> = dataset.train_samples().collect();
    if samples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let n_classes = dataset.n_train_identities;
    let mut aux_rng = seeded_rng(&[cfg.seed, stream::AUX]);
    let mut aux = Layer::init(n_classes, model.trunk.out_dim(), Activation::Linear, &mut aux_rng);
    let xs: Vec<Tensor> = samples.iter().map(|s| flat_image(s)).collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let trunk_b = model.trunk.bind(&tape);
            let (aux_w, aux_b) = (tape.leaf(&aux.w), tape.leaf(&aux.b));
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let s = samples[idx];
                let feat = model.trunk.forward_bound(&tape, &trunk_b, &xs[idx])?;
                let logits = tape.add(&tape.matmul(&aux_w, &feat)?, &aux_b)?;
                losses.push(tape.softmax_cross_entropy(&logits, s.id_index)?);
            }
            let mean = chain_mean(&tape, losses)?;
            epoch_loss += mean.item() * batch.len() as f64;
            let grads = tape.backward(&mean)?;
            model.trunk.apply_sgd(&grads, &trunk_b, cfg.lr);
            aux.w = sgd_step(&aux.w, &grads.wrt(&aux_w).expect("leaf"), cfg.lr);
            aux.b = sgd_step(&aux.b, &grads.wrt(&aux_b).expect("leaf"), cfg.lr);
        }
        if !model.params_finite() {
            return Err(ModelError::NonFiniteParams { epoch });
        }
        history.push(epoch_loss / samples.len() as f64);
    }
    Ok(history)
}

/// Trains a single-task AR target with mean BCE on its logits.
pub fn train_ar_target(
    model: &mut TargetModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, ModelError> {
    if model.kind != TargetKind::Ar {
        return Err(ModelError::WrongKind {
            id: model.id.clone(),
            actual: model.kind.name(),
            wanted: "attribute-recognition",
        });
    }
    if cfg.batch_size == 0 {
        return Err(ModelError::BadBatchSize);
    }
    let samples: Vec<&FaceSample> = dataset.train_samples().collect();
    if samples.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let xs: Vec<Tensor> = samples.iter().map(|s| flat_image(s)).collect();
    let ys: Vec<Tensor> = samples.iter().map(|s| attr_targets(s)).collect();

    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let trunk_b = model.trunk.bind(&tape);
            let mut losses = Vec::with_capacity(batch.len());
            for &idx in batch {
                let logits = model.trunk.forward_bound(&tape, &trunk_b, &xs[idx])?;
                losses.push(tape.bce_with_logits(&logits, &ys[idx])?);
            }
            let mean = chain_mean(&tape, losses)?;
            epoch_loss += mean.item() * batch.len() as f64;
            let grads = tape.backward(&mean)?;
            model.trunk.apply_sgd(&grads, &trunk_b, cfg.lr);
        }
        if !model.params_finite() {
            return Err(ModelError::NonFiniteParams { epoch });
        }
        history.push(epoch_loss / samples.len() as f64);
    }
    Ok(history)
}

// --- weight file (de)serialisation -----------------------------------------

const KIND_SURROGATE: f64 = 1.0;
const KIND_FR_TARGET: f64 = 2.0;
const KIND_AR_TARGET: f64 = 3.0;

fn push_mlp(out: &mut Vec<NamedTensor>, prefix: &str, mlp: &Mlp, in_dim: usize) {
    out.push(NamedTensor::new(
        format!("{prefix}/input"),
        Tensor::scalar(in_dim as f64),
    ));
    out.push(NamedTensor::new(
        format!("{prefix}/acts"),
        Tensor::vector(mlp.acts_code()),
    ));
    for (i, layer) in mlp.layers.iter().enumerate() {
        out.push(NamedTensor::new(format!("{prefix}/{i}/w"), layer.w.clone()));
        out.push(NamedTensor::new(format!("{prefix}/{i}/b"), layer.b.clone()));
    }
}

fn read_mlp(tensors: &[NamedTensor], prefix: &str) -> Result<Mlp, ModelError> {
    let in_dim = container::require(tensors, &format!("{prefix}/input"))?.item() as usize;
    let acts = container::require(tensors, &format!("{prefix}/acts"))?.to_vec();
    let mut layers = Vec::with_capacity(acts.len());
    let mut prev = in_dim;
    for (i, &code) in acts.iter().enumerate() {
        let act = match code {
            c if c == 1.0 => Activation::Relu,
            c if c == 0.0 => Activation::Linear,
            c => {
                return Err(ModelError::MalformedWeights(format!(
                    "{prefix}/acts[{i}] has unknown activation code {c}"
                )))
            }
        };
        let w = container::require(tensors, &format!("{prefix}/{i}/w"))?.clone();
        if w.rank() != 2 || w.shape()[1] != prev {
            return Err(ModelError::MalformedWeights(format!(
                "{prefix}/{i}/w has shape {:?}, expected [_, {prev}]",
                w.shape()
            )));
        }
        let out_dim = w.shape()[0];
        let b = container::require_shaped(tensors, &format!("{prefix}/{i}/b"), &[out_dim])?.clone();
        layers.push(Layer { w, b, act });
        prev = out_dim;
    }
    if layers.is_empty() {
        return Err(ModelError::MalformedWeights(format!("{prefix} has no layers")));
    }
    Ok(Mlp { layers })
}

fn id_tensor(id: &str) -> Tensor {
    Tensor::vector(id.bytes().map(|b| b as f64).collect())
}

fn id_from_tensor(t: &Tensor) -> Result<String, ModelError> {
    let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
    String::from_utf8(bytes).map_err(|_| ModelError::MalformedWeights("meta/id is not UTF-8".into()))
}

pub fn save_surrogate(path: &Path, model: &SurrogateModel) -> Result<(), ModelError> {
    let mut tensors = vec![NamedTensor::new("meta/kind", Tensor::scalar(KIND_SURROGATE))];
    push_mlp(&mut tensors, "enc", &model.encoder, model.arch.input);
    push_mlp(&mut tensors, "fr", &model.fr, model.encoder.out_dim());
    push_mlp(&mut tensors, "ar", &model.ar_trunk, model.encoder.out_dim());
    tensors.push(NamedTensor::new("arlog/w", model.ar_logits.w.clone()));
    tensors.push(NamedTensor::new("arlog/b", model.ar_logits.b.clone()));
    container::write_container(path, &tensors)?;
    Ok(())
}

pub fn load_surrogate(path: &Path) -> Result<SurrogateModel, ModelError> {
    let tensors = container::read_container(path)?;
    let kind = container::require(&tensors, "meta/kind")?.item();
    if kind != KIND_SURROGATE {
        return Err(ModelError::MalformedWeights(format!(
            "expected a surrogate weights file, found kind code {kind}"
        )));
    }
    let encoder = read_mlp(&tensors, "enc")?;
    let fr = read_mlp(&tensors, "fr")?;
    let ar_trunk = read_mlp(&tensors, "ar")?;
    let w = container::require(&tensors, "arlog/w")?.clone();
    if w.rank() != 2 || w.shape()[1] != ar_trunk.out_dim() {
        return Err(ModelError::MalformedWeights(format!(
            "arlog/w has shape {:?}, expected [_, {}]",
            w.shape(),
            ar_trunk.out_dim()
        )));
    }
    let n_attrs = w.shape()[0];
    let b = container::require_shaped(&tensors, "arlog/b", &[n_attrs])?.clone();
    let arch = SurrogateArch {
        input: encoder.in_dim(),
        encoder: encoder.layers.iter().map(Layer::out_dim).collect(),
        fr: fr.layers.iter().map(Layer::out_dim).collect(),
        ar_trunk: ar_trunk.layers.iter().map(Layer::out_dim).collect(),
        n_attrs,
    };
    if fr.in_dim() != encoder.out_dim() || ar_trunk.in_dim() != encoder.out_dim() {
        return Err(ModelError::MalformedWeights(
            "head input widths do not match encoder output".into(),
        ));
    }
    Ok(SurrogateModel {
        arch,
        encoder,
        fr,
        ar_trunk,
        ar_logits: Layer {
            w,
            b,
            act: Activation::Linear,
        },
    })
}

pub fn save_target(path: &Path, model: &TargetModel) -> Result<(), ModelError> {
    let kind = match model.kind {
        TargetKind::Fr => KIND_FR_TARGET,
        TargetKind::Ar => KIND_AR_TARGET,
    };
    let mut tensors = vec![
        NamedTensor::new("meta/kind", Tensor::scalar(kind)),
        NamedTensor::new("meta/id", id_tensor(&model.id)),
    ];
    push_mlp(&mut tensors, "trunk", &model.trunk, model.trunk.in_dim());
    container::write_container(path, &tensors)?;
    Ok(())
}

pub fn load_target(path: &Path) -> Result<TargetModel, ModelError> {
    let tensors = container::read_container(path)?;
    let kind = match container::require(&tensors, "meta/kind")?.item() {
        c if c == KIND_FR_TARGET => TargetKind::Fr,
        c if c == KIND_AR_TARGET => TargetKind::Ar,
        c if c == KIND_SURROGATE => {
            return Err(ModelError::MalformedWeights(
                "expected a single-task weights file, found a surrogate".into(),
            ))
        }
        c => {
            return Err(ModelError::MalformedWeights(format!(
                "unknown model kind code {c}"
            )))
        }
    };
    let id = id_from_tensor(container::require(&tensors, "meta/id")?)?;
    let trunk = read_mlp(&tensors, "trunk")?;
    Ok(TargetModel { id, kind, trunk })
}
