//! Loss, Adam, the training regimes (per-stream pretraining, frozen-stream
//! fusion training, full end-to-end), and the finite-difference gradient
//! oracle.

use crate::data_model::{Modality, ModalityMask, Prediction};
use crate::encoders::{ImageEncoder, MetadataEncoder, MetadataEncoderSpec, TextEncoder};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionModel};
use crate::nn::{softmax, softmax_ce_dlogits, Dense, PTensor, Trainable};
use crate::preprocess::{NormalizerStats, PreparedSample};
use ndarray::{Array1, ArrayD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::any::Any;
use std::collections::HashMap;

/// Adam hyperparameters; defaults follow the experimental setup
/// (beta1 0.9, beta2 0.999, epsilon 1e-8, learning rate 1e-4).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub learning_rate: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8, learning_rate: 1e-4 }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig { learning_rate, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in [0,1)".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRegime {
    PretrainStream,
    FusionFrozen,
    EndToEnd,
}

/// Full training configuration. Fusion training defaults to 10 epochs with
/// batch size 96.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub regime: TrainRegime,
    pub l1_coeff: f64,
    pub l2_coeff: f64,
    /// Extend L1/L2 beyond the metadata MLP to compression and head
    /// weights.
    pub regularize_fusion: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            epochs: 10,
            batch_size: 96,
            regime: TrainRegime::FusionFrozen,
            l1_coeff: 1e-5,
            l2_coeff: 1e-5,
            regularize_fusion: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        self.adam.validate()
    }
}

/// First- and second-moment accumulators keyed by parameter name, plus the
/// shared step counter.
#[derive(Debug, Default)]
pub struct AdamState {
    pub t: u64,
    slots: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

/// Bias-corrected Adam update for one tensor, in place.
pub fn adam_update(
    value: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    cfg: &AdamConfig,
) {
    assert_eq!(value.len(), grad.len());
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..value.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        value[i] -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.epsilon);
    }
}

/// One optimizer step over every tensor produced by `visit`.
pub fn adam_step(
    visit: &mut dyn FnMut(&mut dyn FnMut(&str, &mut PTensor)),
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    state.t += 1;
    let t = state.t;
    let slots = &mut state.slots;
    visit(&mut |name, p| {
        let n = p.len();
        let (m, v) = slots
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
        assert_eq!(m.len(), n, "parameter `{name}` changed size");
        adam_update(
            p.value.as_slice_mut().expect("standard layout"),
            p.grad.as_slice().expect("standard layout"),
            m,
            v,
            t,
            cfg,
        );
    });
}

/// Mean negative log-probability of the true class, with the probability
/// floored at 1e-12 before the log.
pub fn data_loss(predictions: &[Prediction], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() || predictions.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (p, &label) in predictions.iter().zip(labels) {
        let prob = p.probabilities[label as usize].max(1e-12);
        total -= prob.ln();
    }
    Ok(total / predictions.len() as f64)
}

/// A model the generic training loop can drive: monomodal pretraining
/// wrappers and the full fusion model both implement this.
pub trait Classifier {
    fn predict(
        &self,
        sample: &PreparedSample,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Prediction, Box<dyn Any>)>;
    fn backprop(&mut self, cache: &dyn Any, label: u8, weight: f64);
    /// Parameters updated by the optimizer under the active regime.
    fn visit_trainable(&mut self, f: &mut dyn FnMut(&str, &mut PTensor));
    /// Every parameter, regardless of freezing.
    fn visit_all(&mut self, f: &mut dyn FnMut(&str, &mut PTensor));
    /// Weight tensors subject to L1/L2.
    fn visit_regularized(&mut self, include_fusion: bool, f: &mut dyn FnMut(&str, &mut PTensor));
}

impl Classifier for FusionModel {
    fn predict(
        &self,
        sample: &PreparedSample,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Prediction, Box<dyn Any>)> {
        let (p, cache) = self.forward_sample(sample, dropout_rng)?;
        Ok((p, Box::new(cache)))
    }

    fn backprop(&mut self, cache: &dyn Any, label: u8, weight: f64) {
        let cache = cache.downcast_ref::<crate::fusion::SampleCache>().expect("fusion cache");
        self.backward_sample(cache, label, weight);
    }

    fn visit_trainable(&mut self, f: &mut dyn FnMut(&str, &mut PTensor)) {
        if self.frozen_streams {
            self.visit_fusion_params(f);
        } else {
            self.visit_params("", f);
        }
    }

    fn visit_all(&mut self, f: &mut dyn FnMut(&str, &mut PTensor)) {
        self.visit_params("", f);
    }

    fn visit_regularized(&mut self, include_fusion: bool, f: &mut dyn FnMut(&str, &mut PTensor)) {
        if let Some(enc) = self.metadata.as_mut() {
            enc.visit_params("metadata/", &mut |name, p| {
                if name.ends_with('w') {
                    f(name, p);
                }
            });
        }
        if include_fusion {
            self.visit_fusion_params(&mut |name, p| {
                if name.ends_with('w') {
                    f(name, p);
                }
            });
        }
    }
}

/// One modality encoder.
pub enum StreamEncoder {
    Text(TextEncoder),
    Image(ImageEncoder),
    Metadata(MetadataEncoder),
}

impl StreamEncoder {
    pub fn output_dim(&self) -> usize {
        match self {
            StreamEncoder::Text(e) => e.embed_dim,
            StreamEncoder::Image(e) => e.embed_dim,
            StreamEncoder::Metadata(e) => e.spec.layer_sizes[2],
        }
    }

    pub fn modality(&self) -> Modality {
        match self {
            StreamEncoder::Text(e) => e.modality,
            StreamEncoder::Image(_) => Modality::Image,
            StreamEncoder::Metadata(_) => Modality::Metadata,
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut PTensor)) {
        match self {
            StreamEncoder::Text(e) => e.visit_params(prefix, f),
            StreamEncoder::Image(e) => e.visit_params(prefix, f),
            StreamEncoder::Metadata(e) => e.visit_params(prefix, f),
        }
    }
}

enum StreamCache {
    Text(crate::encoders::TextCache),
    Image(crate::encoders::ImageCache),
    Metadata(crate::encoders::MetadataCache),
}

/// A single stream with a temporary affine-softmax head, used for
/// per-stream pretraining and as the monomodal baseline.
pub struct PretrainModel {
    pub encoder: StreamEncoder,
    pub head: Dense,
    pub stats: NormalizerStats,
}

struct PretrainCache {
    stream: StreamCache,
    embedding: Array1<f64>,
    probs: Array1<f64>,
}

impl PretrainModel {
    pub fn new(
        modality: Modality,
        embed_dim: usize,
        meta_spec: MetadataEncoderSpec,
        stats: NormalizerStats,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = match modality {
            Modality::Title | Modality::Comments => {
                StreamEncoder::Text(TextEncoder::new(modality, embed_dim, &mut rng))
            }
            Modality::Image => {
                StreamEncoder::Image(ImageEncoder::new(embed_dim, stats.image.target_resolution, &mut rng))
            }
            Modality::Metadata => StreamEncoder::Metadata(MetadataEncoder::new(meta_spec, &mut rng)),
        };
        let head = Dense::glorot(encoder.output_dim(), 2, &mut rng);
        PretrainModel { encoder, head, stats }
    }
}

impl Classifier for PretrainModel {
    fn predict(
        &self,
        sample: &PreparedSample,
        _dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Prediction, Box<dyn Any>)> {
        if sample.stats_fingerprint != self.stats.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.stats.fingerprint.clone(),
                actual: sample.stats_fingerprint.clone(),
            });
        }
        let (embedding, stream) = match &self.encoder {
            StreamEncoder::Text(e) => {
                let len = match e.modality {
                    Modality::Title => self.stats.title.truncation_length,
                    _ => self.stats.comments.truncation_length,
                };
                let ids = match e.modality {
                    Modality::Title => &sample.title_ids,
                    _ => &sample.comments_ids,
                };
                let (emb, c) = e.forward(ids, len)?;
                (emb, StreamCache::Text(c))
            }
            StreamEncoder::Image(e) => {
                let tensor = crate::preprocess::standardize_image(&sample.image, &self.stats.image)?;
                let (emb, c) = e.forward(tensor.view())?;
                (emb, StreamCache::Image(c))
            }
            StreamEncoder::Metadata(e) => {
                let (emb, c) = e.forward(&sample.metadata)?;
                (emb, StreamCache::Metadata(c))
            }
        };
        let logits = self.head.forward(embedding.view());
        let probs = softmax(logits.view());
        let prediction = Prediction { probabilities: [probs[0], probs[1]] };
        Ok((prediction, Box::new(PretrainCache { stream, embedding, probs })))
    }

    fn backprop(&mut self, cache: &dyn Any, label: u8, weight: f64) {
        let cache = cache.downcast_ref::<PretrainCache>().expect("pretrain cache");
        let dlogits = softmax_ce_dlogits(&cache.probs, label as usize, weight);
        let demb = self.head.backward(cache.embedding.view(), dlogits.view());
        match (&mut self.encoder, &cache.stream) {
            (StreamEncoder::Text(e), StreamCache::Text(c)) => e.backward(c, &demb),
            (StreamEncoder::Image(e), StreamCache::Image(c)) => e.backward(c, &demb),
            (StreamEncoder::Metadata(e), StreamCache::Metadata(c)) => e.backward(c, &demb),
            _ => unreachable!("cache/encoder modality mismatch"),
        }
    }

    fn visit_trainable(&mut self, f: &mut dyn FnMut(&str, &mut PTensor)) {
        self.visit_all(f);
    }

    fn visit_all(&mut self, f: &mut dyn FnMut(&str, &mut PTensor)) {
        let prefix = format!("{}/", self.encoder.modality().as_str());
        self.encoder.visit(&prefix, f);
        self.head.visit_params("head/", f);
    }

    fn visit_regularized(&mut self, include_fusion: bool, f: &mut dyn FnMut(&str, &mut PTensor)) {
        if let StreamEncoder::Metadata(e) = &mut self.encoder {
            e.visit_params("metadata/", &mut |name, p| {
                if name.ends_with('w') {
                    f(name, p);
                }
            });
        }
        if include_fusion {
            self.head.visit_params("head/", &mut |name, p| {
                if name.ends_with('w') {
                    f(name, p);
                }
            });
        }
    }
}

/// L1 + L2 penalty over the regularized weights.
pub fn reg_penalty(model: &mut dyn Classifier, cfg: &TrainConfig) -> f64 {
    if cfg.l1_coeff == 0.0 && cfg.l2_coeff == 0.0 {
        return 0.0;
    }
    let mut penalty = 0.0;
    model.visit_regularized(cfg.regularize_fusion, &mut |_, p| {
        for &w in p.value.iter() {
            penalty += cfg.l1_coeff * w.abs() + cfg.l2_coeff * w * w;
        }
    });
    penalty
}

fn add_reg_grads(model: &mut dyn Classifier, cfg: &TrainConfig) {
    if cfg.l1_coeff == 0.0 && cfg.l2_coeff == 0.0 {
        return;
    }
    let (l1, l2) = (cfg.l1_coeff, cfg.l2_coeff);
    model.visit_regularized(cfg.regularize_fusion, &mut |_, p| {
        let n = p.len();
        let value = p.value.as_slice().expect("standard layout").to_vec();
        let grad = p.grad.as_slice_mut().expect("standard layout");
        for i in 0..n {
            grad[i] += l1 * value[i].signum() + 2.0 * l2 * value[i];
        }
    });
}

/// Total loss: mean cross-entropy on `batch` (dropout disabled) plus the
/// regularization penalty.
pub fn batch_loss(
    model: &mut dyn Classifier,
    batch: &[&PreparedSample],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut predictions = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for s in batch {
        predictions.push(model.predict(s, None)?.0);
        labels.push(s.label);
    }
    let loss = data_loss(&predictions, &labels)? + reg_penalty(model, cfg);
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(loss)
}

/// Accuracy of argmax predictions against labels.
fn eval_accuracy(model: &dyn Classifier, data: &[PreparedSample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in data {
        let (p, _) = model.predict(s, None)?;
        if p.argmax() == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub best_val_acc: f64,
    pub steps: u64,
}

pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train.div_ceil(batch_size)
}

type Snapshot = Vec<(String, ArrayD<f64>)>;

fn snapshot(model: &mut dyn Classifier) -> Snapshot {
    let mut out = Vec::new();
    model.visit_all(&mut |name, p| out.push((name.to_string(), p.value.clone())));
    out
}

fn restore(model: &mut dyn Classifier, snap: &Snapshot) {
    let mut i = 0;
    model.visit_all(&mut |name, p| {
        assert_eq!(snap[i].0, name, "snapshot order mismatch");
        p.value.assign(&snap[i].1);
        i += 1;
    });
}

/// Generic mini-batch training loop. Shuffles with a seeded generator,
/// keeps the last incomplete batch, tracks the best-validation snapshot and
/// restores it before returning.
pub fn train_classifier(
    model: &mut dyn Classifier,
    train: &[PreparedSample],
    validation: &[PreparedSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus("no training samples".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e3779b97f4a7c15);
    let mut state = AdamState::default();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut best: Option<Snapshot> = None;
    let mut indices: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        indices.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        for batch in indices.chunks(cfg.batch_size) {
            model.visit_trainable(&mut |_, p| p.zero_grad());
            let weight = 1.0 / batch.len() as f64;
            let mut batch_data_loss = 0.0;
            for &idx in batch {
                let sample = &train[idx];
                let (prediction, cache) = model.predict(sample, Some(&mut dropout_rng))?;
                if prediction.argmax() == sample.label {
                    correct += 1;
                }
                let prob = prediction.probabilities[sample.label as usize].max(1e-12);
                batch_data_loss -= prob.ln() * weight;
                model.backprop(cache.as_ref(), sample.label, weight);
            }
            add_reg_grads(model, cfg);
            let loss = batch_data_loss + reg_penalty(model, cfg);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss);
            }
            epoch_loss += loss;
            batches += 1;
            adam_step(&mut |f| model.visit_trainable(f), &mut state, &cfg.adam);
        }
        let val_acc = if validation.is_empty() {
            // fall back to training accuracy for checkpoint selection
            correct as f64 / train.len() as f64
        } else {
            eval_accuracy(model, validation)?
        };
        if val_acc > best_val_acc {
            best_val_acc = val_acc;
            best = Some(snapshot(model));
        }
        metrics.push(EpochMetrics {
            epoch,
            train_loss: epoch_loss / batches as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
        });
    }
    if let Some(snap) = &best {
        restore(model, snap);
    }
    Ok(TrainReport { metrics, best_val_acc, steps: state.t })
}

/// Train one stream with a temporary head; the best-validation parameters
/// are kept. The head stays available so the monomodal baseline can be
/// evaluated, but fusion training only consumes the encoder.
pub fn pretrain_stream(
    modality: Modality,
    embed_dim: usize,
    meta_spec: MetadataEncoderSpec,
    stats: &NormalizerStats,
    train: &[PreparedSample],
    validation: &[PreparedSample],
    cfg: &TrainConfig,
) -> Result<(PretrainModel, TrainReport)> {
    let mut model = PretrainModel::new(modality, embed_dim, meta_spec, stats.clone(), cfg.seed);
    let report = train_classifier(&mut model, train, validation, cfg)?;
    Ok((model, report))
}

/// Copy pretrained encoder parameters into the assembled model's streams.
pub fn load_stream_into(model: &mut FusionModel, pretrained: &mut PretrainModel) -> Result<()> {
    let modality = pretrained.encoder.modality();
    let mut values: Vec<(String, ArrayD<f64>)> = Vec::new();
    let prefix = format!("{}/", modality.as_str());
    pretrained.encoder.visit(&prefix, &mut |name, p| {
        values.push((name.to_string(), p.value.clone()));
    });
    let target: &mut dyn FnMut(&mut dyn FnMut(&str, &mut PTensor)) = &mut |f| match modality {
        Modality::Title => {
            if let Some(e) = model.title.as_mut() {
                e.visit_params("title/", f);
            }
        }
        Modality::Comments => {
            if let Some(e) = model.comments.as_mut() {
                e.visit_params("comments/", f);
            }
        }
        Modality::Image => {
            if let Some(e) = model.image.as_mut() {
                e.visit_params("image/", f);
            }
        }
        Modality::Metadata => {
            if let Some(e) = model.metadata.as_mut() {
                e.visit_params("metadata/", f);
            }
        }
    };
    let mut i = 0;
    let mut mismatch = None;
    target(&mut |name, p| {
        if i >= values.len() || values[i].0 != name || values[i].1.shape() != p.value.shape() {
            mismatch = Some(name.to_string());
        } else {
            p.value.assign(&values[i].1);
        }
        i += 1;
    });
    if i == 0 {
        return Err(Error::MissingCheckpoint(modality.as_str().to_string()));
    }
    if let Some(name) = mismatch {
        return Err(Error::Checkpoint(format!("stream tensor mismatch at `{name}`")));
    }
    Ok(())
}

/// Train only compression, fusion, and head parameters on top of frozen
/// stream checkpoints.
pub fn train_fusion(
    model: &mut FusionModel,
    train: &[PreparedSample],
    validation: &[PreparedSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    model.frozen_streams = true;
    train_classifier(model, train, validation, cfg)
}

/// Maximum relative error between analytic gradients and central finite
/// differences over up to `max_coords` sampled parameter coordinates.
/// Dropout is disabled throughout.
/// Worst coordinate found by `gradient_check_report`.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel: f64,
    pub worst_tensor: String,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
    /// Coordinates dropped because the finite differences at eps and eps/2
    /// disagree, i.e. the perturbation straddles a relu kink where no
    /// two-sided derivative exists.
    pub coords_skipped: usize,
}

pub fn gradient_check(
    model: &mut dyn Classifier,
    batch: &[&PreparedSample],
    cfg: &TrainConfig,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64> {
    Ok(gradient_check_report(model, batch, cfg, eps, max_coords, seed)?.max_rel)
}

pub fn gradient_check_report(
    model: &mut dyn Classifier,
    batch: &[&PreparedSample],
    cfg: &TrainConfig,
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    // analytic gradients of the full batch loss
    model.visit_all(&mut |_, p| p.zero_grad());
    let weight = 1.0 / batch.len() as f64;
    let mut predictions = Vec::new();
    let mut labels = Vec::new();
    for s in batch {
        let (p, cache) = model.predict(s, None)?;
        model.backprop(cache.as_ref(), s.label, weight);
        predictions.push(p);
        labels.push(s.label);
    }
    add_reg_grads(model, cfg);
    let base = data_loss(&predictions, &labels)? + reg_penalty(model, cfg);
    if !base.is_finite() {
        return Err(Error::NonFiniteLoss);
    }

    // tensor layout: (name, offset, len)
    let mut layout = Vec::new();
    let mut total = 0usize;
    model.visit_all(&mut |name, p| {
        layout.push((name.to_string(), total, p.len()));
        total += p.len();
    });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut coords: Vec<usize> = if total <= max_coords {
        (0..total).collect()
    } else {
        // stratified over tensors so every module is exercised, not just
        // the large embedding tables
        let per_tensor = max_coords.div_ceil(layout.len());
        let mut out = Vec::with_capacity(per_tensor * layout.len());
        for (_, offset, len) in &layout {
            if *len <= per_tensor {
                out.extend(*offset..*offset + *len);
            } else {
                out.extend((0..per_tensor).map(|_| offset + rng.gen_range(0..*len)));
            }
        }
        out
    };
    coords.sort_unstable();
    coords.dedup();

    let mut report = GradCheckReport {
        max_rel: 0.0,
        worst_tensor: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: coords.len(),
        coords_skipped: 0,
    };
    for &coord in &coords {
        let analytic = read_at(model, coord, |p, i| p.grad.as_slice().unwrap()[i]);
        let mut loss_at = |delta: f64| -> Result<f64> {
            perturb(model, coord, delta);
            let loss = batch_loss(model, batch, cfg);
            perturb(model, coord, -delta);
            loss
        };
        let numeric = (loss_at(eps)? - loss_at(-eps)?) / (2.0 * eps);
        let half = (loss_at(0.5 * eps)? - loss_at(-0.5 * eps)?) / eps;
        // for smooth coordinates the two estimates agree to O(eps^2); a
        // visible gap means the window straddles a relu kink, where no
        // two-sided derivative exists to compare against
        let scale = numeric.abs().max(half.abs()).max(1e-8);
        if (numeric - half).abs() / scale > 1e-4 {
            report.coords_skipped += 1;
            continue;
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel {
            report.max_rel = rel;
            report.analytic = analytic;
            report.numeric = numeric;
            report.worst_tensor = layout
                .iter()
                .find(|(_, offset, len)| coord >= *offset && coord < offset + len)
                .map(|(name, _, _)| name.clone())
                .unwrap_or_default();
        }
    }
    report.coords_checked -= report.coords_skipped;
    Ok(report)
}

fn read_at(model: &mut dyn Classifier, coord: usize, read: impl Fn(&PTensor, usize) -> f64) -> f64 {
    let mut offset = 0usize;
    let mut out = 0.0;
    model.visit_all(&mut |_, p| {
        let n = p.len();
        if coord >= offset && coord < offset + n {
            out = read(p, coord - offset);
        }
        offset += n;
    });
    out
}

fn perturb(model: &mut dyn Classifier, coord: usize, delta: f64) {
    let mut offset = 0usize;
    model.visit_all(&mut |_, p| {
        let n = p.len();
        if coord >= offset && coord < offset + n {
            p.value.as_slice_mut().unwrap()[coord - offset] += delta;
        }
        offset += n;
    });
}

/// Build the full desk-scale four-stream model with every stream assembled
/// fresh under one seed.
pub fn assemble_full_desk_model(
    config: FusionConfig,
    meta_spec: MetadataEncoderSpec,
    stats: NormalizerStats,
    seed: u64,
) -> Result<FusionModel> {
    FusionModel::assemble(ModalityMask::full(), config, meta_spec, stats, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_pred() -> Prediction {
        Prediction { probabilities: [0.5, 0.5] }
    }

    #[test]
    fn loss_examples() {
        let l = data_loss(&[uniform_pred()], &[0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        let l = data_loss(&[Prediction { probabilities: [1.0, 0.0] }], &[0]).unwrap();
        assert_eq!(l, 0.0);

        let l = data_loss(&[Prediction { probabilities: [0.9, 0.1] }], &[1]).unwrap();
        assert!((l - 2.302585092994046).abs() < 1e-12);
    }

    #[test]
    fn loss_floors_zero_probability() {
        let l = data_loss(&[Prediction { probabilities: [1.0, 0.0] }], &[1]).unwrap();
        assert!((l - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let cfg = AdamConfig::default();
        let mut value = vec![0.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        adam_update(&mut value, &[1.0], &mut m, &mut v, 1, &cfg);
        // first bias-corrected step is -lr * 1 / (1 + eps)
        assert!((value[0] + 1e-4).abs() < 1e-9, "step was {}", value[0]);
    }

    #[test]
    fn adam_zero_gradient_fixpoint() {
        let cfg = AdamConfig::default();
        let mut value = vec![0.7, -0.3];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adam_update(&mut value, &[0.0, 0.0], &mut m, &mut v, 1, &cfg);
        assert_eq!(value, vec![0.7, -0.3]);
    }

    #[test]
    fn adam_sign_symmetry() {
        let cfg = AdamConfig::default();
        let mut value = vec![0.0, 0.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adam_update(&mut value, &[0.5, -0.5], &mut m, &mut v, 1, &cfg);
        assert!((value[0] + value[1]).abs() < 1e-15);
        assert!(value[0] < 0.0 && value[1] > 0.0);
    }

    #[test]
    fn steps_per_epoch_rounds_up() {
        assert_eq!(steps_per_epoch(100, 96), 2);
        assert_eq!(steps_per_epoch(96, 96), 1);
        assert_eq!(steps_per_epoch(1, 96), 1);
    }
}
