//! Two-level hierarchical fusion and the assembled multimodal model.
//!
//! Level 1 combines the equal-length content embeddings (title, comments,
//! image — in that fixed order) by concatenation, element-wise maximum,
//! average, or sum. A stack of dense layers compresses the result to six
//! dimensions; level 2 concatenates it with the six-dimensional metadata
//! embedding; a two-neuron softmax head makes the decision.

use crate::data_model::{Modality, ModalityMask, Prediction};
use crate::encoders::{
    ImageCache, ImageEncoder, MetadataCache, MetadataEncoder, MetadataEncoderSpec, StreamSpec,
    TextCache, TextEncoder, METADATA_DIM,
};
use crate::error::{Error, Result};
use crate::nn::{dropout_mask, relu, relu_backward, softmax, softmax_ce_dlogits, Dense, PTensor, Trainable};
use crate::preprocess::NormalizerStats;
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Concat,
    Max,
    Avg,
    Sum,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] =
        [FusionStrategy::Concat, FusionStrategy::Max, FusionStrategy::Avg, FusionStrategy::Sum];

    pub fn parse(s: &str) -> Option<FusionStrategy> {
        match s {
            "concat" => Some(FusionStrategy::Concat),
            "max" => Some(FusionStrategy::Max),
            "avg" => Some(FusionStrategy::Avg),
            "sum" => Some(FusionStrategy::Sum),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionStrategy::Concat => "concat",
            FusionStrategy::Max => "max",
            FusionStrategy::Avg => "avg",
            FusionStrategy::Sum => "sum",
        }
    }

    /// Label used in the rendered ablation table.
    pub fn table_label(&self) -> &'static str {
        match self {
            FusionStrategy::Concat => "Concat.",
            FusionStrategy::Max => "Maximum",
            FusionStrategy::Avg => "Average",
            FusionStrategy::Sum => "Sum",
        }
    }
}

/// Level-1 strategy, common content width, compression-stack widths (last
/// entry must be 6), and the dropout rate applied after each fusion level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    pub embed_dim: usize,
    pub compression_sizes: Vec<usize>,
    pub dropout_rate: f64,
}

impl FusionConfig {
    /// Desk-scale default: [128, 6] after concatenation, [64, 6] after the
    /// element-wise strategies.
    pub fn desk(strategy: FusionStrategy) -> Self {
        let compression_sizes = match strategy {
            FusionStrategy::Concat => vec![128, METADATA_DIM],
            _ => vec![64, METADATA_DIM],
        };
        FusionConfig {
            strategy,
            embed_dim: crate::encoders::DESK_EMBED_DIM,
            compression_sizes,
            dropout_rate: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.compression_sizes.last() != Some(&METADATA_DIM) {
            return Err(Error::InvalidConfig(format!(
                "compression_sizes must end in {METADATA_DIM}, got {:?}",
                self.compression_sizes
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig("dropout_rate must lie in [0,1)".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Level-1 fusion over k equal-length embeddings. With k = 1 every strategy
/// is the identity; concat is order-sensitive, the element-wise strategies
/// are permutation invariant.
pub fn fuse_level1(embeddings: &[Array1<f64>], strategy: FusionStrategy) -> Result<Array1<f64>> {
    Ok(fuse_level1_cached(embeddings, strategy)?.0)
}

/// As `fuse_level1`, additionally returning the per-coordinate winner index
/// for the max strategy (needed by backward).
fn fuse_level1_cached(
    embeddings: &[Array1<f64>],
    strategy: FusionStrategy,
) -> Result<(Array1<f64>, Option<Vec<usize>>)> {
    let k = embeddings.len();
    if k == 0 {
        return Err(Error::DimensionMismatch("level-1 fusion needs at least one embedding".into()));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(Error::DimensionMismatch("level-1 embeddings differ in length".into()));
    }
    match strategy {
        FusionStrategy::Concat => {
            let mut out = Array1::zeros(k * d);
            for (i, e) in embeddings.iter().enumerate() {
                out.slice_mut(ndarray::s![i * d..(i + 1) * d]).assign(e);
            }
            Ok((out, None))
        }
        FusionStrategy::Sum | FusionStrategy::Avg => {
            let mut out = embeddings[0].clone();
            for e in &embeddings[1..] {
                out += e;
            }
            if strategy == FusionStrategy::Avg {
                out /= k as f64;
            }
            Ok((out, None))
        }
        FusionStrategy::Max => {
            let mut out = embeddings[0].clone();
            let mut winners = vec![0usize; d];
            for (i, e) in embeddings.iter().enumerate().skip(1) {
                for j in 0..d {
                    if e[j] > out[j] {
                        out[j] = e[j];
                        winners[j] = i;
                    }
                }
            }
            Ok((out, Some(winners)))
        }
    }
}

/// Distribute the fused gradient back to the k input embeddings.
fn unfuse_level1(
    dfused: &Array1<f64>,
    k: usize,
    d: usize,
    strategy: FusionStrategy,
    winners: Option<&[usize]>,
) -> Vec<Array1<f64>> {
    match strategy {
        FusionStrategy::Concat => (0..k)
            .map(|i| dfused.slice(ndarray::s![i * d..(i + 1) * d]).to_owned())
            .collect(),
        FusionStrategy::Sum => (0..k).map(|_| dfused.clone()).collect(),
        FusionStrategy::Avg => (0..k).map(|_| dfused / k as f64).collect(),
        FusionStrategy::Max => {
            let winners = winners.expect("max backward needs winner indices");
            let mut grads = vec![Array1::zeros(d); k];
            for j in 0..d {
                grads[winners[j]][j] = dfused[j];
            }
            grads
        }
    }
}

/// Level-2 fusion: plain concatenation `[content; metadata]`.
pub fn fuse_level2(content: &Array1<f64>, metadata: &Array1<f64>) -> Array1<f64> {
    let mut out = Array1::zeros(content.len() + metadata.len());
    out.slice_mut(ndarray::s![..content.len()]).assign(content);
    out.slice_mut(ndarray::s![content.len()..]).assign(metadata);
    out
}

/// Softmax over the head's affine output.
pub fn classify(vector: &Array1<f64>, head: &Dense) -> Prediction {
    let logits = head.forward(vector.view());
    let p = softmax(logits.view());
    Prediction { probabilities: [p[0], p[1]] }
}

/// Serializable description of an assembled model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mask: ModalityMask,
    pub streams: Vec<StreamSpec>,
    pub fusion: FusionConfig,
    pub compression_shapes: Vec<(String, Vec<usize>)>,
    pub head_input: usize,
}

impl ModelSpec {
    pub fn parameter_count(&self) -> usize {
        let stream: usize =
            self.streams.iter().map(|s| crate::encoders::count_parameters(&s.parameter_shapes)).sum();
        let comp = crate::encoders::count_parameters(&self.compression_shapes);
        stream + comp + self.head_input * 2 + 2
    }
}

/// Per-sample forward cache carrying every intermediate needed by backward.
pub struct SampleCache {
    title: Option<TextCache>,
    comments: Option<TextCache>,
    image: Option<ImageCache>,
    metadata: Option<MetadataCache>,
    /// content embeddings in stream order (title, comments, image)
    k: usize,
    d: usize,
    winners: Option<Vec<usize>>,
    fused_dropped: Option<Array1<f64>>,
    drop1: Option<Array1<f64>>,
    /// input to each compression layer (first = dropped fused vector)
    comp_inputs: Vec<Array1<f64>>,
    /// post-relu output of each compression layer
    comp_outputs: Vec<Array1<f64>>,
    head_input: Array1<f64>,
    drop2: Option<Array1<f64>>,
    pub probs: Array1<f64>,
}

/// The assembled four-stream model under a modality mask. Streams absent
/// from the mask are not instantiated.
pub struct FusionModel {
    pub mask: ModalityMask,
    pub config: FusionConfig,
    pub title: Option<TextEncoder>,
    pub comments: Option<TextEncoder>,
    pub image: Option<ImageEncoder>,
    pub metadata: Option<MetadataEncoder>,
    pub compression: Vec<Dense>,
    pub head: Dense,
    pub stats: NormalizerStats,
    /// In the frozen-stream regime backward never touches stream encoders.
    pub frozen_streams: bool,
}

impl FusionModel {
    /// Build a model for the mask: content streams feed level-1 fusion and
    /// the compression stack; the metadata branch joins at level 2. A
    /// metadata-only mask puts the head directly on the six-dim embedding.
    pub fn assemble(
        mask: ModalityMask,
        config: FusionConfig,
        meta_spec: MetadataEncoderSpec,
        stats: NormalizerStats,
        seed: u64,
    ) -> Result<FusionModel> {
        if !mask.any() {
            return Err(Error::InvalidConfig("modality mask selects nothing".into()));
        }
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let title = mask
            .use_title
            .then(|| TextEncoder::new(Modality::Title, d, &mut rng));
        let comments = mask
            .use_comments
            .then(|| TextEncoder::new(Modality::Comments, d, &mut rng));
        let image = mask
            .use_image
            .then(|| ImageEncoder::new(d, stats.image.target_resolution, &mut rng));
        let metadata = mask.use_metadata.then(|| MetadataEncoder::new(meta_spec, &mut rng));

        let k = mask.content_count();
        let mut compression = Vec::new();
        if k > 0 {
            let mut input = match config.strategy {
                FusionStrategy::Concat => k * d,
                _ => d,
            };
            for &width in &config.compression_sizes {
                compression.push(Dense::glorot(input, width, &mut rng));
                input = width;
            }
        }
        let head_input = match (k > 0, mask.use_metadata) {
            (true, true) => 2 * METADATA_DIM,
            (true, false) | (false, true) => METADATA_DIM,
            (false, false) => unreachable!("mask.any() checked above"),
        };
        let head = Dense::glorot(head_input, 2, &mut rng);
        Ok(FusionModel {
            mask,
            config,
            title,
            comments,
            image,
            metadata,
            compression,
            head,
            stats,
            frozen_streams: false,
        })
    }

    pub fn spec(&self) -> ModelSpec {
        let mut streams = Vec::new();
        if let Some(e) = &self.title {
            streams.push(e.spec());
        }
        if let Some(e) = &self.comments {
            streams.push(e.spec());
        }
        if let Some(e) = &self.image {
            streams.push(e.spec());
        }
        if let Some(e) = &self.metadata {
            streams.push(e.stream_spec());
        }
        let compression_shapes = self
            .compression
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                vec![
                    (format!("compression/{i}/w"), vec![l.input_dim(), l.output_dim()]),
                    (format!("compression/{i}/b"), vec![l.output_dim()]),
                ]
            })
            .collect();
        ModelSpec {
            mask: self.mask,
            streams,
            fusion: self.config.clone(),
            compression_shapes,
            head_input: self.head.input_dim(),
        }
    }

    fn check_fingerprint(&self, sample_fp: &str) -> Result<()> {
        if sample_fp != self.stats.fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: self.stats.fingerprint.clone(),
                actual: sample_fp.to_string(),
            });
        }
        Ok(())
    }

    /// Forward one preprocessed sample. `dropout_rng` enables training-mode
    /// dropout; `None` is deterministic inference.
    pub fn forward_sample(
        &self,
        sample: &crate::preprocess::PreparedSample,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Prediction, SampleCache)> {
        self.check_fingerprint(&sample.stats_fingerprint)?;
        let d = self.config.embed_dim;
        let mut embeddings: Vec<Array1<f64>> = Vec::new();
        let mut title_cache = None;
        let mut comments_cache = None;
        let mut image_cache = None;
        if let Some(enc) = &self.title {
            let (e, c) = enc.forward(&sample.title_ids, self.stats.title.truncation_length)?;
            embeddings.push(e);
            title_cache = Some(c);
        }
        if let Some(enc) = &self.comments {
            let (e, c) = enc.forward(&sample.comments_ids, self.stats.comments.truncation_length)?;
            embeddings.push(e);
            comments_cache = Some(c);
        }
        if let Some(enc) = &self.image {
            let tensor = crate::preprocess::standardize_image(&sample.image, &self.stats.image)?;
            let (e, c) = enc.forward(tensor.view())?;
            embeddings.push(e);
            image_cache = Some(c);
        }
        let k = embeddings.len();

        let mut metadata_cache = None;
        let meta_embedding = match &self.metadata {
            Some(enc) => {
                let (e, c) = enc.forward(&sample.metadata)?;
                metadata_cache = Some(c);
                Some(e)
            }
            None => None,
        };

        let rate = self.config.dropout_rate;
        let (content6, fused_dropped, drop1, winners, comp_inputs, comp_outputs) = if k > 0 {
            let (fused, winners) = fuse_level1_cached(&embeddings, self.config.strategy)?;
            let drop1 = dropout_rng
                .as_deref_mut()
                .map(|rng| dropout_mask(fused.len(), rate, rng));
            let dropped = match &drop1 {
                Some(mask) => &fused * mask,
                None => fused,
            };
            let mut comp_inputs = Vec::with_capacity(self.compression.len());
            let mut comp_outputs = Vec::with_capacity(self.compression.len());
            let mut x = dropped.clone();
            for layer in &self.compression {
                comp_inputs.push(x.clone());
                let y = relu(&layer.forward(x.view()));
                comp_outputs.push(y.clone());
                x = y;
            }
            (Some(x), Some(dropped), drop1, winners, comp_inputs, comp_outputs)
        } else {
            (None, None, None, None, Vec::new(), Vec::new())
        };

        let raw_head_input = match (&content6, &meta_embedding) {
            (Some(c), Some(m)) => fuse_level2(c, m),
            (Some(c), None) => c.clone(),
            (None, Some(m)) => m.clone(),
            (None, None) => unreachable!(),
        };
        // dropout after the second fusion level only when both halves exist
        let drop2 = match (&content6, &meta_embedding) {
            (Some(_), Some(_)) => dropout_rng
                .as_deref_mut()
                .map(|rng| dropout_mask(raw_head_input.len(), rate, rng)),
            _ => None,
        };
        let head_input = match &drop2 {
            Some(mask) => &raw_head_input * mask,
            None => raw_head_input,
        };

        let logits = self.head.forward(head_input.view());
        let probs = softmax(logits.view());
        let prediction = Prediction { probabilities: [probs[0], probs[1]] };
        Ok((
            prediction,
            SampleCache {
                title: title_cache,
                comments: comments_cache,
                image: image_cache,
                metadata: metadata_cache,
                k,
                d,
                winners,
                fused_dropped,
                drop1,
                comp_inputs,
                comp_outputs,
                head_input,
                drop2,
                probs,
            },
        ))
    }

    /// Backward from the cross-entropy gradient for one sample, with the
    /// per-sample weight (typically 1/batch). Gradients accumulate.
    pub fn backward_sample(&mut self, cache: &SampleCache, label: u8, weight: f64) {
        let dlogits = softmax_ce_dlogits(&cache.probs, label as usize, weight);
        let mut dhead_in = self.head.backward(cache.head_input.view(), dlogits.view());
        if let Some(mask) = &cache.drop2 {
            dhead_in *= mask;
        }

        let (dcontent, dmeta): (Option<Array1<f64>>, Option<Array1<f64>>) =
            match (cache.k > 0, self.metadata.is_some()) {
                (true, true) => (
                    Some(dhead_in.slice(ndarray::s![..METADATA_DIM]).to_owned()),
                    Some(dhead_in.slice(ndarray::s![METADATA_DIM..]).to_owned()),
                ),
                (true, false) => (Some(dhead_in), None),
                (false, true) => (None, Some(dhead_in)),
                (false, false) => unreachable!(),
            };

        if !self.frozen_streams {
            if let (Some(dmeta), Some(enc), Some(c)) =
                (dmeta, self.metadata.as_mut(), cache.metadata.as_ref())
            {
                enc.backward(c, &dmeta);
            }
        }

        if let Some(mut dx) = dcontent {
            for i in (0..self.compression.len()).rev() {
                let dy = relu_backward(&cache.comp_outputs[i], &dx);
                dx = self.compression[i].backward(cache.comp_inputs[i].view(), dy.view());
            }
            if let Some(mask) = &cache.drop1 {
                dx *= mask;
            }
            debug_assert!(cache.fused_dropped.is_some());
            if self.frozen_streams {
                return;
            }
            let grads = unfuse_level1(
                &dx,
                cache.k,
                cache.d,
                self.config.strategy,
                cache.winners.as_deref(),
            );
            let mut it = grads.into_iter();
            if let (Some(enc), Some(c)) = (self.title.as_mut(), cache.title.as_ref()) {
                enc.backward(c, &it.next().expect("title grad"));
            }
            if let (Some(enc), Some(c)) = (self.comments.as_mut(), cache.comments.as_ref()) {
                enc.backward(c, &it.next().expect("comments grad"));
            }
            if let (Some(enc), Some(c)) = (self.image.as_mut(), cache.image.as_ref()) {
                enc.backward(c, &it.next().expect("image grad"));
            }
        }
    }

    /// Inference-mode forward over a batch; per-record probabilities.
    pub fn forward_batch(
        &self,
        batch: &[crate::preprocess::PreparedSample],
    ) -> Result<Vec<Prediction>> {
        batch.iter().map(|s| Ok(self.forward_sample(s, None)?.0)).collect()
    }

    /// Visit only the fusion-side parameters (compression + head); this is
    /// the trainable set in the frozen-stream regime.
    pub fn visit_fusion_params(&mut self, f: &mut dyn FnMut(&str, &mut PTensor)) {
        for (i, layer) in self.compression.iter_mut().enumerate() {
            layer.visit_params(&format!("compression/{i}/"), f);
        }
        self.head.visit_params("head/", f);
    }

    /// Visit the stream encoder parameters only.
    pub fn visit_stream_params(&mut self, f: &mut dyn FnMut(&str, &mut PTensor)) {
        if let Some(e) = self.title.as_mut() {
            e.visit_params("title/", f);
        }
        if let Some(e) = self.comments.as_mut() {
            e.visit_params("comments/", f);
        }
        if let Some(e) = self.image.as_mut() {
            e.visit_params("image/", f);
        }
        if let Some(e) = self.metadata.as_mut() {
            e.visit_params("metadata/", f);
        }
    }
}

impl Trainable for FusionModel {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut PTensor)) {
        debug_assert!(prefix.is_empty(), "FusionModel is always a visitation root");
        self.visit_stream_params(f);
        self.visit_fusion_params(f);
    }
}
