//! Per-modality encoders: two toy text encoders, a toy image encoder, and
//! the metadata MLP. Each maps one preprocessed modality to a fixed-length
//! embedding.
//!
//! The three content streams share a common embedding width `D`; the
//! metadata stream always outputs six dimensions so the second fusion level
//! balances content and metadata.

use crate::data_model::Modality;
use crate::error::{Error, Result};
use crate::nn::{conv_out_len, relu, relu3, relu3_backward, relu_backward, Conv3x3s2, Dense, PTensor, Trainable};
use crate::preprocess::{PAD_ID, VOCAB_SIZE};
use ndarray::{Array1, Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Metadata branch output width; also the compression-stack target width.
pub const METADATA_DIM: usize = 6;

/// Default common content embedding width at desk scale.
pub const DESK_EMBED_DIM: usize = 32;
/// Full-scale default, matching the base-transformer width.
pub const FULL_EMBED_DIM: usize = 768;

pub const METADATA_HIDDEN: [usize; 3] = [60, 30, METADATA_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ToyText,
    ToyImage,
    PretrainedAdapter,
    MetadataMlp,
}

/// Architecture description of one stream: enough to rebuild shapes and to
/// count parameters, independent of any live parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub modality: Modality,
    pub output_dim: usize,
    pub encoder_kind: EncoderKind,
    /// (name, shape) per trainable tensor.
    pub parameter_shapes: Vec<(String, Vec<usize>)>,
}

/// Shapes and regularization for the metadata MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataEncoderSpec {
    pub input_dim: usize,
    pub layer_sizes: [usize; 3],
    pub l1_coeff: f64,
    pub l2_coeff: f64,
}

impl MetadataEncoderSpec {
    pub fn new(input_dim: usize) -> Self {
        MetadataEncoderSpec {
            input_dim,
            layer_sizes: METADATA_HIDDEN,
            l1_coeff: 1e-5,
            l2_coeff: 1e-5,
        }
    }
}

/// Total trainable scalar count for a list of tensor shapes.
pub fn count_parameters(shapes: &[(String, Vec<usize>)]) -> usize {
    shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Hashed embedding table, masked mean pool over non-pad tokens, affine
/// D -> D. Pad tokens contribute nothing; an all-pad input pools to the
/// zero vector, so the output is the projection bias.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub modality: Modality,
    pub embed: PTensor,
    pub proj: Dense,
    pub embed_dim: usize,
}

#[derive(Debug, Clone)]
pub struct TextCache {
    token_ids: Vec<u32>,
    pooled: Array1<f64>,
    nonpad: usize,
}

impl TextEncoder {
    pub fn new(modality: Modality, embed_dim: usize, rng: &mut impl Rng) -> Self {
        let mut embed = PTensor::zeros(&[VOCAB_SIZE as usize, embed_dim]);
        for v in embed.value.iter_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
        TextEncoder { modality, embed, proj: Dense::glorot(embed_dim, embed_dim, rng), embed_dim }
    }

    pub fn forward(&self, token_ids: &[u32], expected_len: usize) -> Result<(Array1<f64>, TextCache)> {
        if token_ids.len() != expected_len {
            return Err(Error::DimensionMismatch(format!(
                "{} tokens, stream expects {expected_len}",
                token_ids.len()
            )));
        }
        let table = self.embed.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut pooled = Array1::zeros(self.embed_dim);
        let mut nonpad = 0usize;
        for &id in token_ids {
            if id == PAD_ID {
                continue;
            }
            nonpad += 1;
            let row = table.row(id as usize);
            pooled += &row;
        }
        if nonpad > 0 {
            pooled /= nonpad as f64;
        }
        let out = self.proj.forward(pooled.view());
        Ok((out, TextCache { token_ids: token_ids.to_vec(), pooled, nonpad }))
    }

    pub fn backward(&mut self, cache: &TextCache, dout: &Array1<f64>) {
        let dpooled = self.proj.backward(cache.pooled.view(), dout.view());
        if cache.nonpad == 0 {
            return;
        }
        let scale = 1.0 / cache.nonpad as f64;
        let mut grad = self.embed.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
        for &id in &cache.token_ids {
            if id == PAD_ID {
                continue;
            }
            let mut row = grad.row_mut(id as usize);
            row.scaled_add(scale, &dpooled);
        }
    }

    pub fn spec(&self) -> StreamSpec {
        StreamSpec {
            modality: self.modality,
            output_dim: self.embed_dim,
            encoder_kind: EncoderKind::ToyText,
            parameter_shapes: vec![
                ("embed".into(), vec![VOCAB_SIZE as usize, self.embed_dim]),
                ("proj/w".into(), vec![self.embed_dim, self.embed_dim]),
                ("proj/b".into(), vec![self.embed_dim]),
            ],
        }
    }
}

impl Trainable for TextEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut PTensor)) {
        f(&format!("{prefix}embed"), &mut self.embed);
        self.proj.visit_params(&format!("{prefix}proj/"), f);
    }
}

/// Two stride-2 3x3 convolutions (8 then 16 channels, rectified linear),
/// global average pool, affine 16 -> D.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub conv1: Conv3x3s2,
    pub conv2: Conv3x3s2,
    pub proj: Dense,
    pub embed_dim: usize,
    pub resolution: usize,
}

pub const IMAGE_C1: usize = 8;
pub const IMAGE_C2: usize = 16;

#[derive(Debug, Clone)]
pub struct ImageCache {
    input: Array3<f64>,
    a1: Array3<f64>,
    a2: Array3<f64>,
    pooled: Array1<f64>,
}

impl ImageEncoder {
    pub fn new(embed_dim: usize, resolution: usize, rng: &mut impl Rng) -> Self {
        ImageEncoder {
            conv1: Conv3x3s2::glorot(3, IMAGE_C1, rng),
            conv2: Conv3x3s2::glorot(IMAGE_C1, IMAGE_C2, rng),
            proj: Dense::glorot(IMAGE_C2, embed_dim, rng),
            embed_dim,
            resolution,
        }
    }

    pub fn forward(&self, input: ArrayView3<f64>) -> Result<(Array1<f64>, ImageCache)> {
        let (c, h, w) = input.dim();
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::DimensionMismatch(format!(
                "image tensor {c}x{h}x{w}, encoder expects 3x{r}x{r}",
                r = self.resolution
            )));
        }
        let a1 = relu3(&self.conv1.forward(input));
        let a2 = relu3(&self.conv2.forward(a1.view()));
        let (c2, oh, ow) = a2.dim();
        let area = (oh * ow) as f64;
        let pooled = Array1::from_iter(
            (0..c2).map(|ch| a2.index_axis(ndarray::Axis(0), ch).sum() / area),
        );
        let out = self.proj.forward(pooled.view());
        Ok((out, ImageCache { input: input.to_owned(), a1, a2, pooled }))
    }

    pub fn backward(&mut self, cache: &ImageCache, dout: &Array1<f64>) {
        let dpooled = self.proj.backward(cache.pooled.view(), dout.view());
        let (c2, oh, ow) = cache.a2.dim();
        let area = (oh * ow) as f64;
        let mut da2 = Array3::zeros((c2, oh, ow));
        for ch in 0..c2 {
            let d = dpooled[ch] / area;
            da2.index_axis_mut(ndarray::Axis(0), ch).fill(d);
        }
        let da2 = relu3_backward(&cache.a2, &da2);
        let da1 = self.conv2.backward(cache.a1.view(), da2.view());
        let da1 = relu3_backward(&cache.a1, &da1);
        let _ = self.conv1.backward(cache.input.view(), da1.view());
    }

    pub fn spec(&self) -> StreamSpec {
        let o1 = conv_out_len(self.resolution);
        let _o2 = conv_out_len(o1);
        StreamSpec {
            modality: Modality::Image,
            output_dim: self.embed_dim,
            encoder_kind: EncoderKind::ToyImage,
            parameter_shapes: vec![
                ("conv1/w".into(), vec![IMAGE_C1, 3, 3, 3]),
                ("conv1/b".into(), vec![IMAGE_C1]),
                ("conv2/w".into(), vec![IMAGE_C2, IMAGE_C1, 3, 3]),
                ("conv2/b".into(), vec![IMAGE_C2]),
                ("proj/w".into(), vec![IMAGE_C2, self.embed_dim]),
                ("proj/b".into(), vec![self.embed_dim]),
            ],
        }
    }
}

impl Trainable for ImageEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut PTensor)) {
        self.conv1.visit_params(&format!("{prefix}conv1/"), f);
        self.conv2.visit_params(&format!("{prefix}conv2/"), f);
        self.proj.visit_params(&format!("{prefix}proj/"), f);
    }
}

/// Three dense layers (60, 30, 6 neurons) with rectified linear activation
/// after every layer, including the last: the six-dim output is an internal
/// representation, not logits.
#[derive(Debug, Clone)]
pub struct MetadataEncoder {
    pub layers: [Dense; 3],
    pub spec: MetadataEncoderSpec,
}

#[derive(Debug, Clone)]
pub struct MetadataCache {
    input: Array1<f64>,
    activations: [Array1<f64>; 3],
}

impl MetadataEncoder {
    pub fn new(spec: MetadataEncoderSpec, rng: &mut impl Rng) -> Self {
        let [h1, h2, h3] = spec.layer_sizes;
        MetadataEncoder {
            layers: [
                Dense::glorot(spec.input_dim, h1, rng),
                Dense::glorot(h1, h2, rng),
                Dense::glorot(h2, h3, rng),
            ],
            spec,
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Array1<f64>, MetadataCache)> {
        if input.len() != self.spec.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "metadata vector length {} vs encoder input {}",
                input.len(),
                self.spec.input_dim
            )));
        }
        let x = Array1::from_iter(input.iter().copied());
        let a1 = relu(&self.layers[0].forward(x.view()));
        let a2 = relu(&self.layers[1].forward(a1.view()));
        let a3 = relu(&self.layers[2].forward(a2.view()));
        Ok((a3.clone(), MetadataCache { input: x, activations: [a1, a2, a3] }))
    }

    pub fn backward(&mut self, cache: &MetadataCache, dout: &Array1<f64>) {
        let d3 = relu_backward(&cache.activations[2], dout);
        let d2 = self.layers[2].backward(cache.activations[1].view(), d3.view());
        let d2 = relu_backward(&cache.activations[1], &d2);
        let d1 = self.layers[1].backward(cache.activations[0].view(), d2.view());
        let d1 = relu_backward(&cache.activations[0], &d1);
        let _ = self.layers[0].backward(cache.input.view(), d1.view());
    }

    pub fn stream_spec(&self) -> StreamSpec {
        let [h1, h2, h3] = self.spec.layer_sizes;
        let d = self.spec.input_dim;
        StreamSpec {
            modality: Modality::Metadata,
            output_dim: h3,
            encoder_kind: EncoderKind::MetadataMlp,
            parameter_shapes: vec![
                ("l1/w".into(), vec![d, h1]),
                ("l1/b".into(), vec![h1]),
                ("l2/w".into(), vec![h1, h2]),
                ("l2/b".into(), vec![h2]),
                ("l3/w".into(), vec![h2, h3]),
                ("l3/b".into(), vec![h3]),
            ],
        }
    }
}

impl Trainable for MetadataEncoder {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut PTensor)) {
        self.layers[0].visit_params(&format!("{prefix}l1/"), f);
        self.layers[1].visit_params(&format!("{prefix}l2/"), f);
        self.layers[2].visit_params(&format!("{prefix}l3/"), f);
    }
}

/// Contract for plugging a pretrained backbone (transformer text encoder or
/// a large visual network) into a stream: the backbone emits its native
/// feature vector and a trainable projection maps it to the common width D.
/// Desk-scale profiles never instantiate this.
pub trait BackboneAdapter {
    fn native_dim(&self) -> usize;
    /// Preprocessed modality input, flattened per the backbone's own
    /// contract.
    fn features(&self, input: &[f64]) -> Array1<f64>;
}
