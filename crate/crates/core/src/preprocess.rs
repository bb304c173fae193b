//! Normalization statistics, fitted on the training split only and applied
//! identically to every split.
//!
//! The leakage guard is structural: every stats object records a fingerprint
//! of the split it was fitted on, and application refuses stats whose
//! fingerprint says they were fitted on anything but `train`.

use crate::data_model::RasterImage;
use crate::error::{Error, Result};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Hashed-vocabulary size of the desk-scale tokenizer: 2^15 ids, id 0 pad.
pub const VOCAB_SIZE: u32 = 1 << 15;
pub const PAD_ID: u32 = 0;

/// Lowercase, whitespace-split, hash each token into the fixed vocabulary.
/// Id 0 is reserved for padding and never produced for a real token.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.split_whitespace().map(|w| hash_token(&w.to_lowercase())).collect()
}

fn hash_token(token: &str) -> u32 {
    // FNV-1a, folded into [1, VOCAB_SIZE).
    let mut h: u64 = 0xcbf29ce484222325;
    for b in token.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100000001b3);
    }
    1 + (h % u64::from(VOCAB_SIZE - 1)) as u32
}

/// Fingerprint of a dataset split: `<split-name>:<sha256 prefix over ids>`.
pub fn split_fingerprint<'a>(split_name: &str, ids: impl Iterator<Item = &'a str>) -> String {
    let mut hasher = Sha256::new();
    for id in ids {
        hasher.update(id.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("{split_name}:{hex}")
}

fn require_train_fit(fingerprint: &str) -> Result<()> {
    match fingerprint.split(':').next() {
        Some("train") => Ok(()),
        Some(other) => Err(Error::NonTrainFit(other.to_string())),
        None => Err(Error::NonTrainFit(String::new())),
    }
}

/// Fixed token length for one textual stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextStats {
    pub truncation_length: usize,
    pub pad_token_id: u32,
    pub fingerprint: String,
}

/// Truncation length = ceil of the mean token count over the training split.
pub fn fit_text_stats(
    train_token_counts: impl IntoIterator<Item = usize>,
    fingerprint: &str,
) -> Result<TextStats> {
    let mut n: u64 = 0;
    let mut total: u64 = 0;
    for count in train_token_counts {
        n += 1;
        total += count as u64;
    }
    if n == 0 || total == 0 {
        return Err(Error::EmptyCorpus("no non-empty token sequences to fit text stats".into()));
    }
    let length = (total as f64 / n as f64).ceil() as usize;
    Ok(TextStats { truncation_length: length.max(1), pad_token_id: PAD_ID, fingerprint: fingerprint.to_string() })
}

/// Head-truncate or right-pad to exactly `truncation_length` ids.
pub fn truncate_pad(tokens: &[u32], stats: &TextStats) -> Vec<u32> {
    let l = stats.truncation_length;
    let mut out = Vec::with_capacity(l);
    out.extend(tokens.iter().take(l));
    out.resize(l, stats.pad_token_id);
    out
}

/// Per-channel means (in [0,1] units) and the square resolution images are
/// resized to before encoding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageStats {
    pub channel_means: [f64; 3],
    pub target_resolution: usize,
    pub fingerprint: String,
}

/// The two resolutions used at full scale.
pub const RESOLUTION_SMALL: usize = 256;
pub const RESOLUTION_LARGE: usize = 768;

/// Resize to a square `resolution` and scale to [0,1], channels-first.
/// Bilinear interpolation with antialiasing on downscale; a same-size input
/// skips resampling entirely.
pub fn resized_unit(image: &RasterImage, resolution: usize) -> Result<Array3<f64>> {
    if image.is_empty() {
        return Err(Error::Image("empty image".into()));
    }
    let mut out = Array3::zeros((3, resolution, resolution));
    if image.height == resolution && image.width == resolution {
        for y in 0..resolution {
            for x in 0..resolution {
                let base = (y * resolution + x) * 3;
                for c in 0..3 {
                    out[[c, y, x]] = f64::from(image.pixels[base + c]) / 255.0;
                }
            }
        }
        return Ok(out);
    }
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, image.pixels.clone())
        .ok_or_else(|| Error::Image("pixel buffer does not match dimensions".into()))?;
    let resized = image::imageops::resize(
        &buf,
        resolution as u32,
        resolution as u32,
        image::imageops::FilterType::Triangle,
    );
    for (x, y, px) in resized.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = f64::from(px.0[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Streaming per-channel mean over the training images, computed after
/// resizing and scaling to [0,1].
pub fn fit_image_stats<'a>(
    train_images: impl IntoIterator<Item = &'a RasterImage>,
    resolution: usize,
    fingerprint: &str,
) -> Result<ImageStats> {
    let mut sums = [0.0f64; 3];
    let mut count: u64 = 0;
    for img in train_images {
        let unit = resized_unit(img, resolution)?;
        for c in 0..3 {
            sums[c] += unit.index_axis(ndarray::Axis(0), c).mean().unwrap();
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptyCorpus("no training images to fit image stats".into()));
    }
    let channel_means = [sums[0] / count as f64, sums[1] / count as f64, sums[2] / count as f64];
    Ok(ImageStats { channel_means, target_resolution: resolution, fingerprint: fingerprint.to_string() })
}

/// Resize, scale to [0,1], subtract the per-channel training mean. Output
/// values lie in [-1, 1].
pub fn standardize_image(image: &RasterImage, stats: &ImageStats) -> Result<Array3<f64>> {
    let mut unit = resized_unit(image, stats.target_resolution)?;
    for c in 0..3 {
        let mean = stats.channel_means[c];
        unit.index_axis_mut(ndarray::Axis(0), c).mapv_inplace(|v| v - mean);
    }
    Ok(unit)
}

/// Population (mean, std) per z-standardized feature; `None` for
/// passthrough features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataStats {
    /// Serialized as tables with optional mean/std so passthrough entries
    /// survive TOML, which has no null.
    #[serde(with = "moments_serde")]
    pub moments: Vec<Option<(f64, f64)>>,
    pub fingerprint: String,
}

mod moments_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    struct Entry {
        #[serde(skip_serializing_if = "Option::is_none")]
        mean: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        std: Option<f64>,
    }

    pub fn serialize<S: Serializer>(
        moments: &[Option<(f64, f64)>],
        s: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<Entry> = moments
            .iter()
            .map(|m| Entry { mean: m.map(|(a, _)| a), std: m.map(|(_, b)| b) })
            .collect();
        entries.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> Result<Vec<Option<(f64, f64)>>, D::Error> {
        let entries = Vec::<Entry>::deserialize(d)?;
        entries
            .into_iter()
            .map(|e| match (e.mean, e.std) {
                (Some(a), Some(b)) => Ok(Some((a, b))),
                (None, None) => Ok(None),
                _ => Err(serde::de::Error::custom("moment entry needs both mean and std")),
            })
            .collect()
    }
}

use crate::data_model::MetadataSchema;

pub fn fit_metadata_stats(
    train_vectors: &[Vec<f64>],
    schema: &MetadataSchema,
    fingerprint: &str,
) -> Result<MetadataStats> {
    if train_vectors.len() < 2 {
        return Err(Error::EmptyCorpus("need at least 2 vectors to fit metadata stats".into()));
    }
    let dim = schema.len();
    for v in train_vectors {
        if v.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "metadata vector length {} vs schema {}",
                v.len(),
                dim
            )));
        }
    }
    let n = train_vectors.len() as f64;
    let mut moments = Vec::with_capacity(dim);
    for (j, feature) in schema.features.iter().enumerate() {
        if feature.passthrough {
            moments.push(None);
            continue;
        }
        let sum: f64 = train_vectors.iter().map(|v| v[j]).sum();
        let mean = sum / n;
        let ssq: f64 = train_vectors.iter().map(|v| (v[j] - mean).powi(2)).sum();
        let std = (ssq / n).sqrt();
        if std <= 0.0 {
            return Err(Error::ConstantFeature(feature.name.clone()));
        }
        moments.push(Some((mean, std)));
    }
    Ok(MetadataStats { moments, fingerprint: fingerprint.to_string() })
}

/// Passthrough features copied unchanged; others mapped to
/// `(x - mean) / std`.
pub fn apply_metadata_norm(
    vector: &[f64],
    stats: &MetadataStats,
    schema: &MetadataSchema,
) -> Result<Vec<f64>> {
    if vector.len() != schema.len() || stats.moments.len() != schema.len() {
        return Err(Error::DimensionMismatch(format!(
            "metadata vector length {} vs schema {}",
            vector.len(),
            schema.len()
        )));
    }
    require_train_fit(&stats.fingerprint)?;
    Ok(vector
        .iter()
        .zip(&stats.moments)
        .map(|(&x, m)| match m {
            Some((mean, std)) => (x - mean) / std,
            None => x,
        })
        .collect())
}

/// All fitted preprocessing statistics, bundled with the fingerprint of the
/// training split they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizerStats {
    pub version: u32,
    pub fingerprint: String,
    pub title: TextStats,
    pub comments: TextStats,
    pub image: ImageStats,
    pub metadata: MetadataStats,
}

pub const STATS_VERSION: u32 = 1;

/// Resize a raster to a square resolution in u8 space, bilinear with
/// antialiasing on downscale. A same-size input is returned as-is.
pub fn resize_raster(image: &RasterImage, resolution: usize) -> Result<RasterImage> {
    if image.is_empty() {
        return Err(Error::Image("empty image".into()));
    }
    if image.height == resolution && image.width == resolution {
        return Ok(image.clone());
    }
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, image.pixels.clone())
        .ok_or_else(|| Error::Image("pixel buffer does not match dimensions".into()))?;
    let resized = image::imageops::resize(
        &buf,
        resolution as u32,
        resolution as u32,
        image::imageops::FilterType::Triangle,
    );
    Ok(RasterImage::new(resolution, resolution, resized.into_raw()))
}

/// A record after preprocessing: fixed-length token ids, image resized to
/// the target resolution (standardized lazily at forward time), normalized
/// metadata, and the fingerprint of the stats that produced it.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub title_ids: Vec<u32>,
    pub comments_ids: Vec<u32>,
    pub image: RasterImage,
    pub metadata: Vec<f64>,
    pub label: u8,
    pub stats_fingerprint: String,
}

/// Apply fitted stats to one record.
pub fn prepare(
    record: &crate::data_model::PostingRecord,
    stats: &NormalizerStats,
    schema: &MetadataSchema,
) -> Result<PreparedSample> {
    stats.check_train_fit()?;
    Ok(PreparedSample {
        id: record.id.clone(),
        title_ids: truncate_pad(&tokenize(&record.title_text), &stats.title),
        comments_ids: truncate_pad(&tokenize(&record.comments_text), &stats.comments),
        image: resize_raster(&record.image, stats.image.target_resolution)?,
        metadata: apply_metadata_norm(&record.metadata, &stats.metadata, schema)?,
        label: record.label,
        stats_fingerprint: stats.fingerprint.clone(),
    })
}

/// Fit every normalizer on the training split and bundle the result.
pub fn fit_all(
    train: &[crate::data_model::PostingRecord],
    schema: &MetadataSchema,
    resolution: usize,
) -> Result<NormalizerStats> {
    let fingerprint = split_fingerprint("train", train.iter().map(|r| r.id.as_str()));
    let title = fit_text_stats(train.iter().map(|r| tokenize(&r.title_text).len()), &fingerprint)?;
    let comments =
        fit_text_stats(train.iter().map(|r| tokenize(&r.comments_text).len()), &fingerprint)?;
    let image = fit_image_stats(train.iter().map(|r| &r.image), resolution, &fingerprint)?;
    let vectors: Vec<Vec<f64>> = train.iter().map(|r| r.metadata.clone()).collect();
    let metadata = fit_metadata_stats(&vectors, schema, &fingerprint)?;
    Ok(NormalizerStats { version: STATS_VERSION, fingerprint, title, comments, image, metadata })
}

impl NormalizerStats {
    pub fn check_train_fit(&self) -> Result<()> {
        require_train_fit(&self.fingerprint)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let stats: NormalizerStats =
            toml::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if stats.version != STATS_VERSION {
            return Err(Error::Serde(format!("unsupported stats version {}", stats.version)));
        }
        Ok(stats)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::MetadataSchema;
    use proptest::prelude::*;

    fn fp() -> String {
        split_fingerprint("train", ["a", "b"].into_iter())
    }

    #[test]
    fn text_stats_ceil_of_mean() {
        assert_eq!(fit_text_stats([3usize, 5], &fp()).unwrap().truncation_length, 4);
        assert_eq!(fit_text_stats([4usize], &fp()).unwrap().truncation_length, 4);
        assert_eq!(fit_text_stats([1usize, 1, 2], &fp()).unwrap().truncation_length, 2);
        assert!(fit_text_stats(std::iter::empty(), &fp()).is_err());
    }

    #[test]
    fn truncate_pad_cases() {
        let stats = TextStats { truncation_length: 5, pad_token_id: 0, fingerprint: fp() };
        assert_eq!(truncate_pad(&[7, 8, 9], &stats), vec![7, 8, 9, 0, 0]);
        assert_eq!(truncate_pad(&[1, 2, 3, 4, 5, 6], &stats), vec![1, 2, 3, 4, 5]);
        let stats3 = TextStats { truncation_length: 3, ..stats };
        assert_eq!(truncate_pad(&[], &stats3), vec![0, 0, 0]);
    }

    proptest! {
        #[test]
        fn truncate_pad_idempotent(tokens in proptest::collection::vec(0u32..100, 0..20), l in 1usize..12) {
            let stats = TextStats { truncation_length: l, pad_token_id: 0, fingerprint: fp() };
            let once = truncate_pad(&tokens, &stats);
            prop_assert_eq!(truncate_pad(&once, &stats), once.clone());
            prop_assert_eq!(once.len(), l);
        }
    }

    #[test]
    fn tokenizer_never_emits_pad() {
        let ids = tokenize("The quick BROWN fox 123 !!");
        assert!(!ids.is_empty());
        assert!(ids.iter().all(|&id| id >= 1 && id < VOCAB_SIZE));
        // case-insensitive
        assert_eq!(tokenize("Fox"), tokenize("fox"));
    }

    #[test]
    fn image_stats_mean_cases() {
        use crate::data_model::RasterImage;
        let black = RasterImage::constant(8, 8, 0);
        let stats = fit_image_stats([&black], 8, &fp()).unwrap();
        assert_eq!(stats.channel_means, [0.0, 0.0, 0.0]);

        let white = RasterImage::constant(8, 8, 255);
        let stats = fit_image_stats([&white], 8, &fp()).unwrap();
        assert_eq!(stats.channel_means, [1.0, 1.0, 1.0]);

        let stats = fit_image_stats([&black, &white], 8, &fp()).unwrap();
        for c in 0..3 {
            assert!((stats.channel_means[c] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_image_cases() {
        use crate::data_model::RasterImage;
        let stats = ImageStats { channel_means: [0.5, 0.5, 0.5], target_resolution: 4, fingerprint: fp() };
        let img = RasterImage::constant(4, 4, 128);
        let out = standardize_image(&img, &stats).unwrap();
        let expected = 128.0 / 255.0 - 0.5;
        assert!(out.iter().all(|&v| (v - expected).abs() < 1e-12));

        let zero_stats = ImageStats { channel_means: [0.0, 0.0, 0.0], target_resolution: 4, fingerprint: fp() };
        let out = standardize_image(&RasterImage::constant(4, 4, 0), &zero_stats).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));

        let out = standardize_image(&RasterImage::constant(4, 4, 255), &stats).unwrap();
        assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn resize_downscale_averages() {
        use crate::data_model::RasterImage;
        // 2x2 image, one white pixel -> 1x1 resize should land strictly
        // between black and white
        let mut px = vec![0u8; 2 * 2 * 3];
        px[0] = 255;
        px[1] = 255;
        px[2] = 255;
        let img = RasterImage::new(2, 2, px);
        let unit = resized_unit(&img, 1).unwrap();
        assert!(unit[[0, 0, 0]] > 0.0 && unit[[0, 0, 0]] < 1.0);
    }

    #[test]
    fn metadata_stats_population_moments() {
        let schema = MetadataSchema {
            features: vec![crate::data_model::MetadataFeature { name: "f".into(), passthrough: false }],
        };
        let stats =
            fit_metadata_stats(&[vec![1.0], vec![2.0], vec![3.0]], &schema, &fp()).unwrap();
        let (mean, std) = stats.moments[0].unwrap();
        assert!((mean - 2.0).abs() < 1e-12);
        assert!((std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);

        let stats = fit_metadata_stats(&[vec![0.0], vec![2.0]], &schema, &fp()).unwrap();
        let (mean, std) = stats.moments[0].unwrap();
        assert!((mean - 1.0).abs() < 1e-12);
        assert!((std - 1.0).abs() < 1e-12);

        let err = fit_metadata_stats(&[vec![5.0], vec![5.0]], &schema, &fp()).unwrap_err();
        assert!(matches!(err, Error::ConstantFeature(name) if name == "f"));
    }

    #[test]
    fn metadata_norm_cases() {
        let schema = MetadataSchema::fakeddit_default();
        let stats = MetadataStats {
            moments: vec![None, Some((2.0, 1.0)), Some((10.0, 5.0))],
            fingerprint: fp(),
        };
        let out = apply_metadata_norm(&[0.87, 3.0, 10.0], &stats, &schema).unwrap();
        assert_eq!(out, vec![0.87, 1.0, 0.0]);

        let err = apply_metadata_norm(&[1.0], &stats, &schema).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
    }

    #[test]
    fn non_train_stats_rejected() {
        let schema = MetadataSchema::fakeddit_default();
        let stats = MetadataStats {
            moments: vec![None, Some((0.0, 1.0)), Some((0.0, 1.0))],
            fingerprint: split_fingerprint("test", ["x"].into_iter()),
        };
        let err = apply_metadata_norm(&[0.5, 0.0, 0.0], &stats, &schema).unwrap_err();
        assert!(matches!(err, Error::NonTrainFit(_)));
    }

    #[test]
    fn normalized_train_set_has_zero_mean_unit_std() {
        let schema = MetadataSchema::fakeddit_default();
        let vectors: Vec<Vec<f64>> = (0..100)
            .map(|i| vec![0.5, (i as f64) * 1.7 - 3.0, ((i * i) % 31) as f64])
            .collect();
        let stats = fit_metadata_stats(&vectors, &schema, &fp()).unwrap();
        let normed: Vec<Vec<f64>> =
            vectors.iter().map(|v| apply_metadata_norm(v, &stats, &schema).unwrap()).collect();
        for j in 1..3 {
            let n = normed.len() as f64;
            let mean: f64 = normed.iter().map(|v| v[j]).sum::<f64>() / n;
            let var: f64 = normed.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6, "mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn stats_roundtrip_toml() {
        let stats = NormalizerStats {
            version: STATS_VERSION,
            fingerprint: fp(),
            title: TextStats { truncation_length: 7, pad_token_id: 0, fingerprint: fp() },
            comments: TextStats { truncation_length: 12, pad_token_id: 0, fingerprint: fp() },
            image: ImageStats { channel_means: [0.1, 0.2, 0.3], target_resolution: 32, fingerprint: fp() },
            metadata: MetadataStats { moments: vec![None, Some((1.0, 2.0))], fingerprint: fp() },
        };
        let text = stats.to_toml().unwrap();
        let back = NormalizerStats::from_toml(&text).unwrap();
        assert_eq!(back, stats);
    }
}
