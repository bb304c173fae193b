//! Shared domain types. No learning logic lives here.

use serde::{Deserialize, Serialize};

/// Dataset partition a record belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn parse(tag: &str) -> Option<Split> {
        match tag {
            "train" => Some(Split::Train),
            "validation" | "val" | "valid" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// Binary ground truth: 0 = non-fake, 1 = fake.
pub type Label = u8;

/// Decoded raster image, row-major H x W with 3 channel bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    pub height: usize,
    pub width: usize,
    /// len = height * width * 3, interleaved RGB.
    pub pixels: Vec<u8>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), height * width * 3, "pixel buffer size");
        RasterImage { height, width, pixels }
    }

    pub fn constant(height: usize, width: usize, value: u8) -> Self {
        RasterImage { height, width, pixels: vec![value; height * width * 3] }
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

/// One social-media posting with all four modalities.
#[derive(Debug, Clone)]
pub struct PostingRecord {
    pub id: String,
    pub title_text: String,
    /// All comments of the post, concatenated in source order, single-space
    /// separated. Empty when the post has no comments.
    pub comments_text: String,
    pub image: RasterImage,
    pub metadata: Vec<f64>,
    pub label: Label,
    pub split: Split,
}

/// One metadata feature. Passthrough features are already in [0,1] and skip
/// z-standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataFeature {
    pub name: String,
    #[serde(default)]
    pub passthrough: bool,
}

/// Ordered metadata feature layout shared by ingestion, normalization, and
/// the metadata encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetadataSchema {
    pub features: Vec<MetadataFeature>,
}

impl MetadataSchema {
    /// Fakeddit-style default: upvote ratio is already in [0,1]; score and
    /// comment count get z-standardized.
    pub fn fakeddit_default() -> Self {
        MetadataSchema {
            features: vec![
                MetadataFeature { name: "upvote_ratio".into(), passthrough: true },
                MetadataFeature { name: "score".into(), passthrough: false },
                MetadataFeature { name: "num_comments".into(), passthrough: false },
            ],
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_names(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(|f| f.name.as_str())
    }
}

/// Which modalities an assembled model consumes. At least one flag must be
/// set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask {
    pub use_title: bool,
    pub use_comments: bool,
    pub use_image: bool,
    pub use_metadata: bool,
}

impl ModalityMask {
    pub fn full() -> Self {
        ModalityMask { use_title: true, use_comments: true, use_image: true, use_metadata: true }
    }

    pub fn only(modality: Modality) -> Self {
        let mut m =
            ModalityMask { use_title: false, use_comments: false, use_image: false, use_metadata: false };
        match modality {
            Modality::Title => m.use_title = true,
            Modality::Comments => m.use_comments = true,
            Modality::Image => m.use_image = true,
            Modality::Metadata => m.use_metadata = true,
        }
        m
    }

    pub fn any(&self) -> bool {
        self.use_title || self.use_comments || self.use_image || self.use_metadata
    }

    /// Number of content streams (title, comments, image) present.
    pub fn content_count(&self) -> usize {
        usize::from(self.use_title) + usize::from(self.use_comments) + usize::from(self.use_image)
    }
}

/// One of the four input streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Title,
    Comments,
    Image,
    Metadata,
}

impl Modality {
    pub const ALL: [Modality; 4] =
        [Modality::Title, Modality::Comments, Modality::Image, Modality::Metadata];

    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Title => "title",
            Modality::Comments => "comments",
            Modality::Image => "image",
            Modality::Metadata => "metadata",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s {
            "title" => Some(Modality::Title),
            "comments" => Some(Modality::Comments),
            "image" => Some(Modality::Image),
            "metadata" => Some(Modality::Metadata),
            _ => None,
        }
    }
}

/// Softmax output of the classifier head: two non-negative probabilities
/// summing to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub probabilities: [f64; 2],
}

impl Prediction {
    /// Predicted class, ties broken toward class 0.
    pub fn argmax(&self) -> Label {
        if self.probabilities[1] > self.probabilities[0] {
            1
        } else {
            0
        }
    }
}

/// Check a record against the domain invariants. Violations are data, not
/// errors; an empty list means the record is model-ready.
pub fn validate_record(record: &PostingRecord, schema: &MetadataSchema) -> Vec<String> {
    let mut violations = Vec::new();
    if record.title_text.trim().is_empty() {
        violations.push("title_text empty".to_string());
    }
    if record.comments_text.trim().is_empty() {
        violations.push("comments_text empty".to_string());
    }
    if record.image.is_empty() {
        violations.push("image missing".to_string());
    }
    if record.label > 1 {
        violations.push("label not binary".to_string());
    }
    if record.metadata.len() != schema.len() {
        violations.push(format!(
            "metadata length {} does not match schema length {}",
            record.metadata.len(),
            schema.len()
        ));
    } else {
        for (value, feature) in record.metadata.iter().zip(&schema.features) {
            if !value.is_finite() {
                violations.push(format!("metadata feature `{}` not finite", feature.name));
            } else if feature.passthrough && !(0.0..=1.0).contains(value) {
                violations.push(format!(
                    "passthrough feature `{}` = {} outside [0,1]",
                    feature.name, value
                ));
            }
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;

    fn well_formed() -> PostingRecord {
        PostingRecord {
            id: "p1".into(),
            title_text: "breaking story".into(),
            comments_text: "a b".into(),
            image: RasterImage::constant(4, 4, 7),
            metadata: vec![0.5, 12.0, 3.0],
            label: 0,
            split: Split::Train,
        }
    }

    #[test]
    fn well_formed_record_has_no_violations() {
        let schema = MetadataSchema::fakeddit_default();
        assert!(validate_record(&well_formed(), &schema).is_empty());
    }

    #[test]
    fn empty_comments_flagged() {
        let schema = MetadataSchema::fakeddit_default();
        let mut r = well_formed();
        r.comments_text = String::new();
        assert_eq!(validate_record(&r, &schema), vec!["comments_text empty".to_string()]);
    }

    #[test]
    fn non_binary_label_flagged() {
        let schema = MetadataSchema::fakeddit_default();
        let mut r = well_formed();
        r.label = 2;
        assert_eq!(validate_record(&r, &schema), vec!["label not binary".to_string()]);
    }

    #[test]
    fn passthrough_out_of_range_flagged() {
        let schema = MetadataSchema::fakeddit_default();
        let mut r = well_formed();
        r.metadata[0] = 1.5;
        let v = validate_record(&r, &schema);
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("upvote_ratio"));
    }

    #[test]
    fn validate_is_pure() {
        let schema = MetadataSchema::fakeddit_default();
        let mut r = well_formed();
        r.title_text = String::new();
        r.label = 3;
        assert_eq!(validate_record(&r, &schema), validate_record(&r, &schema));
    }

    #[test]
    fn mask_content_count() {
        assert_eq!(ModalityMask::full().content_count(), 3);
        assert_eq!(ModalityMask::only(Modality::Metadata).content_count(), 0);
        assert!(ModalityMask::only(Modality::Metadata).any());
    }

    #[test]
    fn prediction_tie_breaks_toward_class_zero() {
        let p = Prediction { probabilities: [0.5, 0.5] };
        assert_eq!(p.argmax(), 0);
    }
}
