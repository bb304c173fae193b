use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing mandatory column `{0}`")]
    MissingColumn(String),
    #[error("unknown split tag `{0}`")]
    UnknownSplit(String),
    #[error("post id `{0}` appears in more than one split")]
    DuplicateAcrossSplits(String),
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("constant feature `{0}` has zero standard deviation")]
    ConstantFeature(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("stats fingerprint mismatch: model expects `{expected}`, got `{actual}`")]
    FingerprintMismatch { expected: String, actual: String },
    #[error("stats were fitted on split `{0}`, refusing to apply (train-only contract)")]
    NonTrainFit(String),
    #[error("missing checkpoint for stream `{0}`")]
    MissingCheckpoint(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("checkpoint format error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss encountered")]
    NonFiniteLoss,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;
