use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor data length {len} does not match shape {shape:?}")]
    TensorLength { shape: Vec<usize>, len: usize },

    #[error("shape mismatch at layer {layer}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("layer {layer}: backward called without cached forward activations")]
    MissingCache { layer: usize },

    #[error("unsupported layer {index} ({kind}): {reason}")]
    UnsupportedLayer {
        index: usize,
        kind: &'static str,
        reason: &'static str,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Diverged { epoch: usize },

    #[error("classifier produced no spikes after epoch {epoch}; hyperparameters are degenerate")]
    SilentClassifier { epoch: usize },

    #[error("negative firing rate {value} at index {index}")]
    NegativeRate { index: usize, value: f32 },

    #[error("class '{class}' has {count} samples, too few to appear in every split")]
    ClassTooSmall { class: String, count: usize },

    #[error("malformed model file: {0}")]
    Format(String),

    #[error("model file version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("run is incomplete, missing: {}", .0.join(", "))]
    MissingArtifacts(Vec<String>),

    #[error("all {trials} search trials were degenerate")]
    NoViableTrial { trials: usize },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
