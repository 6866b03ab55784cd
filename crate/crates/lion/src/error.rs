//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum LionError {
    /// Shape mismatch between tensors, with both shapes for context.
    #[error("dimension mismatch in {ctx}: lhs {lhs:?}, rhs {rhs:?}")]
    DimensionMismatch {
        ctx: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Operation on an empty tensor.
    #[error("empty tensor in {0}")]
    EmptyTensor(&'static str),

    /// Cosine similarity against an all-zero vector is undefined.
    #[error("undefined similarity: {0} vector has zero norm")]
    UndefinedSimilarity(&'static str),

    /// Non-finite input where finite values are required.
    #[error("NaN input in {0}")]
    NanInput(&'static str),

    /// Backward was asked to start from a non-scalar value.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// Adapter references an attachment point the model does not have,
    /// or the model expects points the adapter set is missing.
    #[error("attachment error: {0}")]
    Attachment(String),

    /// Invalid model, adapter, or run configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Adapter sets disagree on attachment points or shapes during fusion.
    #[error("fusion error: {0}")]
    Fusion(String),

    /// An adapter delta has zero norm where a nonzero norm is required.
    #[error("degenerate adapter: zero-norm delta at attachment point {point}")]
    DegenerateAdapter { point: String },

    /// Scaling value outside the sampler's valid range.
    #[error("scaling value {value} outside [{min}, 1]")]
    ScalingRange { value: f64, min: f64 },

    /// Pearson correlation over a constant sequence.
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(&'static str),

    /// Intensity centroid of a blank frame.
    #[error("undefined centroid: frame {frame} has zero total intensity")]
    UndefinedCentroid { frame: usize },

    /// Trajectory smoothness over a path with no nonzero displacement steps.
    #[error("undefined smoothness: all displacement steps are zero")]
    UndefinedSmoothness,

    /// Training loss diverged.
    #[error("training failure: loss {loss} exceeded 10x initial {initial} for {steps} consecutive steps")]
    TrainingDiverged { loss: f64, initial: f64, steps: usize },

    /// Weight-file magic bytes are wrong.
    #[error("weight file magic mismatch: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: String, found: String },

    /// Weight-file container version is unsupported.
    #[error("weight file version mismatch: expected {expected:?}, found {found:?}")]
    VersionMismatch { expected: String, found: String },

    /// Weight file ends before its declared contents.
    #[error("weight file truncated: {0}")]
    Truncated(String),

    /// Weight-file checksum does not match the stored body.
    #[error("weight file checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    /// Weight-file header is not valid JSON or violates the schema.
    #[error("weight file header parse error: {0}")]
    HeaderParse(String),

    /// Requested section or tensor is absent from a weight file.
    #[error("weight file missing entry: {0}")]
    MissingEntry(String),

    /// Evaluation could not produce a defined result.
    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LionError>;
