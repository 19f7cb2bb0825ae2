//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A prompt cannot drive the similarity loss without at least one
    /// adversarial segment.
    #[error("prompt contains no adversarial-tagged segment")]
    NoAdversarialSegment,

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("invalid image: {0}")]
    InvalidImage(String),

    /// Detector produced no proposals at all.
    #[error("proposal set is empty")]
    EmptyProposalSet,

    /// Crop box does not cover any whole pixel after clipping.
    #[error("crop region has zero area after clipping to image bounds")]
    DegenerateCrop,

    #[error("placement exceeds background bounds: {0}")]
    PlacementOutOfBounds(String),

    #[error("backend failure: {0}")]
    BackendFailure(String),

    /// Average precision is undefined without ground truth.
    #[error("no ground-truth boxes supplied")]
    NoGroundTruth,

    #[error("embedding has zero norm")]
    ZeroNormEmbedding,

    /// Top-k filtering left nothing to average the detection loss over.
    /// The optimizer substitutes its maximal-miss surrogate instead.
    #[error("filtered proposal set is empty")]
    EmptyFilteredSet,

    #[error("diffusion chain too short: need T >= 2, got T = {0}")]
    ChainTooShort(usize),

    #[error("inversion diverged at step {step}: reconstruction mse {mse:.3e} stopped improving")]
    InversionDiverged { step: usize, mse: f64 },

    #[error("background corpus is empty")]
    EmptyCorpus,

    #[error("invalid defense strength: {0}")]
    InvalidStrength(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("manifest self-audit failed: {0}")]
    ManifestAudit(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for configuration/validation
    /// problems the user can fix by editing inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidStrength(_) => 2,
            _ => 1,
        }
    }
}
