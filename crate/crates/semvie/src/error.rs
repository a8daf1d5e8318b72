//! Error type shared across the crate.

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Array shapes are incompatible for the requested operation.
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    /// A value became non-finite where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// An index is outside the valid range of its container.
    #[error("index out of range: {0}")]
    Index(String),
    /// A vocabulary id lies outside the expected id range.
    #[error("id out of range: {0}")]
    Range(String),
    /// Image or grid dimensions do not line up with the patch geometry.
    #[error("geometry error: {0}")]
    Geometry(String),
    /// A token or id does not belong to the modality required here.
    #[error("modality error: {0}")]
    Modality(String),
    /// Invalid or inconsistent configuration.
    #[error("config error: {0}")]
    Config(String),
    /// Not enough data to run the requested procedure.
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    /// A sequence does not fit the model's context window.
    #[error("context length exceeded: {0}")]
    ContextLength(String),
    /// A supervised span does not divide into K-token blocks.
    #[error("block geometry error: {0}")]
    BlockGeometry(String),
    /// Loss requested over a sequence with no supervised positions.
    #[error("empty loss: {0}")]
    EmptyLoss(String),
    /// Decoding could not select a token.
    #[error("decode error: {0}")]
    Decode(String),
    /// A checkpoint file is malformed or truncated.
    #[error("checkpoint format error: {0}")]
    Format(String),
    /// A checkpoint is well-formed but names tensors the model does not know.
    #[error("checkpoint schema error: {0}")]
    Schema(String),
    /// Dataset or corpus input is unusable.
    #[error("data error: {0}")]
    Data(String),
    /// A prompt does not parse under the synthetic caption grammar.
    #[error("grammar error: {0}")]
    Grammar(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
