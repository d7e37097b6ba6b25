//! Crate-wide error type and result alias.

pub type Result<T> = std::result::Result<T, FcxError>;

/// Errors emitted by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum FcxError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("loss node must be scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("training diverged: {0}")]
    TrainingDiverged(String),
    #[error("degenerate feature: {0}")]
    DegenerateFeature(String),
    #[error("exact Shapley limited to {max} players, got {n}")]
    TooManyPlayers { n: usize, max: usize },
    #[error("incompatible decomposition: {0}")]
    IncompatibleDecomposition(String),
    #[error("missing split: {0}")]
    MissingSplit(&'static str),
    #[error("reliability needs at least 2 networks, got {k}")]
    TooFewNetworks { k: usize },
    #[error("phase order violation: {0}")]
    PhaseOrderError(&'static str),
    #[error("depth mismatch: expected {expected}, got {got}")]
    DepthMismatch { expected: usize, got: usize },
    #[error("invalid depth: {0}")]
    InvalidDepth(String),
    #[error("invalid width: scaled channel count rounds to zero (base {base}, factor {factor})")]
    InvalidWidth { base: usize, factor: f64 },
    #[error("unsupported checkpoint version: {0}")]
    UnsupportedVersion(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("prune fraction must lie in [0,1), got {0}")]
    InvalidFraction(f64),
    #[error("underdetermined fit: {samples} samples for {unknowns} unknowns")]
    Underdetermined { samples: usize, unknowns: usize },
    #[error("no split available at depth {0}")]
    MissingDepth(usize),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("unsupported report format: {0}")]
    UnsupportedFormat(String),
    #[error("network is frozen; parameters cannot be mutated")]
    FrozenNetwork,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
