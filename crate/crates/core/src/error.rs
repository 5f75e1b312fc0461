use thiserror::Error;

/// Errors raised by hierarchy construction and the attention routines.
#[derive(Debug, Error)]
pub enum HsaError {
    #[error("schema violation: {0}")]
    Schema(String),

    #[error("{what} has length {got}, expected {expected}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("family at {path} has no children")]
    EmptyFamily { path: String },

    #[error("set-domain child at {path} carries a non-zero position")]
    NonZeroSetPosition { path: String },

    #[error("branching factor {0} is below 2")]
    InvalidBranching(usize),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("hierarchies in a batch disagree on dims: ({0}, {1}) vs ({2}, {3})")]
    MixedDims(usize, usize, usize, usize),

    #[error("nodes {0} and {1} are related; interaction energy needs unrelated nodes")]
    RelatedNodes(usize, usize),

    #[error("leaf index {index} out of range for {n_leaves} leaves")]
    InvalidLeaf { index: usize, n_leaves: usize },

    #[error("no projection parameters for signal type `{0}`")]
    UnknownTag(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("boundary events out of order: {0}")]
    EventOrder(String),

    #[error("batch offsets do not match the concatenated tree: {0}")]
    Offsets(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = HsaError> = std::result::Result<T, E>;
