use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("adapter for ({module}, layer {layer}) has shape {found:?}, expected {expected:?}")]
    AdapterShape {
        module: String,
        layer: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("cosine similarity undefined for a zero vector")]
    UndefinedSimilarity,

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("config fingerprint {found:#018x} does not match {expected:#018x}")]
    Fingerprint { found: u64, expected: u64 },

    #[error("file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("embedding dimension mismatch on line {line}: expected {expected}, found {found}")]
    Dimension {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("duplicate key on line {line}: {key:?}")]
    DuplicateKey { line: usize, key: String },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Divergence { step: usize, loss: f64 },

    #[error("unknown or misaligned id: {0}")]
    UnknownId(String),

    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
