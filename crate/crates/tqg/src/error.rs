//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ingestion
    #[error("malformed XML: {0}")]
    MalformedXml(String),
    #[error("way references unknown node id {0}")]
    DanglingNodeRef(i64),
    #[error("duplicate road node id {0}")]
    DuplicateNodeId(i64),
    #[error("missing column `{0}` in {1}")]
    MissingColumn(String, String),
    #[error("row {row}: cannot parse `{value}` in column `{column}`")]
    BadNumericCell {
        row: usize,
        column: String,
        value: String,
    },
    #[error("duplicate sensor id `{0}`")]
    DuplicateSensorId(String),
    #[error("speed column `{0}` does not match any sensor id")]
    UnknownSensorColumn(String),
    #[error("non-uniform timestep at row {row}: expected {expected}s, got {got}s")]
    NonUniformTimestep {
        row: usize,
        expected: i64,
        got: i64,
    },
    #[error("series too short: {0}")]
    TooShort(String),

    // graph construction
    #[error("need at least as many road nodes as sensors ({roads} < {sensors})")]
    NotEnoughRoadNodes { roads: usize, sensors: usize },
    #[error("unknown road node id {0}")]
    UnknownNodeId(i64),
    #[error("unknown subgraph root `{0}`")]
    UnknownRoot(String),

    // numerics
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    DegenerateBatch(usize),
    #[error("MAE mask selects no valid cells")]
    EmptyMask,

    // harness
    #[error("parameter out of range: {0}")]
    ParameterOutOfRange(String),
    #[error("missing run artifacts: {0}")]
    MissingRunArtifacts(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}
