use std::io;

pub type Result<T, E = VcqError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum VcqError {
    #[error("out of range: {0}")]
    Range(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A corpus holds a token the schedule does not allow at that position.
    #[error("corpus does not match schedule: token {token} at position {position} but K_t = {k_t}")]
    CorpusMismatch { position: usize, token: u32, k_t: u32 },
    #[error("malformed file: {0}")]
    Format(String),
    #[error("{stage} failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<VcqError>,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl VcqError {
    pub(crate) fn in_stage(stage: impl Into<String>) -> impl FnOnce(VcqError) -> VcqError {
        let stage = stage.into();
        move |source| VcqError::Stage { stage, source: Box::new(source) }
    }
}
