use std::path::PathBuf;

/// Errors surfaced by the reshading pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {ctx}: {a:?} vs {b:?}")]
    ShapeMismatch {
        ctx: &'static str,
        a: Vec<usize>,
        b: Vec<usize>,
    },

    #[error("{ctx}: value {value} at index {index} outside [{lo}, {hi}] or not finite")]
    ValueOutOfRange {
        ctx: &'static str,
        value: f32,
        index: usize,
        lo: f32,
        hi: f32,
    },

    #[error("normal field has non-unit vector (norm {norm}) at pixel ({y}, {x})")]
    NonUnitNormal { y: usize, x: usize, norm: f32 },

    #[error("invalid light: {0}")]
    InvalidLight(String),

    #[error("invalid placement: {0}")]
    InvalidPlacement(String),

    #[error("placement pushes mask content out of bounds: rows {rows:?}, cols {cols:?}, target {height}x{width}")]
    PlacementOutOfBounds {
        rows: (i64, i64),
        cols: (i64, i64),
        height: usize,
        width: usize,
    },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("image file {path}: {msg}")]
    ImageFile { path: PathBuf, msg: String },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },

    #[error("dataset {path}: {msg}")]
    Dataset { path: PathBuf, msg: String },

    #[error("training: {0}")]
    Training(String),

    #[error("normal estimator '{backend}': {msg}")]
    Estimator { backend: String, msg: String },

    #[error("non-finite loss in component {component} at iteration {iteration}")]
    NonFiniteLoss {
        component: &'static str,
        iteration: usize,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Wraps an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
