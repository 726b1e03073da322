use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("invalid feature locator: {0}")]
    InvalidLocator(String),

    #[error("unknown attention block `{0}`")]
    UnknownBlock(String),

    #[error("non-finite value detected in {context} at timestep {timestep}")]
    NonFinite { context: String, timestep: usize },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{stage} failed at iteration {iteration}: {source}")]
    Stage {
        stage: String,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("parse error in {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("serialization error: {0}")]
    TomlSer(#[from] toml::ser::Error),

    #[error("parse error: {0}")]
    TomlDe(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }

    /// Wrap an error with the pipeline stage and cycle iteration it occurred in.
    pub fn in_stage(self, stage: impl Into<String>, iteration: usize) -> Self {
        Error::Stage {
            stage: stage.into(),
            iteration,
            source: Box::new(self),
        }
    }
}
