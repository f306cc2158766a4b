use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("vocabulary error: token id {id} is outside vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },
    #[error("length error: sequence of {len} positions exceeds the limit of {max}")]
    Length { len: usize, max: usize },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("registry error: no parameter named `{0}`")]
    Registry(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("snapshot error: no snapshot entry for `{0}`")]
    Snapshot(String),
    #[error("low-resource contract violated: target size {target} exceeds source size {source_size} / 10")]
    LowResource { target: usize, source_size: usize },
    #[error("numerical abort at {context}: {detail}")]
    Numerical { context: String, detail: String },
}

impl Error {
    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
