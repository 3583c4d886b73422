use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("evaluation on the singular set (distance {dist:e})")]
    Singular { dist: f64 },
    #[error("construction error: {0}")]
    Construction(String),
    #[error("classification failure: {0}")]
    Classification(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("shift selection failed: {0}")]
    Selection(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
    #[error("unsupported configuration: {0}")]
    Unsupported(String),
    #[error("non-finite sample at {0:?}")]
    NonFinite(Vec<f64>),
}

pub type Result<T> = std::result::Result<T, Error>;
