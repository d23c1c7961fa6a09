use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward pass needs a 1x1 root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("unknown problem `{0}`")]
    UnknownProblem(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("lambda outside the admissible domain: {0}")]
    LambdaDomain(String),
    #[error("Riccati solution blew up at t = {t}")]
    RiccatiBlowUp { t: f64 },
    #[error("problem `{0}` has no decoupling field to build a reference from")]
    MissingReference(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}
