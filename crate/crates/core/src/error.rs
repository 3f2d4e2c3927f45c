use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid identifier {0:?}: expected 1-200 chars of [A-Za-z0-9_.-]")]
pub struct InvalidId(pub String);
