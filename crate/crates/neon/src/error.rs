use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("graph schema: {0}")]
    Schema(String),

    #[error("graph contains a cycle through {0:?}")]
    Cycle(Vec<String>),

    #[error("node '{node}' reads from unknown node '{input}'")]
    DanglingInput { node: String, input: String },

    #[error("node '{node}': {msg}")]
    Shape { node: String, msg: String },

    #[error("node '{node}': {msg}")]
    Weights { node: String, msg: String },

    #[error("non-finite value produced by node '{node}' (sample {sample})")]
    NonFinite { node: String, sample: usize },

    #[error("empty dataset")]
    EmptyData,

    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("node '{node}' cannot be routed on the {arch} configuration")]
    Unroutable { node: String, arch: String },

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
