use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] ndgrad::Error),

    #[error("{what} id {id} out of range (< {limit})")]
    OutOfRange { what: &'static str, id: usize, limit: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("infeasible class balance: {0}")]
    Balance(String),

    #[error("unknown annotation kind `{0}`")]
    UnknownKind(String),

    #[error("malformed manifest {path}:{line}: {detail}")]
    Manifest { path: PathBuf, line: usize, detail: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("jpeg codec: {0}")]
    Codec(String),

    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("cluster has a single point; conspecific distance is undefined")]
    SingletonCluster,

    #[error("empty cluster {0}")]
    EmptyCluster(usize),

    #[error("no labeled source dataset for `{0}`")]
    NoSource(String),

    #[error("no validation sets supplied")]
    NoValidation,

    #[error("class {0} has no gallery item")]
    AbsentClass(usize),

    #[error("head `{0}` is not present in this model")]
    MissingHead(String),

    #[error("this variant has no attention gates")]
    NoAttention,

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty knowledge base")]
    EmptyKnowledgeBase,

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },

    #[error("epoch grids differ: {0}")]
    MismatchedGrids(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
