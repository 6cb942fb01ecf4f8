use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("layout error: block size {block_size} does not divide length {len}")]
    Layout { len: usize, block_size: usize },
    #[error("capacity error: {needed} positions exceed max_len {max_len}")]
    Capacity { needed: usize, max_len: usize },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("state error: {0}")]
    State(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("spec error: {0}")]
    Spec(String),
    #[error("vocab error: {0}")]
    Vocab(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step} (t = {t}, block size = {block_size})")]
    NonFiniteLoss {
        step: usize,
        t: f64,
        block_size: usize,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
