use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("partition: {0}")]
    Partition(String),
    #[error("fabric: {0}")]
    Fabric(String),
    #[error("out of memory: rank {rank} needs {needed} bytes, budget {budget}")]
    OutOfMemory { rank: usize, needed: u64, budget: u64 },
    #[error("patch tree: {0}")]
    Tree(String),
    #[error("mask: {0}")]
    Mask(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
