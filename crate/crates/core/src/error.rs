use std::io;

use crate::versioning::{HandleId, Version};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("partition index out of range: {0}")]
    OutOfBounds(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("memory pool: {0}")]
    Pool(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("checksum mismatch on {handle} {version} from rank {source_rank}")]
    Checksum {
        handle: HandleId,
        version: Version,
        source_rank: u32,
    },

    #[error("malformed message: {0}")]
    Wire(String),

    #[error("transport: {0}")]
    Transport(String),

    #[error("task submission: {0}")]
    Submission(String),

    #[error("kernel failure in task {task} ({kind}): {reason}")]
    Kernel { task: u64, kind: String, reason: String },

    #[error("run did not reach quiescence: {0}")]
    Stalled(String),

    #[error("run aborted by another rank")]
    Aborted,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}
