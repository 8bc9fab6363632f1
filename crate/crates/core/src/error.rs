use std::time::Duration;

use thiserror::Error;

use crate::ids::{NodeId, ObjectId, TaskId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("function `{0}` is not registered")]
    UnknownFunction(String),
    #[error("object {0} has no live references")]
    DeadReference(ObjectId),
    #[error("reference to object {0} was already dropped")]
    DoubleDrop(ObjectId),
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("reconstruction of object {0} failed after exhausting retries")]
    ReconstructionFailed(ObjectId),
    #[error("object {0} is a non-reconstructible root and its last copy was lost")]
    NonReconstructibleRoot(ObjectId),
    #[error("object {0} was cancelled")]
    Cancelled(ObjectId),
    #[error("task {task} failed: {message}")]
    TaskFailed { task: TaskId, message: String },
    #[error("inline argument of {size} bytes exceeds the {limit}-byte inline limit")]
    InlineTooLarge { size: usize, limit: usize },
    #[error("object of {size} bytes exceeds the {limit}-byte node memory limit")]
    ObjectTooLarge { size: u64, limit: u64 },
    #[error("empty values cannot be stored")]
    EmptyValue,
    #[error("node {0} is not alive")]
    NodeDead(NodeId),
    #[error("no such node {0}")]
    NoSuchNode(NodeId),
    #[error("nothing to spill on node {0}: all resident objects are pinned")]
    NothingToSpill(NodeId),
    #[error("spill file for object {0} is missing or corrupt")]
    SpillFileCorrupt(ObjectId),
    #[error("object {0} has no surviving copy")]
    SourceLost(ObjectId),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

/// Error returned by user task functions.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{0}")]
pub struct TaskError(pub String);

impl TaskError {
    pub fn new(msg: impl Into<String>) -> Self {
        TaskError(msg.into())
    }
}

impl From<crate::shuffle::RecordError> for TaskError {
    fn from(e: crate::shuffle::RecordError) -> Self {
        TaskError(e.to_string())
    }
}
