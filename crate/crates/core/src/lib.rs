//! Distributed-futures runtime with a simulated multi-node object store and
//! a library of shuffle algorithms built on top of it.

pub mod checksum;
pub mod cluster;
pub mod error;
pub mod ids;
pub mod runtime;
pub mod shuffle;
pub mod sortbench;
pub mod store;

pub use cluster::{
    start_cluster, ClusterConfig, FailureAction, FailurePlan, StragglerRule, Trigger,
};
pub use error::{Error, Result, TaskError};
pub use ids::{NodeId, ObjectId, TaskId};
pub use runtime::{
    Arg, FunctionRegistry, LineageRecord, MetricsSnapshot, ObjectRef, Runtime, SchedulerTrace,
    TaskContext, TaskSpec, TaskStatus, TraceEvent, WaitResult,
};
pub use store::{IoMetrics, StoreConfig};
