use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::TaskError;
use crate::ids::{NodeId, ObjectId, TaskId};

/// Handle to the eventual, immutable value of a task return (or a `put`).
///
/// Handles are plain values; the runtime counts references explicitly
/// through `submit` (one per returned handle), `add_ref` and `drop_ref`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ObjectRef {
    pub object_id: ObjectId,
    pub creator_task: TaskId,
    pub size_hint: Option<u64>,
}

impl ObjectRef {
    pub(crate) fn new(object_id: ObjectId) -> Self {
        ObjectRef {
            object_id,
            creator_task: object_id.task(),
            size_hint: None,
        }
    }

    pub fn id(&self) -> ObjectId {
        self.object_id
    }
}

/// One positional task argument.
#[derive(Debug, Clone)]
pub enum Arg {
    Ref(ObjectRef),
    Inline(Bytes),
}

impl From<ObjectRef> for Arg {
    fn from(r: ObjectRef) -> Self {
        Arg::Ref(r)
    }
}

impl From<&ObjectRef> for Arg {
    fn from(r: &ObjectRef) -> Self {
        Arg::Ref(r.clone())
    }
}

/// A remote function invocation.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub function_id: String,
    pub args: Vec<Arg>,
    pub num_returns: usize,
    /// Soft node affinity: honored while the node is alive.
    pub placement: Option<NodeId>,
    pub deterministic: bool,
    /// Human-readable label, e.g. `map-3`. Used in traces and for
    /// straggler injection; not required to be unique.
    pub name: Option<String>,
    /// Write returns through to disk as soon as they are sealed (job output).
    pub persist_returns: bool,
}

impl TaskSpec {
    pub fn new(function_id: impl Into<String>) -> Self {
        TaskSpec {
            function_id: function_id.into(),
            args: Vec::new(),
            num_returns: 1,
            placement: None,
            deterministic: true,
            name: None,
            persist_returns: false,
        }
    }

    pub fn arg(mut self, a: impl Into<Arg>) -> Self {
        self.args.push(a.into());
        self
    }

    pub fn args<I, A>(mut self, it: I) -> Self
    where
        I: IntoIterator<Item = A>,
        A: Into<Arg>,
    {
        self.args.extend(it.into_iter().map(Into::into));
        self
    }

    pub fn inline(mut self, bytes: impl Into<Bytes>) -> Self {
        self.args.push(Arg::Inline(bytes.into()));
        self
    }

    pub fn returns(mut self, n: usize) -> Self {
        self.num_returns = n;
        self
    }

    pub fn on_node(mut self, node: NodeId) -> Self {
        self.placement = Some(node);
        self
    }

    pub fn placement(mut self, node: Option<NodeId>) -> Self {
        self.placement = node;
        self
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn persist(mut self, yes: bool) -> Self {
        self.persist_returns = yes;
        self
    }

    pub fn label(&self) -> &str {
        self.name.as_deref().unwrap_or(&self.function_id)
    }
}

/// What a running task can see besides its arguments.
pub struct TaskContext {
    pub task_id: TaskId,
    pub attempt: u32,
    pub node: NodeId,
    seed: u64,
    stop: Arc<AtomicBool>,
}

impl TaskContext {
    pub(crate) fn new(
        task_id: TaskId,
        attempt: u32,
        node: NodeId,
        seed: u64,
        stop: Arc<AtomicBool>,
    ) -> Self {
        TaskContext {
            task_id,
            attempt,
            node,
            seed,
            stop,
        }
    }

    /// Seed derived from the task id and the runtime seed only, so every
    /// attempt of a task sees the same randomness.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// True once the attempt was cancelled or its executor/node was killed.
    pub fn should_stop(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }

    /// Sleep for `d`, returning early (with `false`) if the attempt is stopped.
    pub fn sleep(&self, d: Duration) -> bool {
        let deadline = std::time::Instant::now() + d;
        loop {
            if self.should_stop() {
                return false;
            }
            let now = std::time::Instant::now();
            if now >= deadline {
                return true;
            }
            std::thread::sleep((deadline - now).min(Duration::from_millis(2)));
        }
    }
}

pub type TaskResult = Result<Vec<Bytes>, TaskError>;

/// A registered remote function: arguments in, `num_returns` values out.
pub type RemoteFn = Arc<dyn Fn(&TaskContext, &[Bytes]) -> TaskResult + Send + Sync>;

/// Name-to-function table, fixed when the cluster starts.
#[derive(Clone, Default)]
pub struct FunctionRegistry {
    fns: HashMap<String, RemoteFn>,
}

impl fmt::Debug for FunctionRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut names: Vec<_> = self.fns.keys().collect();
        names.sort();
        f.debug_struct("FunctionRegistry")
            .field("functions", &names)
            .finish()
    }
}

impl FunctionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: impl Into<String>, f: F) -> &mut Self
    where
        F: Fn(&TaskContext, &[Bytes]) -> TaskResult + Send + Sync + 'static,
    {
        self.fns.insert(name.into(), Arc::new(f));
        self
    }

    pub fn get(&self, name: &str) -> Option<RemoteFn> {
        self.fns.get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.fns.contains_key(name)
    }
}

/// Lifecycle of a lineage record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskStatus {
    Pending,
    Running,
    Finished,
    Failed,
    Cancelled,
}
