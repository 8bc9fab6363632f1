use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::ids::NodeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    /// Milliseconds after the cluster started.
    AtTimeMs(u64),
    /// Once this many tasks have finished cluster-wide.
    AfterKTasks(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureAction {
    KillNode(NodeId),
    KillExecutor { node: NodeId, slot: usize },
    RestartNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedFailure {
    pub trigger: Trigger,
    pub action: FailureAction,
}

/// Failures to inject during a run. Each entry fires at most once.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FailurePlan {
    pub events: Vec<PlannedFailure>,
}

impl FailurePlan {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with(mut self, trigger: Trigger, action: FailureAction) -> Self {
        self.events.push(PlannedFailure { trigger, action });
        self
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Slows down (or stalls) every attempt of tasks with a given label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StragglerRule {
    pub task: String,
    #[serde(default)]
    pub delay_ms: u64,
    /// Block until the attempt is cancelled.
    #[serde(default)]
    pub stall: bool,
}

impl StragglerRule {
    pub fn delay(task: impl Into<String>, d: Duration) -> Self {
        StragglerRule {
            task: task.into(),
            delay_ms: d.as_millis() as u64,
            stall: false,
        }
    }

    pub fn stall(task: impl Into<String>) -> Self {
        StragglerRule {
            task: task.into(),
            delay_ms: 0,
            stall: true,
        }
    }
}
