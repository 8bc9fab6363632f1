//! Simulated multi-node cluster: configuration, startup and failure injection.

mod failure;

use serde::{Deserialize, Serialize};

pub use failure::{FailureAction, FailurePlan, PlannedFailure, StragglerRule, Trigger};

use crate::error::{Error, Result};
use crate::ids::NodeId;
use crate::runtime::{FunctionRegistry, Runtime};
use crate::store::StoreConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub nodes: usize,
    pub slots_per_node: usize,
    pub store: StoreConfig,
    /// Re-executions allowed per lineage record.
    pub max_retries: u32,
    /// Largest argument value that may travel inline in a task spec.
    pub inline_limit: usize,
    pub seed: u64,
    /// Compare checksums of re-executed outputs against their first seal.
    pub verify_replays: bool,
    pub failures: FailurePlan,
    pub stragglers: Vec<StragglerRule>,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            nodes: 1,
            slots_per_node: 2,
            store: StoreConfig::default(),
            max_retries: 3,
            inline_limit: 1024,
            seed: 0,
            verify_replays: true,
            failures: FailurePlan::none(),
            stragglers: Vec::new(),
        }
    }
}

impl ClusterConfig {
    pub fn new(nodes: usize, slots_per_node: usize, store: StoreConfig) -> Self {
        ClusterConfig {
            nodes,
            slots_per_node,
            store,
            ..Default::default()
        }
    }

    pub fn with_failures(mut self, plan: FailurePlan) -> Self {
        self.failures = plan;
        self
    }

    pub fn with_straggler(mut self, rule: StragglerRule) -> Self {
        self.stragglers.push(rule);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Starts all nodes, executors and I/O lanes.
pub fn start_cluster(config: ClusterConfig, registry: FunctionRegistry) -> Result<Runtime> {
    Runtime::start(config, registry)
}

impl Runtime {
    /// Kills a node: its executors stop and its memory and spill files are lost.
    pub fn kill_node(&self, node: NodeId) -> Result<()> {
        let sh = self.shared();
        let mut g = sh.state.lock();
        check_node(g.nodes.len(), node)?;
        if !g.nodes[node].alive {
            return Err(Error::NodeDead(node));
        }
        crate::runtime::engine::kill_node(sh, &mut g, node);
        Ok(())
    }

    /// Kills one executor; its in-flight task is retried and the store is untouched.
    pub fn kill_executor(&self, node: NodeId, slot: usize) -> Result<()> {
        let sh = self.shared();
        let mut g = sh.state.lock();
        check_node(g.nodes.len(), node)?;
        if slot >= sh.config.slots_per_node {
            return Err(Error::InvalidArgument(format!(
                "no slot {slot} on node {node}"
            )));
        }
        if !g.nodes[node].alive {
            return Err(Error::NodeDead(node));
        }
        crate::runtime::engine::kill_executor(sh, &mut g, node, slot);
        Ok(())
    }

    /// Brings a node back with an empty store, killing it first if alive.
    pub fn restart_node(&self, node: NodeId) -> Result<()> {
        let sh = self.shared();
        let mut g = sh.state.lock();
        check_node(g.nodes.len(), node)?;
        crate::runtime::engine::restart_node(sh, &mut g, node);
        Ok(())
    }
}

fn check_node(n: usize, node: NodeId) -> Result<()> {
    if node >= n {
        Err(Error::NoSuchNode(node))
    } else {
        Ok(())
    }
}
