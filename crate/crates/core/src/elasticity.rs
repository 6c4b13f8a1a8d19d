//! Elastic worker pools and batch/cloud role commuting.
//!
//! [`reconcile`] decides which worker nodes to power on for queued demand and which idle
//! nodes to power off. [`VirtualCluster`] holds the worker nodes and job queue of one elastic
//! cluster deployment. [`PartitionDirector`] moves physical nodes between the batch and cloud
//! pools, draining busy nodes before they change hands.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resource::ResourceVector;

pub const DEFAULT_BOOT_DELAY_S: u64 = 30;
pub const DEFAULT_IDLE_TIMEOUT_S: u64 = 120;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ElasticityError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{0}` is already changing role")]
    AlreadyTransitioning(String),
    #[error("node `{0}` already has the requested role")]
    SameRole(String),
    #[error("invalid elastic policy: {0}")]
    InvalidPolicy(String),
    #[error("unknown job `{0}`")]
    UnknownJob(String),
    #[error("node `{node}` cannot {action} while {state}")]
    InvalidState { node: String, action: &'static str, state: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Power {
    Off,
    Booting { ready_at: u64 },
    On,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Occupancy {
    Idle { since: u64 },
    Busy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Batch,
    Cloud,
    DrainingToBatch,
    DrainingToCloud,
}

impl Role {
    pub fn is_draining(&self) -> bool {
        matches!(self, Role::DrainingToBatch | Role::DrainingToCloud)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Batch => "batch",
            Role::Cloud => "cloud",
            Role::DrainingToBatch => "draining-to-batch",
            Role::DrainingToCloud => "draining-to-cloud",
        })
    }
}

/// Target of a role switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StableRole {
    Batch,
    Cloud,
}

impl StableRole {
    pub fn role(self) -> Role {
        match self {
            StableRole::Batch => Role::Batch,
            StableRole::Cloud => Role::Cloud,
        }
    }

    fn draining(self) -> Role {
        match self {
            StableRole::Batch => Role::DrainingToBatch,
            StableRole::Cloud => Role::DrainingToCloud,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: String,
    pub capacity: ResourceVector,
    pub power: Power,
    pub occupancy: Occupancy,
    pub role: Role,
}

impl NodeRecord {
    pub fn new(node_id: impl Into<String>, capacity: ResourceVector, power: Power, role: Role, t: u64) -> Self {
        Self { node_id: node_id.into(), capacity, power, occupancy: Occupancy::Idle { since: t }, role }
    }

    pub fn is_busy(&self) -> bool {
        self.occupancy == Occupancy::Busy
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ElasticPolicy {
    pub t_idle_s: u64,
    pub boot_delay_s: u64,
    pub min_nodes: u32,
    pub max_nodes: u32,
}

impl Default for ElasticPolicy {
    fn default() -> Self {
        Self { t_idle_s: DEFAULT_IDLE_TIMEOUT_S, boot_delay_s: DEFAULT_BOOT_DELAY_S, min_nodes: 0, max_nodes: u32::MAX }
    }
}

impl ElasticPolicy {
    pub fn new(t_idle_s: u64, boot_delay_s: u64, min_nodes: u32, max_nodes: u32) -> Result<Self, ElasticityError> {
        if min_nodes > max_nodes {
            return Err(ElasticityError::InvalidPolicy(format!("min_nodes {min_nodes} > max_nodes {max_nodes}")));
        }
        Ok(Self { t_idle_s, boot_delay_s, min_nodes, max_nodes })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    PowerOn(String),
    PowerOff(String),
}

/// Power decisions for one pool of worker nodes.
///
/// Off nodes are powered on, largest first and then by id, until their capacity covers the
/// queued demand not already covered by booting nodes, or the pool reaches `max_nodes`. On
/// nodes idle for at least `t_idle_s` are powered off, last id first, while at least
/// `min_nodes` stay on.
pub fn reconcile(policy: &ElasticPolicy, nodes: &[NodeRecord], queued_demand: ResourceVector, t: u64) -> Vec<Action> {
    let mut actions = Vec::new();
    let mut active = nodes.iter().filter(|n| n.power != Power::Off).count() as u64;
    let min = u64::from(policy.min_nodes);
    let max = u64::from(policy.max_nodes);

    let mut off: Vec<&NodeRecord> = nodes.iter().filter(|n| n.power == Power::Off).collect();
    off.sort_by(|a, b| b.capacity.cmp(&a.capacity).then_with(|| a.node_id.cmp(&b.node_id)));
    let mut off = off.into_iter().peekable();

    while active < min.min(max) {
        let Some(n) = off.next() else { break };
        actions.push(Action::PowerOn(n.node_id.clone()));
        active += 1;
    }

    let mut remaining = nodes
        .iter()
        .filter(|n| matches!(n.power, Power::Booting { .. }))
        .fold(queued_demand, |acc, n| acc.saturating_sub(&n.capacity));
    for n in actions.iter().filter_map(|a| match a {
        Action::PowerOn(id) => nodes.iter().find(|n| n.node_id == *id),
        Action::PowerOff(_) => None,
    }) {
        remaining = remaining.saturating_sub(&n.capacity);
    }
    for n in off {
        if remaining.is_zero() || active >= max {
            break;
        }
        let after = remaining.saturating_sub(&n.capacity);
        if after == remaining {
            continue;
        }
        remaining = after;
        actions.push(Action::PowerOn(n.node_id.clone()));
        active += 1;
    }

    let mut idle: Vec<&NodeRecord> = nodes
        .iter()
        .filter(|n| n.power == Power::On)
        .filter(|n| matches!(n.occupancy, Occupancy::Idle { since } if t.saturating_sub(since) >= policy.t_idle_s))
        .collect();
    idle.sort_by(|a, b| b.node_id.cmp(&a.node_id));
    for n in idle {
        if active <= min {
            break;
        }
        actions.push(Action::PowerOff(n.node_id.clone()));
        active -= 1;
    }
    actions
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoleTransition {
    Switched { node: String, from: Role, to: Role },
    Draining { node: String, role: Role },
}

/// Capacity of the physical nodes, split by pool.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCapacity {
    pub batch: ResourceVector,
    pub cloud: ResourceVector,
    pub draining: ResourceVector,
}

/// Commutes physical nodes between the batch and cloud pools.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionDirector {
    nodes: BTreeMap<String, NodeRecord>,
}

impl PartitionDirector {
    pub fn new(nodes: impl IntoIterator<Item = NodeRecord>) -> Self {
        Self { nodes: nodes.into_iter().map(|n| (n.node_id.clone(), n)).collect() }
    }

    pub fn node(&self, id: &str) -> Option<&NodeRecord> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    /// Only cloud-role nodes take new cloud instances; draining nodes take nothing.
    pub fn accepts_cloud_work(&self, id: &str) -> bool {
        self.nodes.get(id).is_some_and(|n| n.role == Role::Cloud && n.power == Power::On)
    }

    pub fn switch_role(&mut self, id: &str, target: StableRole, _t: u64) -> Result<RoleTransition, ElasticityError> {
        let node = self.nodes.get_mut(id).ok_or_else(|| ElasticityError::UnknownNode(id.to_owned()))?;
        if node.role.is_draining() {
            return Err(ElasticityError::AlreadyTransitioning(id.to_owned()));
        }
        if node.role == target.role() {
            return Err(ElasticityError::SameRole(id.to_owned()));
        }
        if node.is_busy() {
            node.role = target.draining();
            Ok(RoleTransition::Draining { node: id.to_owned(), role: node.role })
        } else {
            let from = node.role;
            node.role = target.role();
            Ok(RoleTransition::Switched { node: id.to_owned(), from, to: node.role })
        }
    }

    /// Records whether a node hosts work. A draining node that turns idle completes its switch.
    pub fn set_busy(&mut self, id: &str, busy: bool, t: u64) -> Result<Option<RoleTransition>, ElasticityError> {
        let node = self.nodes.get_mut(id).ok_or_else(|| ElasticityError::UnknownNode(id.to_owned()))?;
        if busy {
            if node.power != Power::On {
                return Err(ElasticityError::InvalidState {
                    node: id.to_owned(),
                    action: "host work",
                    state: format!("{:?}", node.power),
                });
            }
            node.occupancy = Occupancy::Busy;
            return Ok(None);
        }
        if node.is_busy() {
            node.occupancy = Occupancy::Idle { since: t };
        }
        let to = match node.role {
            Role::DrainingToBatch => Role::Batch,
            Role::DrainingToCloud => Role::Cloud,
            _ => return Ok(None),
        };
        let from = node.role;
        node.role = to;
        Ok(Some(RoleTransition::Switched { node: id.to_owned(), from, to }))
    }

    pub fn pool_capacity(&self) -> PoolCapacity {
        let mut p = PoolCapacity::default();
        for n in self.nodes.values() {
            match n.role {
                Role::Batch => p.batch += n.capacity,
                Role::Cloud => p.cloud += n.capacity,
                Role::DrainingToBatch | Role::DrainingToCloud => p.draining += n.capacity,
            }
        }
        p
    }

    pub fn total_capacity(&self) -> ResourceVector {
        self.nodes.values().map(|n| n.capacity).sum()
    }

    pub fn audit(&self) -> Result<(), String> {
        for n in self.nodes.values() {
            if n.is_busy() && n.power != Power::On {
                return Err(format!("node {} is busy but not powered on", n.node_id));
            }
        }
        let p = self.pool_capacity();
        if p.batch + p.cloud + p.draining != self.total_capacity() {
            return Err("pool capacities do not add up to the physical capacity".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterJob {
    pub job_id: String,
    pub resources: ResourceVector,
    pub duration_s: u64,
    pub submitted_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Worker {
    pub record: NodeRecord,
    pub free: ResourceVector,
    pub jobs: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartedJob {
    pub job: ClusterJob,
    pub worker: String,
    pub started_at: u64,
}

/// Worker pool and job queue of one elastic cluster.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualCluster {
    pub name: String,
    pub policy: ElasticPolicy,
    pub worker_capacity: ResourceVector,
    workers: BTreeMap<String, Worker>,
    queue: VecDeque<ClusterJob>,
    running: BTreeMap<String, StartedJob>,
}

impl VirtualCluster {
    /// Creates `policy.max_nodes` worker slots, all powered off.
    pub fn new(name: impl Into<String>, worker_capacity: ResourceVector, policy: ElasticPolicy, t: u64) -> Self {
        let name = name.into();
        let workers = (0..policy.max_nodes)
            .map(|i| {
                let id = format!("{name}-w{i:02}");
                let record = NodeRecord::new(id.clone(), worker_capacity, Power::Off, Role::Cloud, t);
                (id, Worker { record, free: worker_capacity, jobs: BTreeSet::new() })
            })
            .collect();
        Self { name, policy, worker_capacity, workers, queue: VecDeque::new(), running: BTreeMap::new() }
    }

    pub fn records(&self) -> Vec<NodeRecord> {
        self.workers.values().map(|w| w.record.clone()).collect()
    }

    pub fn worker(&self, id: &str) -> Option<&Worker> {
        self.workers.get(id)
    }

    pub fn workers(&self) -> impl Iterator<Item = &Worker> {
        self.workers.values()
    }

    pub fn queued(&self) -> impl Iterator<Item = &ClusterJob> {
        self.queue.iter()
    }

    pub fn running_jobs(&self) -> impl Iterator<Item = &StartedJob> {
        self.running.values()
    }

    pub fn queued_demand(&self) -> ResourceVector {
        self.queue.iter().map(|j| j.resources).sum()
    }

    pub fn submit_job(&mut self, job: ClusterJob) {
        self.queue.push_back(job);
    }

    /// Removes a job that has not started yet.
    pub fn withdraw_job(&mut self, job_id: &str) -> Option<ClusterJob> {
        let pos = self.queue.iter().position(|j| j.job_id == job_id)?;
        self.queue.remove(pos)
    }

    pub fn plan(&self, t: u64) -> Vec<Action> {
        reconcile(&self.policy, &self.records(), self.queued_demand(), t)
    }

    fn worker_mut(&mut self, id: &str) -> Result<&mut Worker, ElasticityError> {
        self.workers.get_mut(id).ok_or_else(|| ElasticityError::UnknownNode(id.to_owned()))
    }

    /// A worker instance is up at `t`: either immediately usable or booting until `ready_at`.
    pub fn worker_started(&mut self, id: &str, ready_at: Option<u64>, t: u64) -> Result<(), ElasticityError> {
        let w = self.worker_mut(id)?;
        if w.record.power != Power::Off {
            return Err(ElasticityError::InvalidState {
                node: id.to_owned(),
                action: "power on",
                state: format!("{:?}", w.record.power),
            });
        }
        w.record.power = match ready_at {
            Some(ready_at) if ready_at > t => Power::Booting { ready_at },
            _ => Power::On,
        };
        w.record.occupancy = Occupancy::Idle { since: t };
        Ok(())
    }

    pub fn worker_ready(&mut self, id: &str, t: u64) -> Result<(), ElasticityError> {
        let w = self.worker_mut(id)?;
        match w.record.power {
            Power::Booting { .. } => {
                w.record.power = Power::On;
                w.record.occupancy = Occupancy::Idle { since: t };
                Ok(())
            }
            other => Err(ElasticityError::InvalidState {
                node: id.to_owned(),
                action: "finish booting",
                state: format!("{other:?}"),
            }),
        }
    }

    /// Powers a worker off. Jobs it was running go back to the front of the queue.
    pub fn worker_stopped(&mut self, id: &str, t: u64) -> Result<Vec<ClusterJob>, ElasticityError> {
        let cap = self.worker_capacity;
        let w = self.worker_mut(id)?;
        let jobs = std::mem::take(&mut w.jobs);
        w.record.power = Power::Off;
        w.record.occupancy = Occupancy::Idle { since: t };
        w.free = cap;
        let mut requeued: Vec<ClusterJob> = jobs.iter().filter_map(|j| self.running.remove(j)).map(|s| s.job).collect();
        requeued.sort_by(|a, b| a.submitted_at.cmp(&b.submitted_at).then_with(|| a.job_id.cmp(&b.job_id)));
        for job in requeued.iter().rev() {
            self.queue.push_front(job.clone());
        }
        Ok(requeued)
    }

    /// Starts queued jobs first-come first-served on powered-on workers, letting smaller jobs
    /// pass a head job that does not fit anywhere yet.
    pub fn schedule_jobs(&mut self, t: u64) -> Vec<StartedJob> {
        let mut started = Vec::new();
        let mut waiting = VecDeque::new();
        while let Some(job) = self.queue.pop_front() {
            let slot = self.workers.values_mut().find(|w| w.record.power == Power::On && job.resources.fits(&w.free));
            match slot {
                Some(w) => {
                    w.free = w.free.checked_sub(&job.resources).expect("job fits");
                    w.jobs.insert(job.job_id.clone());
                    w.record.occupancy = Occupancy::Busy;
                    let s = StartedJob { job, worker: w.record.node_id.clone(), started_at: t };
                    self.running.insert(s.job.job_id.clone(), s.clone());
                    started.push(s);
                }
                None => waiting.push_back(job),
            }
        }
        self.queue = waiting;
        started
    }

    pub fn finish_job(&mut self, job_id: &str, t: u64) -> Result<StartedJob, ElasticityError> {
        let s = self.running.remove(job_id).ok_or_else(|| ElasticityError::UnknownJob(job_id.to_owned()))?;
        let w = self.worker_mut(&s.worker)?;
        w.free += s.job.resources;
        w.jobs.remove(job_id);
        if w.jobs.is_empty() {
            w.record.occupancy = Occupancy::Idle { since: t };
        }
        Ok(s)
    }

    /// Earliest time an On idle worker crosses the idle timeout, if any is pending.
    pub fn next_idle_deadline(&self, t: u64) -> Option<u64> {
        self.workers
            .values()
            .filter(|w| w.record.power == Power::On)
            .filter_map(|w| match w.record.occupancy {
                Occupancy::Idle { since } => Some(since + self.policy.t_idle_s),
                Occupancy::Busy => None,
            })
            .filter(|&d| d > t)
            .min()
    }

    pub fn audit(&self) -> Result<(), String> {
        for w in self.workers.values() {
            if w.record.is_busy() && w.record.power != Power::On {
                return Err(format!("worker {} is busy but {:?}", w.record.node_id, w.record.power));
            }
            if w.record.is_busy() != !w.jobs.is_empty() {
                return Err(format!("worker {} occupancy disagrees with its jobs", w.record.node_id));
            }
            let used: ResourceVector = w.jobs.iter().map(|j| self.running[j].job.resources).sum();
            if w.free + used != w.record.capacity {
                return Err(format!("worker {} capacity not conserved", w.record.node_id));
            }
        }
        let active = self.workers.values().filter(|w| w.record.power != Power::Off).count();
        if active > self.policy.max_nodes as usize {
            return Err(format!("cluster {} exceeds max_nodes", self.name));
        }
        Ok(())
    }
}
