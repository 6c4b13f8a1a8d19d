//! Per-site admission and fair-share scheduling with preemptible instances.
//!
//! Queued requests are ordered by the owner's fair-share priority
//! `p = w / (1 + U(t))`, where `w` is the user's weight and `U(t)` their cpu-second usage
//! decayed with a configurable half-life. Equal priorities fall back to arrival time, then
//! request id.
//!
//! A request that does not fit the free capacity of any schedulable node may terminate
//! preemptible instances: normal requests may terminate any of them, preemptible requests
//! only those with a strictly lower bid. The victim set is the smallest that makes room,
//! preferring low bids, then the most recently started instances, then request id.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resource::ResourceVector;

pub const DEFAULT_HALF_LIFE_S: f64 = 3600.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchedulerError {
    #[error("request id `{0}` is already known to this site")]
    DuplicateRequestId(String),
    #[error("unknown instance `{0}`")]
    UnknownInstance(String),
    #[error("unknown queued request `{0}`")]
    UnknownRequest(String),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("invalid request `{id}`: {reason}")]
    InvalidRequest { id: String, reason: String },
    #[error("no set of preemptible instances can free enough capacity")]
    Infeasible,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InstanceClass {
    Normal,
    Preemptible { bid: f64 },
}

impl InstanceClass {
    pub fn is_preemptible(&self) -> bool {
        matches!(self, InstanceClass::Preemptible { .. })
    }

    pub fn bid(&self) -> Option<f64> {
        match self {
            InstanceClass::Normal => None,
            InstanceClass::Preemptible { bid } => Some(*bid),
        }
    }

    /// Whether a request of this class may terminate a running instance of class `victim`.
    pub fn may_preempt(&self, victim: &InstanceClass) -> bool {
        match (self, victim) {
            (_, InstanceClass::Normal) => false,
            (InstanceClass::Normal, InstanceClass::Preemptible { .. }) => true,
            (InstanceClass::Preemptible { bid }, InstanceClass::Preemptible { bid: other }) => other < bid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRequest {
    pub request_id: String,
    pub user: String,
    pub group: String,
    pub resources: ResourceVector,
    pub class: InstanceClass,
    pub arrival_time: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningInstance {
    pub request: InstanceRequest,
    pub start_time: u64,
    pub node: String,
}

impl RunningInstance {
    pub fn id(&self) -> &str {
        &self.request.request_id
    }

    fn victim_key_cmp(&self, other: &RunningInstance) -> Ordering {
        let bid = |r: &RunningInstance| r.request.class.bid().unwrap_or(f64::INFINITY);
        bid(self)
            .total_cmp(&bid(other))
            .then_with(|| other.start_time.cmp(&self.start_time))
            .then_with(|| self.id().cmp(other.id()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserShare {
    pub weight: f64,
    pub usage: f64,
}

/// Per-user decayed cpu-second usage and fair-share weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageLedger {
    users: BTreeMap<String, UserShare>,
    half_life_s: f64,
    last_update: u64,
}

impl UsageLedger {
    pub fn new(half_life_s: f64) -> Self {
        assert!(half_life_s > 0.0, "half-life must be positive");
        Self { users: BTreeMap::new(), half_life_s, last_update: 0 }
    }

    pub fn half_life_s(&self) -> f64 {
        self.half_life_s
    }

    pub fn last_update(&self) -> u64 {
        self.last_update
    }

    fn decay(&self, dt: u64) -> f64 {
        (-(dt as f64) / self.half_life_s).exp2()
    }

    pub fn set_weight(&mut self, user: &str, weight: f64) {
        assert!(weight > 0.0 && weight.is_finite(), "weights must be positive");
        self.users.entry(user.to_owned()).or_insert(UserShare { weight, usage: 0.0 }).weight = weight;
    }

    /// Registers `user` with weight 1 if unseen.
    pub fn register(&mut self, user: &str) -> &mut UserShare {
        self.users.entry(user.to_owned()).or_insert(UserShare { weight: 1.0, usage: 0.0 })
    }

    pub fn advance_to(&mut self, t: u64) {
        if t <= self.last_update {
            return;
        }
        let f = self.decay(t - self.last_update);
        for share in self.users.values_mut() {
            share.usage *= f;
        }
        self.last_update = t;
    }

    pub fn accrue(&mut self, user: &str, cpu_seconds: f64, t: u64) {
        self.advance_to(t);
        self.register(user).usage += cpu_seconds;
    }

    pub fn usage(&self, user: &str, t: u64) -> f64 {
        let u = self.users.get(user).map_or(0.0, |s| s.usage);
        u * self.decay(t.saturating_sub(self.last_update))
    }

    pub fn weight(&self, user: &str) -> f64 {
        self.users.get(user).map_or(1.0, |s| s.weight)
    }

    /// `w / (1 + U(t))`; unknown users count as weight 1 with no history.
    pub fn priority(&self, user: &str, t: u64) -> f64 {
        self.weight(user) / (1.0 + self.usage(user, t))
    }

    pub fn users(&self) -> impl Iterator<Item = (&str, &UserShare)> {
        self.users.iter().map(|(k, v)| (k.as_str(), v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub half_life_s: f64,
    pub backfill: bool,
    pub weights: BTreeMap<String, f64>,
    pub quotas: BTreeMap<String, ResourceVector>,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        Self { half_life_s: DEFAULT_HALF_LIFE_S, backfill: true, weights: BTreeMap::new(), quotas: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decision {
    Started(RunningInstance),
    Queued(usize),
    RejectedQuota,
}

/// Side effects of a scheduling step, in the order they happened.
#[derive(Debug, Clone, PartialEq)]
pub enum SchedEvent {
    Started(RunningInstance),
    Preempted { victim: RunningInstance, by: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubmitOutcome {
    pub decision: Decision,
    pub events: Vec<SchedEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VictimSet {
    pub node: String,
    pub victims: Vec<String>,
}

/// Chooses where `request` can run and which preemptible instances must go to make room.
///
/// `nodes` lists candidate nodes with their current free capacity; `running` lists instances
/// on those nodes. An empty victim list means the request already fits on `node`.
pub fn select_victims(
    request: &InstanceRequest,
    nodes: &[(String, ResourceVector)],
    running: &[RunningInstance],
) -> Result<VictimSet, SchedulerError> {
    if let Some((node, _)) = nodes.iter().find(|(_, free)| request.resources.fits(free)) {
        return Ok(VictimSet { node: node.clone(), victims: Vec::new() });
    }

    let mut per_node: Vec<(&str, ResourceVector, Vec<&RunningInstance>)> = Vec::new();
    for (node, free) in nodes {
        let mut eligible: Vec<&RunningInstance> =
            running.iter().filter(|r| r.node == *node && request.class.may_preempt(&r.request.class)).collect();
        let reachable = *free + eligible.iter().map(|r| r.request.resources).sum::<ResourceVector>();
        if !request.resources.fits(&reachable) {
            continue;
        }
        eligible.sort_by(|a, b| a.victim_key_cmp(b));
        per_node.push((node.as_str(), *free, eligible));
    }
    per_node.sort_by(|a, b| a.0.cmp(b.0));

    let max_k = per_node.iter().map(|(_, _, e)| e.len()).max().ok_or(SchedulerError::Infeasible)?;
    for k in 1..=max_k {
        let mut best: Option<(&str, Vec<&RunningInstance>)> = None;
        for (node, free, eligible) in &per_node {
            let Some(combo) = first_feasible_combination(&request.resources, *free, eligible, k) else {
                continue;
            };
            let better = match &best {
                None => true,
                Some((_, current)) => {
                    let ord = combo
                        .iter()
                        .zip(current)
                        .map(|(a, b)| a.victim_key_cmp(b))
                        .find(|o| *o != Ordering::Equal)
                        .unwrap_or(Ordering::Equal);
                    // nodes are visited in id order, so equal sets keep the earlier node
                    ord == Ordering::Less
                }
            };
            if better {
                best = Some((node, combo));
            }
        }
        if let Some((node, combo)) = best {
            return Ok(VictimSet { node: node.to_owned(), victims: combo.iter().map(|r| r.id().to_owned()).collect() });
        }
    }
    Err(SchedulerError::Infeasible)
}

/// First size-`k` combination, in lexicographic index order over `sorted`, that frees enough.
fn first_feasible_combination<'a>(
    need: &ResourceVector,
    free: ResourceVector,
    sorted: &[&'a RunningInstance],
    k: usize,
) -> Option<Vec<&'a RunningInstance>> {
    let n = sorted.len();
    if k > n {
        return None;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let total = free + idx.iter().map(|&i| sorted[i].request.resources).sum::<ResourceVector>();
        if need.fits(&total) {
            return Some(idx.iter().map(|&i| sorted[i]).collect());
        }
        // advance to the next combination
        let mut i = k;
        while i > 0 && idx[i - 1] == i - 1 + n - k {
            i -= 1;
        }
        if i == 0 {
            return None;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NodeSlot {
    capacity: ResourceVector,
    free: ResourceVector,
    schedulable: bool,
}

/// Scheduler for one site. All mutation goes through `&mut self`; the type is `Send` so the
/// owning event loop may move it between threads between events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteScheduler {
    config: SchedulerConfig,
    nodes: BTreeMap<String, NodeSlot>,
    running: BTreeMap<String, RunningInstance>,
    queue: Vec<InstanceRequest>,
    ledger: UsageLedger,
}

impl SiteScheduler {
    pub fn new<I>(config: SchedulerConfig, nodes: I) -> Self
    where
        I: IntoIterator<Item = (String, ResourceVector)>,
    {
        let mut ledger = UsageLedger::new(config.half_life_s);
        for (user, w) in &config.weights {
            ledger.set_weight(user, *w);
        }
        let nodes = nodes
            .into_iter()
            .map(|(id, capacity)| (id, NodeSlot { capacity, free: capacity, schedulable: true }))
            .collect();
        Self { config, nodes, running: BTreeMap::new(), queue: Vec::new(), ledger }
    }

    pub fn config(&self) -> &SchedulerConfig {
        &self.config
    }

    pub fn ledger(&self) -> &UsageLedger {
        &self.ledger
    }

    pub fn priority(&self, user: &str, t: u64) -> f64 {
        self.ledger.priority(user, t)
    }

    pub fn running(&self) -> impl Iterator<Item = &RunningInstance> {
        self.running.values()
    }

    pub fn instance(&self, id: &str) -> Option<&RunningInstance> {
        self.running.get(id)
    }

    pub fn is_queued(&self, id: &str) -> bool {
        self.queue.iter().any(|q| q.request_id == id)
    }

    /// Queued requests in dispatch order at time `t`.
    pub fn queue_order(&self, t: u64) -> Vec<&InstanceRequest> {
        let mut order: Vec<(&InstanceRequest, f64)> =
            self.queue.iter().map(|r| (r, self.ledger.priority(&r.user, t))).collect();
        order.sort_by(|(a, pa), (b, pb)| {
            pb.total_cmp(pa)
                .then_with(|| a.arrival_time.cmp(&b.arrival_time))
                .then_with(|| a.request_id.cmp(&b.request_id))
        });
        order.into_iter().map(|(r, _)| r).collect()
    }

    pub fn queued_len(&self) -> usize {
        self.queue.len()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn node_capacity(&self, node: &str) -> Option<ResourceVector> {
        self.nodes.get(node).map(|n| n.capacity)
    }

    pub fn node_free(&self, node: &str) -> Option<ResourceVector> {
        self.nodes.get(node).map(|n| n.free)
    }

    pub fn node_busy(&self, node: &str) -> bool {
        self.running.values().any(|r| r.node == node)
    }

    pub fn is_schedulable(&self, node: &str) -> bool {
        self.nodes.get(node).is_some_and(|n| n.schedulable)
    }

    /// Free capacity summed over schedulable nodes.
    pub fn free_capacity(&self) -> ResourceVector {
        self.nodes.values().filter(|n| n.schedulable).map(|n| n.free).sum()
    }

    /// Physical capacity of every node, schedulable or not.
    pub fn total_capacity(&self) -> ResourceVector {
        self.nodes.values().map(|n| n.capacity).sum()
    }

    pub fn used_capacity(&self) -> ResourceVector {
        self.running.values().map(|r| r.request.resources).sum()
    }

    pub fn group_usage(&self, group: &str) -> ResourceVector {
        self.running.values().filter(|r| r.request.group == group).map(|r| r.request.resources).sum()
    }

    fn quota_allows(&self, req: &InstanceRequest) -> bool {
        match self.config.quotas.get(&req.group) {
            None => true,
            Some(cap) => (self.group_usage(&req.group) + req.resources).fits(cap),
        }
    }

    fn check_request(&self, req: &InstanceRequest) -> Result<(), SchedulerError> {
        let invalid =
            |reason: &str| SchedulerError::InvalidRequest { id: req.request_id.clone(), reason: reason.to_owned() };
        if !req.resources.any_positive() {
            return Err(invalid("resources must have a positive component"));
        }
        if let InstanceClass::Preemptible { bid } = req.class {
            if !(bid.is_finite() && bid >= 0.0) {
                return Err(invalid("bid must be a non-negative number"));
            }
        }
        if self.running.contains_key(&req.request_id) || self.is_queued(&req.request_id) {
            return Err(SchedulerError::DuplicateRequestId(req.request_id.clone()));
        }
        Ok(())
    }

    /// Admits a request: starts it (preempting if allowed), queues it, or rejects it when it
    /// alone exceeds its group's quota.
    pub fn submit(&mut self, request: InstanceRequest, t: u64) -> Result<SubmitOutcome, SchedulerError> {
        self.check_request(&request)?;
        if let Some(cap) = self.config.quotas.get(&request.group) {
            if !request.resources.fits(cap) {
                return Ok(SubmitOutcome { decision: Decision::RejectedQuota, events: Vec::new() });
            }
        }
        let id = request.request_id.clone();
        self.queue.push(request);
        let events = self.dispatch(t);
        let decision = match self.running.get(&id) {
            Some(inst) => Decision::Started(inst.clone()),
            None => {
                let pos = self.queue_order(t).iter().position(|r| r.request_id == id).expect("request is queued");
                Decision::Queued(pos)
            }
        };
        Ok(SubmitOutcome { decision, events })
    }

    /// Starts queued requests in priority order until nothing more can start.
    pub fn dispatch(&mut self, t: u64) -> Vec<SchedEvent> {
        self.ledger.advance_to(t);
        let mut events = Vec::new();
        loop {
            let order: Vec<String> = self.queue_order(t).iter().map(|r| r.request_id.clone()).collect();
            let mut progressed = false;
            for id in order {
                let pos = self.queue.iter().position(|r| r.request_id == id).expect("queued");
                if self.try_start(pos, t, &mut events) {
                    progressed = true;
                } else if !self.config.backfill {
                    break;
                }
            }
            if !progressed || self.queue.is_empty() {
                break;
            }
        }
        events
    }

    fn try_start(&mut self, pos: usize, t: u64, events: &mut Vec<SchedEvent>) -> bool {
        let req = &self.queue[pos];
        if !self.quota_allows(req) {
            return false;
        }
        let nodes: Vec<(String, ResourceVector)> =
            self.nodes.iter().filter(|(_, n)| n.schedulable).map(|(id, n)| (id.clone(), n.free)).collect();
        let candidates: Vec<RunningInstance> =
            self.running.values().filter(|r| self.is_schedulable(&r.node)).cloned().collect();
        let Ok(choice) = select_victims(req, &nodes, &candidates) else {
            return false;
        };
        let req = self.queue.remove(pos);
        for victim in &choice.victims {
            let inst = self.remove_running(victim, t);
            events.push(SchedEvent::Preempted { victim: inst, by: req.request_id.clone() });
        }
        let slot = self.nodes.get_mut(&choice.node).expect("chosen node exists");
        slot.free = slot.free.checked_sub(&req.resources).expect("victim selection guarantees fit");
        let inst = RunningInstance { start_time: t.max(req.arrival_time), node: choice.node, request: req };
        self.running.insert(inst.id().to_owned(), inst.clone());
        events.push(SchedEvent::Started(inst));
        true
    }

    fn remove_running(&mut self, id: &str, t: u64) -> RunningInstance {
        let inst = self.running.remove(id).expect("instance is running");
        let slot = self.nodes.get_mut(&inst.node).expect("instance node exists");
        slot.free += inst.request.resources;
        let cpu_s = inst.request.resources.cpus as f64 * t.saturating_sub(inst.start_time) as f64;
        self.ledger.accrue(&inst.request.user, cpu_s, t);
        inst
    }

    /// Returns the instance's capacity, charges its cpu-seconds to the owner and dispatches.
    pub fn release(&mut self, instance_id: &str, t: u64) -> Result<(RunningInstance, Vec<SchedEvent>), SchedulerError> {
        if !self.running.contains_key(instance_id) {
            return Err(SchedulerError::UnknownInstance(instance_id.to_owned()));
        }
        let inst = self.remove_running(instance_id, t);
        let events = self.dispatch(t);
        Ok((inst, events))
    }

    /// Withdraws a queued request.
    pub fn cancel(&mut self, request_id: &str, t: u64) -> Result<(InstanceRequest, Vec<SchedEvent>), SchedulerError> {
        let pos = self
            .queue
            .iter()
            .position(|r| r.request_id == request_id)
            .ok_or_else(|| SchedulerError::UnknownRequest(request_id.to_owned()))?;
        let req = self.queue.remove(pos);
        let events = self.dispatch(t);
        Ok((req, events))
    }

    /// Restarts a running instance in place: usage so far is charged and the start time reset.
    pub fn restart(&mut self, instance_id: &str, t: u64) -> Result<(), SchedulerError> {
        let inst =
            self.running.get_mut(instance_id).ok_or_else(|| SchedulerError::UnknownInstance(instance_id.to_owned()))?;
        let cpu_s = inst.request.resources.cpus as f64 * t.saturating_sub(inst.start_time) as f64;
        inst.start_time = t;
        let user = inst.request.user.clone();
        self.ledger.accrue(&user, cpu_s, t);
        Ok(())
    }

    /// Includes or excludes a node from placement; running instances stay where they are.
    pub fn set_schedulable(
        &mut self,
        node: &str,
        schedulable: bool,
        t: u64,
    ) -> Result<Vec<SchedEvent>, SchedulerError> {
        let slot = self.nodes.get_mut(node).ok_or_else(|| SchedulerError::UnknownNode(node.to_owned()))?;
        let enabled = schedulable && !slot.schedulable;
        slot.schedulable = schedulable;
        Ok(if enabled { self.dispatch(t) } else { Vec::new() })
    }

    /// Checks capacity conservation per node and group quotas.
    pub fn audit(&self) -> Result<(), String> {
        for (id, slot) in &self.nodes {
            let used: ResourceVector =
                self.running.values().filter(|r| r.node == *id).map(|r| r.request.resources).sum();
            if slot.free + used != slot.capacity {
                return Err(format!("node {id}: free {} + running {used} != capacity {}", slot.free, slot.capacity));
            }
        }
        if let Some(r) = self.running.values().find(|r| !self.nodes.contains_key(&r.node)) {
            return Err(format!("instance {} runs on unknown node {}", r.id(), r.node));
        }
        for (group, cap) in &self.config.quotas {
            let used = self.group_usage(group);
            if !used.fits(cap) {
                return Err(format!("group {group} uses {used} above quota {cap}"));
            }
        }
        Ok(())
    }
}
