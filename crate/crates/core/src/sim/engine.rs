//! The discrete-event loop.
//!
//! Agenda entries are keyed by `(time, class, sequence)`: scenario events (class 0, in file
//! order) run before internal events (class 1, in scheduling order) at the same second. After
//! every entry the engine settles deployment work, reconciles elastic clusters, syncs the
//! partition directors, records metrics and audits every invariant.
//!
//! Randomness: deployment ids come from a ChaCha8 stream seeded with the scenario seed; site
//! recovery jitter draws from stream 1 of the same seed, one draw per site failure in
//! processing order.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uuid::Uuid;

use crate::config::OrchConfig;
use crate::elasticity::{
    Action, ElasticPolicy, NodeRecord, Occupancy, PartitionDirector, Power, Role, RoleTransition, StableRole,
    VirtualCluster,
};
use crate::iam::{IamError, IamService};
use crate::orchestrator::{
    AttemptOutcome, DeploymentRecord, DeploymentState, Orchestrator, OrchestratorError, ProviderStatus, SiteEvent,
};
use crate::ranker::PreferenceList;
use crate::resource::ResourceVector;
use crate::scheduler::{Decision, InstanceClass, InstanceRequest, SchedEvent, SiteScheduler};
use crate::template::{self, DeploymentTemplate, NodeKind};

use super::report::{
    self, AttemptSummary, ClusterState, DeclaredNode, DeploymentOutcome, FinalState, JobMetrics, LogEvent, LogRecord,
    Metrics, RunReport, SiteMetrics, SiteState, WorkerState,
};
use super::scenario::{EventAction, ProviderSpec, Scenario, ScenarioEvent, UserSpec};
use super::SimError;

/// Subject of the token the engine uses for automatic releases.
pub const ENGINE_SUBJECT: &str = "orchestrator";

struct Site {
    spec: ProviderSpec,
    sched: SiteScheduler,
    director: PartitionDirector,
    failed_until: Option<u64>,
}

impl Site {
    fn node_ids(&self) -> Vec<String> {
        (0..self.spec.nodes.len()).map(|i| self.spec.node_id(i)).collect()
    }

    /// Capacity of the cloud pool as monitoring reports it: free plus whatever preemptible
    /// instances hold. A failure is not visible here.
    fn status(&self) -> ProviderStatus {
        let cloud = |node: &str| self.director.node(node).is_some_and(|n| n.role == Role::Cloud);
        let free: ResourceVector = self
            .director
            .nodes()
            .filter(|n| n.role == Role::Cloud)
            .filter_map(|n| self.sched.node_free(&n.node_id))
            .sum();
        let reclaimable: ResourceVector = self
            .sched
            .running()
            .filter(|r| matches!(r.request.class, InstanceClass::Preemptible { .. }) && cloud(&r.node))
            .map(|r| r.request.resources)
            .sum();
        ProviderStatus {
            provider_id: self.spec.provider_id.clone(),
            availability: self.spec.availability,
            latency_ms: self.spec.latency_ms,
            free_capacity: free + reclaimable,
        }
    }

    fn should_schedule(&self, node: &str) -> bool {
        self.failed_until.is_none() && self.director.node(node).is_some_and(|n| n.role == Role::Cloud)
    }
}

struct DepRuntime {
    reference: String,
    user: String,
    group: String,
    duration_s: Option<u64>,
    site: Option<String>,
    attempt_no: usize,
    /// Set while the engine itself is adding or removing this deployment's instances.
    busy: bool,
    accepted: bool,
    lost: bool,
    instances: BTreeSet<String>,
    pending: BTreeSet<String>,
    clusters: Vec<String>,
}

#[derive(Clone)]
enum Owner {
    Node { uuid: Uuid },
    Worker { uuid: Uuid, cluster: String, boot: bool },
}

impl Owner {
    fn uuid(&self) -> Uuid {
        match self {
            Owner::Node { uuid } | Owner::Worker { uuid, .. } => *uuid,
        }
    }
}

struct ClusterRuntime {
    site: String,
    active: bool,
    user: String,
    group: String,
    class: InstanceClass,
    vc: VirtualCluster,
}

enum Work {
    Accept { uuid: Uuid, attempt_no: usize },
    AttemptFailed { uuid: Uuid, attempt_no: usize, reason: String },
}

#[derive(Debug, Clone)]
enum Agenda {
    Scenario(usize),
    JobComplete { cluster: String, job: String, started_at: u64 },
    WorkerReady { cluster: String, worker: String, ready_at: u64 },
    ElasticTick,
    AutoRelease(Uuid),
    SiteRecover(String),
}

#[derive(Default)]
struct Stats {
    series: BTreeMap<String, Vec<(u64, u64)>>,
    live: BTreeMap<(String, String), (String, u64, u64)>,
    user_cpu: BTreeMap<String, u64>,
    started: u64,
    wait_sum: u64,
    preemptions: u64,
    jobs_submitted: u64,
    jobs_completed: u64,
    jobs_started_once: BTreeSet<(String, String)>,
    job_wait_sum: u64,
    rejected: u64,
}

/// Mutable simulation state other than the orchestrator and the token service.
struct World {
    sites: BTreeMap<String, Site>,
    deps: BTreeMap<Uuid, DepRuntime>,
    refs: BTreeMap<String, Uuid>,
    clusters: BTreeMap<String, ClusterRuntime>,
    owners: BTreeMap<(String, String), Owner>,
    jobs_seen: BTreeSet<(String, String)>,
    log: Vec<LogRecord>,
    logged_history: BTreeMap<Uuid, usize>,
    backlog: VecDeque<Work>,
    agenda: BTreeMap<(u64, u8, u64), Agenda>,
    next_internal: u64,
    ticks: BTreeSet<u64>,
    boot_delay_s: u64,
    stats: Stats,
    fault: Option<String>,
}

impl World {
    fn log(&mut self, t: u64, event: LogEvent) {
        let seq = self.log.len() as u64;
        self.log.push(LogRecord { seq, t, event });
    }

    fn fault(&mut self, message: String) {
        self.fault.get_or_insert(message);
    }

    fn schedule(&mut self, t: u64, entry: Agenda) {
        self.agenda.insert((t, 1, self.next_internal), entry);
        self.next_internal += 1;
    }

    fn log_history(&mut self, rec: &DeploymentRecord) {
        let done = self.logged_history.entry(rec.uuid).or_insert(1);
        let pending: Vec<_> = rec.history[*done..].to_vec();
        *done = rec.history.len();
        for tr in pending {
            let from = tr.from.expect("only the first transition lacks a source");
            self.log(tr.t, LogEvent::StateChanged { uuid: rec.uuid, from, to: tr.to });
        }
    }

    fn handle(&mut self, site: &str, events: Vec<SchedEvent>, t: u64) {
        for ev in events {
            match ev {
                SchedEvent::Started(inst) => {
                    let id = inst.id().to_owned();
                    let r = inst.request.resources;
                    self.log(
                        t,
                        LogEvent::InstanceStarted {
                            site: site.to_owned(),
                            instance: id.clone(),
                            node: inst.node.clone(),
                            user: inst.request.user.clone(),
                            cpus: r.cpus,
                            mem_mb: r.mem_mb,
                            disk_gb: r.disk_gb,
                            arrival: inst.request.arrival_time,
                        },
                    );
                    self.stats.started += 1;
                    self.stats.wait_sum += t - inst.request.arrival_time;
                    self.stats.live.insert((site.to_owned(), id.clone()), (inst.request.user.clone(), r.cpus, t));
                    let Some(owner) = self.owners.get(&(site.to_owned(), id.clone())).cloned() else {
                        self.fault(format!("instance {id} started on {site} without an owner"));
                        continue;
                    };
                    if let Owner::Worker { cluster, boot, .. } = &owner {
                        let ready_at = if *boot { t + self.boot_delay_s } else { t };
                        if let Some(c) = self.clusters.get_mut(cluster) {
                            if let Err(e) = c.vc.worker_started(&id, Some(ready_at), t) {
                                self.fault(e.to_string());
                            }
                            self.log(t, LogEvent::PowerOn { cluster: cluster.clone(), worker: id.clone(), ready_at });
                            if ready_at > t {
                                self.schedule(
                                    ready_at,
                                    Agenda::WorkerReady { cluster: cluster.clone(), worker: id.clone(), ready_at },
                                );
                            }
                        }
                    }
                    let uuid = owner.uuid();
                    if let Some(dep) = self.deps.get_mut(&uuid) {
                        dep.pending.remove(&id);
                        dep.instances.insert(id);
                        if !dep.busy && !dep.accepted && !dep.lost && dep.pending.is_empty() {
                            let attempt_no = dep.attempt_no;
                            self.backlog.push_back(Work::Accept { uuid, attempt_no });
                        }
                    }
                }
                SchedEvent::Preempted { victim, by } => {
                    let id = victim.id().to_owned();
                    self.log(t, LogEvent::InstancePreempted { site: site.to_owned(), instance: id.clone(), by });
                    self.stats.preemptions += 1;
                    self.end_live(site, &id, t);
                    let Some(owner) = self.owners.remove(&(site.to_owned(), id.clone())) else {
                        self.fault(format!("preempted instance {id} on {site} has no owner"));
                        continue;
                    };
                    if let Owner::Worker { cluster, .. } = &owner {
                        self.stop_worker(cluster, &id, t);
                        self.log(t, LogEvent::WorkerLost { cluster: cluster.clone(), worker: id.clone() });
                    }
                    let uuid = owner.uuid();
                    if let Some(dep) = self.deps.get_mut(&uuid) {
                        dep.instances.remove(&id);
                        if !dep.accepted && !dep.busy && !dep.lost {
                            dep.lost = true;
                            let attempt_no = dep.attempt_no;
                            self.backlog.push_back(Work::AttemptFailed {
                                uuid,
                                attempt_no,
                                reason: format!("instance {id} preempted during placement"),
                            });
                        } else if !dep.accepted {
                            dep.lost = true;
                        }
                    }
                }
            }
        }
    }

    fn end_live(&mut self, site: &str, id: &str, t: u64) {
        if let Some((user, cpus, start)) = self.stats.live.remove(&(site.to_owned(), id.to_owned())) {
            *self.stats.user_cpu.entry(user).or_default() += cpus * (t - start);
        }
    }

    fn stop_worker(&mut self, cluster: &str, worker: &str, t: u64) {
        let Some(c) = self.clusters.get_mut(cluster) else { return };
        match c.vc.worker_stopped(worker, t) {
            Ok(jobs) => {
                for j in jobs {
                    self.log(t, LogEvent::JobRequeued { cluster: cluster.to_owned(), job: j.job_id });
                }
            }
            Err(e) => self.fault(e.to_string()),
        }
    }

    fn release_instance(&mut self, site: &str, id: &str, t: u64) {
        let Some(s) = self.sites.get_mut(site) else { return };
        match s.sched.release(id, t) {
            Ok((_, events)) => {
                self.log(t, LogEvent::InstanceReleased { site: site.to_owned(), instance: id.to_owned() });
                self.end_live(site, id, t);
                self.owners.remove(&(site.to_owned(), id.to_owned()));
                self.handle(site, events, t);
            }
            Err(e) => self.fault(format!("release of {id} on {site}: {e}")),
        }
    }

    fn cancel_request(&mut self, site: &str, id: &str, t: u64, logged: bool) {
        let Some(s) = self.sites.get_mut(site) else { return };
        match s.sched.cancel(id, t) {
            Ok((_, events)) => {
                if logged {
                    self.log(t, LogEvent::InstanceCanceled { site: site.to_owned(), instance: id.to_owned() });
                }
                self.owners.remove(&(site.to_owned(), id.to_owned()));
                self.handle(site, events, t);
            }
            Err(e) => self.fault(format!("cancel of {id} on {site}: {e}")),
        }
    }

    /// Submits one request on behalf of `owner`. `Err` carries a rejection reason.
    fn submit_request(&mut self, site: &str, req: InstanceRequest, owner: Owner, t: u64) -> Result<bool, String> {
        let id = req.request_id.clone();
        let key = (site.to_owned(), id.clone());
        self.owners.insert(key.clone(), owner);
        let s = self.sites.get_mut(site).expect("site exists");
        match s.sched.submit(req, t) {
            Ok(outcome) => {
                let queued = matches!(outcome.decision, Decision::Queued(_));
                if outcome.decision == Decision::RejectedQuota {
                    self.owners.remove(&key);
                    return Err(format!("{id} exceeds the group quota on {site}"));
                }
                self.handle(site, outcome.events, t);
                Ok(queued)
            }
            Err(e) => {
                self.owners.remove(&key);
                Err(e.to_string())
            }
        }
    }

    /// Removes every site resource a deployment holds: its clusters (aborting their jobs),
    /// its queued requests and its running instances.
    fn teardown(&mut self, uuid: Uuid, t: u64) {
        let Some(dep) = self.deps.get_mut(&uuid) else { return };
        dep.busy = true;
        let clusters = std::mem::take(&mut dep.clusters);
        let Some(site) = dep.site.clone() else {
            dep.busy = false;
            return;
        };
        for name in clusters {
            if let Some(c) = self.clusters.remove(&name) {
                let mut aborted: Vec<String> = c.vc.running_jobs().map(|s| s.job.job_id.clone()).collect();
                aborted.extend(c.vc.queued().map(|j| j.job_id.clone()));
                for job in aborted {
                    self.log(t, LogEvent::JobAborted { cluster: name.clone(), job });
                }
                self.log(t, LogEvent::ClusterRemoved { cluster: name.clone() });
            }
        }
        loop {
            let dep = &self.deps[&uuid];
            if let Some(id) = dep.pending.first().cloned() {
                self.deps.get_mut(&uuid).expect("dep").pending.remove(&id);
                self.cancel_request(&site, &id, t, true);
            } else if let Some(id) = dep.instances.first().cloned() {
                self.deps.get_mut(&uuid).expect("dep").instances.remove(&id);
                self.release_instance(&site, &id, t);
            } else {
                break;
            }
        }
        let dep = self.deps.get_mut(&uuid).expect("dep");
        dep.site = None;
        dep.busy = false;
        dep.accepted = false;
    }

    /// Queues and starts everything the template needs on `site`.
    fn submit_to_site(
        &mut self,
        uuid: Uuid,
        site: &str,
        template: &DeploymentTemplate,
        elastic: &ElasticPolicy,
        t: u64,
    ) -> Result<(), String> {
        let dep = self.deps.get_mut(&uuid).expect("dep");
        dep.site = Some(site.to_owned());
        dep.busy = true;
        dep.lost = false;
        dep.attempt_no += 1;
        let reference = dep.reference.clone();
        let user = dep.user.clone();
        let group = dep.group.clone();
        let order = template::topological_order(template).map_err(|e| e.to_string())?;
        let mut result = Ok(());
        for name in order {
            let node = &template.nodes[&name];
            let class = match (node.preemptible, node.bid) {
                (true, bid) => InstanceClass::Preemptible { bid: bid.unwrap_or(0.0) },
                _ => InstanceClass::Normal,
            };
            let request = |id: String, resources: ResourceVector| InstanceRequest {
                request_id: id,
                user: user.clone(),
                group: group.clone(),
                resources,
                class,
                arrival_time: t,
            };
            match (node.kind, node.resources) {
                (NodeKind::Compute, Some(res)) => {
                    let id = format!("{reference}.{name}");
                    result = self.place_one(uuid, site, request(id, res), Owner::Node { uuid }, t);
                }
                (NodeKind::ElasticCluster, Some(res)) => {
                    let cname = format!("{reference}.{name}");
                    let mut policy = *elastic;
                    policy.min_nodes = node.min_workers.unwrap_or(0).max(elastic.min_nodes);
                    policy.max_nodes = node.max_workers.unwrap_or(0).min(elastic.max_nodes);
                    policy.min_nodes = policy.min_nodes.min(policy.max_nodes);
                    let vc = VirtualCluster::new(cname.clone(), res, policy, t);
                    let first: Vec<String> =
                        vc.workers().take(policy.min_nodes as usize).map(|w| w.record.node_id.clone()).collect();
                    self.log(
                        t,
                        LogEvent::ClusterCreated {
                            site: site.to_owned(),
                            cluster: cname.clone(),
                            min_nodes: policy.min_nodes,
                            max_nodes: policy.max_nodes,
                        },
                    );
                    self.clusters.insert(
                        cname.clone(),
                        ClusterRuntime {
                            site: site.to_owned(),
                            active: false,
                            user: user.clone(),
                            group: group.clone(),
                            class,
                            vc,
                        },
                    );
                    self.deps.get_mut(&uuid).expect("dep").clusters.push(cname.clone());
                    for w in first {
                        let owner = Owner::Worker { uuid, cluster: cname.clone(), boot: false };
                        result = self.place_one(uuid, site, request(w, res), owner, t);
                        if result.is_err() {
                            break;
                        }
                    }
                }
                _ => {}
            }
            if result.is_err() {
                break;
            }
        }
        self.deps.get_mut(&uuid).expect("dep").busy = false;
        result
    }

    fn place_one(&mut self, uuid: Uuid, site: &str, req: InstanceRequest, owner: Owner, t: u64) -> Result<(), String> {
        let id = req.request_id.clone();
        let user = req.user.clone();
        if self.submit_request(site, req, owner, t)? {
            self.deps.get_mut(&uuid).expect("dep").pending.insert(id.clone());
            self.log(t, LogEvent::InstanceQueued { site: site.to_owned(), instance: id, user });
        }
        Ok(())
    }

    fn sync_partitions(&mut self, t: u64) {
        let names: Vec<String> = self.sites.keys().cloned().collect();
        for name in names {
            loop {
                let mut changed = false;
                let nodes = self.sites[&name].node_ids();
                for node in nodes {
                    let site = self.sites.get_mut(&name).expect("site");
                    let busy = site.sched.node_busy(&node);
                    let draining = site.director.node(&node).is_some_and(|n| n.role.is_draining());
                    let recorded = site.director.node(&node).is_some_and(NodeRecord::is_busy);
                    if busy == recorded && !(draining && !busy) {
                        continue;
                    }
                    match site.director.set_busy(&node, busy, t) {
                        Ok(Some(RoleTransition::Switched { node: n, from, to })) => {
                            let schedulable = site.should_schedule(&n);
                            let events = site.sched.set_schedulable(&n, schedulable, t);
                            self.log(t, LogEvent::RoleSwitched { site: name.clone(), node: n, from, to });
                            match events {
                                Ok(events) => self.handle(&name, events, t),
                                Err(e) => self.fault(e.to_string()),
                            }
                            changed = true;
                        }
                        Ok(_) => {}
                        Err(e) => self.fault(e.to_string()),
                    }
                }
                if !changed {
                    break;
                }
            }
        }
    }

    fn start_jobs(&mut self, cluster: &str, t: u64) {
        let Some(c) = self.clusters.get_mut(cluster) else { return };
        let started = c.vc.schedule_jobs(t);
        for s in started {
            let key = (cluster.to_owned(), s.job.job_id.clone());
            if self.stats.jobs_started_once.insert(key) {
                self.stats.job_wait_sum += t - s.job.submitted_at;
            }
            self.log(
                t,
                LogEvent::JobStarted { cluster: cluster.to_owned(), job: s.job.job_id.clone(), worker: s.worker },
            );
            self.schedule(
                t + s.job.duration_s,
                Agenda::JobComplete { cluster: cluster.to_owned(), job: s.job.job_id, started_at: t },
            );
        }
    }

    fn power_on(&mut self, cluster: &str, worker: &str, t: u64) {
        let c = &self.clusters[cluster];
        let site = c.site.clone();
        let uuid = match self.owners.values().find_map(|o| match o {
            Owner::Worker { uuid, cluster: cl, .. } if cl == cluster => Some(*uuid),
            _ => None,
        }) {
            Some(u) => u,
            None => match self.deps.iter().find(|(_, d)| d.clusters.iter().any(|n| n == cluster)) {
                Some((u, _)) => *u,
                None => return,
            },
        };
        let req = InstanceRequest {
            request_id: worker.to_owned(),
            user: c.user.clone(),
            group: c.group.clone(),
            resources: c.vc.worker_capacity,
            class: c.class,
            arrival_time: t,
        };
        let owner = Owner::Worker { uuid, cluster: cluster.to_owned(), boot: true };
        match self.submit_request(&site, req, owner, t) {
            Ok(false) => {}
            Ok(true) => {
                self.log(t, LogEvent::PowerOnDeferred { cluster: cluster.to_owned(), worker: worker.to_owned() });
                self.cancel_request(&site, worker, t, false);
            }
            Err(_) => {
                self.log(t, LogEvent::PowerOnDeferred { cluster: cluster.to_owned(), worker: worker.to_owned() });
            }
        }
    }

    fn power_off(&mut self, cluster: &str, worker: &str, t: u64) {
        let site = self.clusters[cluster].site.clone();
        self.stop_worker(cluster, worker, t);
        self.log(t, LogEvent::PowerOff { cluster: cluster.to_owned(), worker: worker.to_owned() });
        let owner = self.owners.get(&(site.clone(), worker.to_owned())).cloned();
        if let Some(dep) = owner.and_then(|o| self.deps.get_mut(&o.uuid())) {
            dep.instances.remove(worker);
        }
        self.release_instance(&site, worker, t);
    }

    fn step_clusters(&mut self, t: u64) {
        let names: Vec<String> = self.clusters.iter().filter(|(_, c)| c.active).map(|(n, _)| n.clone()).collect();
        for name in names {
            self.start_jobs(&name, t);
            let Some(c) = self.clusters.get(&name) else { continue };
            for action in c.vc.plan(t) {
                match action {
                    Action::PowerOn(w) => self.power_on(&name, &w, t),
                    Action::PowerOff(w) => self.power_off(&name, &w, t),
                }
            }
            self.start_jobs(&name, t);
            if let Some(d) = self.clusters.get(&name).and_then(|c| c.vc.next_idle_deadline(t)) {
                if self.ticks.insert(d) {
                    self.schedule(d, Agenda::ElasticTick);
                }
            }
        }
    }

    fn record_series(&mut self, t: u64) {
        for (name, site) in &self.sites {
            let used = site.sched.used_capacity().cpus;
            report::push_point(self.stats.series.entry(name.clone()).or_insert_with(|| vec![(0, 0)]), t, used);
        }
    }
}

/// A running simulation. Scenario events are replayed by [`Engine::finish`]; callers may also
/// drive it directly with [`Engine::submit`] and [`Engine::delete`].
pub struct Engine {
    horizon_s: u64,
    config: OrchConfig,
    templates: BTreeMap<String, String>,
    users: BTreeMap<String, UserSpec>,
    events: Vec<ScenarioEvent>,
    iam: IamService,
    orch: Orchestrator,
    tokens: BTreeMap<String, String>,
    admin_token: String,
    jitter: ChaCha8Rng,
    jitter_max: u64,
    now: u64,
    world: World,
}

impl Engine {
    pub fn new(scenario: Scenario) -> Result<Self, SimError> {
        let Scenario {
            seed,
            horizon_s,
            config,
            recovery_jitter_s,
            providers,
            slas,
            datasets,
            users,
            templates,
            events,
        } = scenario;
        let mut iam = IamService::new(seed);
        for rule in &config.policy {
            iam.add_rule(rule.clone()).map_err(|e| SimError::Scenario { line: 0, message: e.to_string() })?;
        }
        let orch = Orchestrator::new(config.ranker, config.prefs.clone(), slas, datasets, seed);
        let mut jitter = ChaCha8Rng::seed_from_u64(seed);
        jitter.set_stream(1);

        let mut world = World {
            sites: BTreeMap::new(),
            deps: BTreeMap::new(),
            refs: BTreeMap::new(),
            clusters: BTreeMap::new(),
            owners: BTreeMap::new(),
            jobs_seen: BTreeSet::new(),
            log: Vec::new(),
            logged_history: BTreeMap::new(),
            backlog: VecDeque::new(),
            agenda: BTreeMap::new(),
            next_internal: 0,
            ticks: BTreeSet::new(),
            boot_delay_s: config.elastic.boot_delay_s,
            stats: Stats::default(),
            fault: None,
        };
        let mut sched_cfg = config.scheduler.clone();
        for u in &users {
            sched_cfg.weights.entry(u.name.clone()).or_insert(u.weight);
        }
        for p in providers {
            let ids: Vec<(String, ResourceVector)> =
                p.nodes.iter().enumerate().map(|(i, n)| (p.node_id(i), n.capacity)).collect();
            let mut sched = SiteScheduler::new(sched_cfg.clone(), ids.clone());
            let director = PartitionDirector::new(
                p.nodes
                    .iter()
                    .enumerate()
                    .map(|(i, n)| NodeRecord::new(p.node_id(i), n.capacity, Power::On, n.role.role(), 0)),
            );
            for (i, n) in p.nodes.iter().enumerate() {
                if n.role != StableRole::Cloud {
                    sched
                        .set_schedulable(&p.node_id(i), false, 0)
                        .map_err(|e| SimError::InvariantViolation { t: 0, message: e.to_string() })?;
                }
            }
            let declared = p
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| DeclaredNode { node: p.node_id(i), role: n.role.role(), capacity: n.capacity })
                .collect();
            world.log(0, LogEvent::SiteDeclared { site: p.provider_id.clone(), nodes: declared });
            world.stats.series.insert(p.provider_id.clone(), vec![(0, 0)]);
            world.sites.insert(p.provider_id.clone(), Site { spec: p, sched, director, failed_until: None });
        }

        let ttl = horizon_s + 1;
        let admin = iam
            .issue_token(ENGINE_SUBJECT, [crate::iam::ADMIN_GROUP.to_owned()], ttl, 0)
            .map_err(|e| SimError::Scenario { line: 0, message: e.to_string() })?;
        world.log(
            0,
            LogEvent::TokenIssued {
                subject: admin.subject.clone(),
                token_id: admin.token_id.clone(),
                expires_at: admin.expires_at,
            },
        );
        let mut tokens = BTreeMap::new();
        for u in &users {
            let tok = iam
                .issue_token(&u.name, [u.group.clone()], u.ttl_s.unwrap_or(ttl), 0)
                .map_err(|e| SimError::Scenario { line: 0, message: e.to_string() })?;
            world.log(
                0,
                LogEvent::TokenIssued {
                    subject: u.name.clone(),
                    token_id: tok.token_id.clone(),
                    expires_at: tok.expires_at,
                },
            );
            tokens.insert(u.name.clone(), tok.token_id);
        }
        for (i, ev) in events.iter().enumerate() {
            world.agenda.insert((ev.at, 0, i as u64), Agenda::Scenario(i));
        }

        Ok(Engine {
            horizon_s,
            config,
            templates,
            users: users.into_iter().map(|u| (u.name.clone(), u)).collect(),
            events,
            iam,
            orch,
            tokens,
            admin_token: admin.token_id,
            jitter,
            jitter_max: recovery_jitter_s,
            now: 0,
            world,
        })
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn orchestrator(&self) -> &Orchestrator {
        &self.orch
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.world.log
    }

    pub fn reference_of(&self, uuid: Uuid) -> Option<&str> {
        self.world.deps.get(&uuid).map(|d| d.reference.as_str())
    }

    /// Processes every agenda entry due at or before `t` (capped at the horizon).
    pub fn run_until(&mut self, t: u64) -> Result<(), SimError> {
        let limit = t.min(self.horizon_s);
        while let Some((&key, _)) = self.world.agenda.first_key_value() {
            if key.0 > limit {
                break;
            }
            let (_, entry) = self.world.agenda.pop_first().expect("non-empty");
            self.now = key.0;
            self.dispatch(entry)?;
            self.after_event()?;
        }
        self.now = self.now.max(limit);
        Ok(())
    }

    fn dispatch(&mut self, entry: Agenda) -> Result<(), SimError> {
        let t = self.now;
        match entry {
            Agenda::Scenario(i) => {
                let ev = self.events[i].clone();
                self.scenario_event(ev.action, t);
            }
            Agenda::JobComplete { cluster, job, started_at } => {
                if let Some(c) = self.world.clusters.get_mut(&cluster) {
                    let current = c.vc.running_jobs().any(|s| s.job.job_id == job && s.started_at == started_at);
                    if current {
                        match c.vc.finish_job(&job, t) {
                            Ok(_) => {
                                self.world.stats.jobs_completed += 1;
                                self.world.log(t, LogEvent::JobCompleted { cluster, job });
                            }
                            Err(e) => self.world.fault(e.to_string()),
                        }
                    }
                }
            }
            Agenda::WorkerReady { cluster, worker, ready_at } => {
                if let Some(c) = self.world.clusters.get_mut(&cluster) {
                    let booting = c.vc.worker(&worker).is_some_and(|w| w.record.power == Power::Booting { ready_at });
                    if booting {
                        match c.vc.worker_ready(&worker, t) {
                            Ok(()) => self.world.log(t, LogEvent::WorkerReady { cluster, worker }),
                            Err(e) => self.world.fault(e.to_string()),
                        }
                    }
                }
            }
            Agenda::ElasticTick => {
                self.world.ticks.remove(&t);
            }
            Agenda::AutoRelease(uuid) => {
                let token = self.admin_token.clone();
                let reference = self.world.deps.get(&uuid).map(|d| d.reference.clone()).unwrap_or_default();
                if let Err(e) = self.delete_with(uuid, &token, t) {
                    self.world
                        .log(t, LogEvent::DeleteRejected { reference, error: e.kind().into(), message: e.to_string() });
                }
            }
            Agenda::SiteRecover(site) => {
                if self.world.sites.get(&site).is_some_and(|s| s.failed_until == Some(t)) {
                    self.recover_site(&site, t);
                }
            }
        }
        Ok(())
    }

    fn scenario_event(&mut self, action: EventAction, t: u64) {
        match action {
            EventAction::Submit { template, user, reference, duration_s, prefs } => {
                let text = self.templates[&template].clone();
                let _ = self.submit(&reference, &text, &user, prefs, duration_s, t);
            }
            EventAction::Delete { reference } => {
                let Some(&uuid) = self.world.refs.get(&reference) else {
                    self.world.log(
                        t,
                        LogEvent::DeleteRejected {
                            reference,
                            error: "NotFound".into(),
                            message: "deployment was never created".into(),
                        },
                    );
                    return;
                };
                let user = self.world.deps[&uuid].user.clone();
                let _ = self.delete(uuid, &user, t);
            }
            EventAction::FailSite { provider, duration_s } => self.fail_site(&provider, duration_s, t),
            EventAction::Revoke { user } => {
                if let Some(tok) = self.tokens.get(&user) {
                    if self.iam.revoke(tok).is_ok() {
                        self.world.log(t, LogEvent::TokenRevoked { subject: user });
                    }
                }
            }
            EventAction::Job { reference, cluster, job_id, resources, duration_s } => {
                self.submit_job(&reference, cluster.as_deref(), &job_id, resources, duration_s, t)
            }
            EventAction::SwitchRole { node, to } => self.switch_role(&node, to, t),
        }
    }

    /// Creates a deployment for `user` and starts placing it. Rejections are logged and returned.
    pub fn submit(
        &mut self,
        reference: &str,
        template_text: &str,
        user: &str,
        prefs: Option<PreferenceList>,
        duration_s: Option<u64>,
        t: u64,
    ) -> Result<Uuid, OrchestratorError> {
        let created = match self.tokens.get(user) {
            Some(tok) => self.orch.create_deployment(template_text, tok, &self.iam, prefs, t),
            None => Err(OrchestratorError::Auth(IamError::Unknown)),
        };
        let uuid = match created {
            Ok(uuid) => uuid,
            Err(e) => {
                self.world.stats.rejected += 1;
                self.world.log(
                    t,
                    LogEvent::DeploymentRejected {
                        reference: reference.to_owned(),
                        user: user.to_owned(),
                        error: e.kind().into(),
                        message: e.to_string(),
                    },
                );
                return Err(e);
            }
        };
        self.world
            .log(t, LogEvent::DeploymentCreated { reference: reference.to_owned(), uuid, owner: user.to_owned() });
        self.world.refs.insert(reference.to_owned(), uuid);
        let group = self.users.get(user).map(|u| u.group.clone()).unwrap_or_default();
        self.world.deps.insert(
            uuid,
            DepRuntime {
                reference: reference.to_owned(),
                user: user.to_owned(),
                group,
                duration_s,
                site: None,
                attempt_no: 0,
                busy: false,
                accepted: false,
                lost: false,
                instances: BTreeSet::new(),
                pending: BTreeSet::new(),
                clusters: Vec::new(),
            },
        );
        let statuses: Vec<ProviderStatus> = self.world.sites.values().map(Site::status).collect();
        match self.orch.place(uuid, &self.iam, &statuses, t) {
            Ok(ranked) => {
                self.world.log(t, LogEvent::Ranked { uuid, ranked });
                self.attempt(uuid, t);
            }
            Err(e) => {
                self.world.log(t, LogEvent::PlacementFailed { uuid, error: e.kind().into() });
                let rec = self.orch.get_deployment(uuid).expect("record exists").clone();
                self.world.log_history(&rec);
            }
        }
        self.settle(t);
        Ok(uuid)
    }

    /// Deletes a deployment with `user`'s token. Rejections are logged and returned.
    pub fn delete(&mut self, uuid: Uuid, user: &str, t: u64) -> Result<DeploymentRecord, OrchestratorError> {
        let reference = self.world.deps.get(&uuid).map(|d| d.reference.clone()).unwrap_or_else(|| uuid.to_string());
        let result = match self.tokens.get(user).cloned() {
            Some(tok) => self.delete_with(uuid, &tok, t),
            None => Err(OrchestratorError::Auth(IamError::Unknown)),
        };
        if let Err(e) = &result {
            self.world.log(t, LogEvent::DeleteRejected { reference, error: e.kind().into(), message: e.to_string() });
        }
        result
    }

    fn delete_with(&mut self, uuid: Uuid, token: &str, t: u64) -> Result<DeploymentRecord, OrchestratorError> {
        let world = &mut self.world;
        let rec = self.orch.delete_deployment(uuid, token, &self.iam, t, |rec| {
            world.log_history(rec);
            world.teardown(uuid, t);
        })?;
        self.world.log_history(&rec);
        self.settle(t);
        Ok(rec)
    }

    /// Tries the deployment's current target, moving down the ranked list on immediate failures.
    fn attempt(&mut self, uuid: Uuid, t: u64) {
        loop {
            let rec = self.orch.get_deployment(uuid).expect("record exists");
            let Some(site) = rec.current_target().map(str::to_owned) else { return };
            let template = rec.template.clone();
            self.world.log(t, LogEvent::SiteSubmitted { uuid, site: site.clone() });
            let failed = self.world.sites.get(&site).is_none_or(|s| s.failed_until.is_some());
            let outcome = if failed {
                Err("site unavailable".to_owned())
            } else {
                let elastic = self.config.elastic;
                let r = self.world.submit_to_site(uuid, &site, &template, &elastic, t);
                if r.is_err() {
                    self.world.teardown(uuid, t);
                }
                r
            };
            match outcome {
                Ok(()) => {
                    let dep = &self.world.deps[&uuid];
                    if dep.pending.is_empty() && !dep.lost {
                        let attempt_no = dep.attempt_no;
                        self.world.backlog.push_back(Work::Accept { uuid, attempt_no });
                    }
                    return;
                }
                Err(reason) => self.fail_attempt(uuid, &site, reason, t),
            }
        }
    }

    fn fail_attempt(&mut self, uuid: Uuid, site: &str, reason: String, t: u64) {
        self.world.log(t, LogEvent::AttemptFailed { uuid, site: site.to_owned(), reason: reason.clone() });
        match self.orch.advance(uuid, SiteEvent::SiteFailed { reason }, t) {
            Ok(rec) => {
                let rec = rec.clone();
                self.world.log_history(&rec);
            }
            Err(e) => self.world.fault(e.to_string()),
        }
    }

    fn settle(&mut self, t: u64) {
        while let Some(work) = self.world.backlog.pop_front() {
            match work {
                Work::Accept { uuid, attempt_no } => {
                    let Some(dep) = self.world.deps.get(&uuid) else { continue };
                    if dep.accepted || dep.lost || dep.attempt_no != attempt_no || !dep.pending.is_empty() {
                        continue;
                    }
                    if dep.site.is_none() {
                        continue;
                    }
                    let reference = dep.reference.clone();
                    let duration = dep.duration_s;
                    let clusters = dep.clusters.clone();
                    let template = &self.orch.get_deployment(uuid).expect("record").template;
                    let instances: BTreeMap<String, String> = template
                        .nodes
                        .values()
                        .filter(|n| n.kind.holds_resources())
                        .map(|n| (n.name.clone(), format!("{reference}.{}", n.name)))
                        .collect();
                    match self.orch.advance(uuid, SiteEvent::SiteAccepted { instances }, t) {
                        Ok(rec) => {
                            let rec = rec.clone();
                            self.world.log_history(&rec);
                        }
                        Err(e) => {
                            self.world.fault(e.to_string());
                            continue;
                        }
                    }
                    let dep = self.world.deps.get_mut(&uuid).expect("dep");
                    dep.accepted = true;
                    for c in clusters {
                        if let Some(c) = self.world.clusters.get_mut(&c) {
                            c.active = true;
                        }
                    }
                    if let Some(d) = duration {
                        self.world.schedule(t + d, Agenda::AutoRelease(uuid));
                    }
                }
                Work::AttemptFailed { uuid, attempt_no, reason } => {
                    let Some(dep) = self.world.deps.get(&uuid) else { continue };
                    if dep.accepted || dep.attempt_no != attempt_no {
                        continue;
                    }
                    let Some(site) = dep.site.clone() else { continue };
                    self.world.teardown(uuid, t);
                    self.fail_attempt(uuid, &site, reason, t);
                    self.attempt(uuid, t);
                }
            }
        }
    }

    fn fail_site(&mut self, provider: &str, duration_s: u64, t: u64) {
        let extra = if self.jitter_max > 0 { self.jitter.gen_range(0..=self.jitter_max) } else { 0 };
        let until = t + duration_s + extra;
        let Some(site) = self.world.sites.get_mut(provider) else { return };
        if site.failed_until.is_some() {
            site.failed_until = Some(until.max(site.failed_until.unwrap_or(0)));
        } else {
            site.failed_until = Some(until);
        }
        let until = site.failed_until.expect("set above");
        let errors: Vec<String> = site
            .node_ids()
            .into_iter()
            .filter_map(|node| site.sched.set_schedulable(&node, false, t).err().map(|e| e.to_string()))
            .collect();
        for e in errors {
            self.world.fault(e);
        }
        self.world.log(t, LogEvent::SiteFailed { site: provider.to_owned(), until });
        self.world.schedule(until, Agenda::SiteRecover(provider.to_owned()));

        let placing: Vec<(Uuid, usize)> = self
            .world
            .deps
            .iter()
            .filter(|(_, d)| !d.accepted && d.site.as_deref() == Some(provider))
            .map(|(u, d)| (*u, d.attempt_no))
            .collect();
        for (uuid, attempt_no) in placing {
            self.world.backlog.push_back(Work::AttemptFailed {
                uuid,
                attempt_no,
                reason: format!("site {provider} failed"),
            });
        }

        let mut restart = BTreeSet::new();
        for (uuid, dep) in &self.world.deps {
            if !dep.accepted || dep.site.as_deref() != Some(provider) {
                continue;
            }
            let Ok(rec) = self.orch.get_deployment(*uuid) else { continue };
            for node in rec.template.nodes.values().filter(|n| n.kind == NodeKind::Service) {
                for host in compute_hosts(&rec.template, &node.name) {
                    let id = format!("{}.{host}", dep.reference);
                    if dep.instances.contains(&id) {
                        restart.insert(id);
                    }
                }
            }
        }
        for id in restart {
            let site = self.world.sites.get_mut(provider).expect("site");
            match site.sched.restart(&id, t) {
                Ok(()) => self.world.log(t, LogEvent::InstanceRestarted { site: provider.to_owned(), instance: id }),
                Err(e) => self.world.fault(e.to_string()),
            }
        }
        self.settle(t);
    }

    fn recover_site(&mut self, provider: &str, t: u64) {
        let site = self.world.sites.get_mut(provider).expect("site");
        site.failed_until = None;
        self.world.log(t, LogEvent::SiteRecovered { site: provider.to_owned() });
        let site = &self.world.sites[provider];
        let nodes: Vec<String> = site.node_ids().into_iter().filter(|n| site.should_schedule(n)).collect();
        for node in nodes {
            let site = self.world.sites.get_mut(provider).expect("site");
            match site.sched.set_schedulable(&node, true, t) {
                Ok(events) => self.world.handle(provider, events, t),
                Err(e) => self.world.fault(e.to_string()),
            }
        }
        self.settle(t);
    }

    fn switch_role(&mut self, node: &str, to: StableRole, t: u64) {
        self.world.sync_partitions(t);
        let Some(name) = self.world.sites.iter().find(|(_, s)| s.director.node(node).is_some()).map(|(n, _)| n.clone())
        else {
            self.world.log(t, LogEvent::RoleSwitchRejected { node: node.to_owned(), reason: "unknown node".into() });
            return;
        };
        let site = self.world.sites.get_mut(&name).expect("site");
        match site.director.switch_role(node, to, t) {
            Ok(RoleTransition::Switched { node: n, from, to }) => {
                let schedulable = site.should_schedule(&n);
                let events = site.sched.set_schedulable(&n, schedulable, t);
                self.world.log(t, LogEvent::RoleSwitched { site: name.clone(), node: n, from, to });
                match events {
                    Ok(events) => self.world.handle(&name, events, t),
                    Err(e) => self.world.fault(e.to_string()),
                }
            }
            Ok(RoleTransition::Draining { node: n, role }) => {
                if let Err(e) = site.sched.set_schedulable(&n, false, t) {
                    self.world.fault(e.to_string());
                }
                self.world.log(t, LogEvent::RoleDraining { site: name, node: n, role });
            }
            Err(e) => self.world.log(t, LogEvent::RoleSwitchRejected { node: node.to_owned(), reason: e.to_string() }),
        }
        self.settle(t);
    }

    fn submit_job(
        &mut self,
        reference: &str,
        cluster: Option<&str>,
        job_id: &str,
        resources: ResourceVector,
        duration_s: u64,
        t: u64,
    ) {
        let reject = |world: &mut World, reason: &str| {
            world.log(
                t,
                LogEvent::JobRejected {
                    reference: reference.to_owned(),
                    job: job_id.to_owned(),
                    reason: reason.into(),
                },
            )
        };
        let Some(uuid) = self.world.refs.get(reference).copied() else {
            return reject(&mut self.world, "unknown deployment");
        };
        let dep = &self.world.deps[&uuid];
        if !dep.accepted {
            return reject(&mut self.world, "deployment is not running");
        }
        let name = match cluster {
            Some(c) => format!("{reference}.{c}"),
            None => match dep.clusters.first() {
                Some(c) => c.clone(),
                None => return reject(&mut self.world, "deployment has no elastic cluster"),
            },
        };
        if !dep.clusters.contains(&name) {
            return reject(&mut self.world, "no such cluster in the deployment");
        }
        if !self.world.jobs_seen.insert((name.clone(), job_id.to_owned())) {
            return reject(&mut self.world, "duplicate job id");
        }
        let c = self.world.clusters.get_mut(&name).expect("cluster exists");
        if !resources.fits(&c.vc.worker_capacity) {
            self.world.jobs_seen.remove(&(name, job_id.to_owned()));
            return reject(&mut self.world, "job does not fit on a worker");
        }
        c.vc.submit_job(crate::elasticity::ClusterJob {
            job_id: job_id.to_owned(),
            resources,
            duration_s,
            submitted_at: t,
        });
        self.world.stats.jobs_submitted += 1;
        self.world.log(
            t,
            LogEvent::JobSubmitted {
                cluster: name,
                job: job_id.to_owned(),
                cpus: resources.cpus,
                mem_mb: resources.mem_mb,
                disk_gb: resources.disk_gb,
                duration_s,
            },
        );
    }

    fn after_event(&mut self) -> Result<(), SimError> {
        let t = self.now;
        for _ in 0..16 {
            self.settle(t);
            self.world.step_clusters(t);
            self.world.sync_partitions(t);
            if self.world.backlog.is_empty() {
                break;
            }
        }
        self.world.record_series(t);
        self.audit().map_err(|message| SimError::InvariantViolation { t, message })
    }

    /// Checks every cross-module invariant against the current state.
    pub fn audit(&self) -> Result<(), String> {
        let w = &self.world;
        if let Some(f) = &w.fault {
            return Err(f.clone());
        }
        if !w.backlog.is_empty() {
            return Err("deployment work left unsettled".into());
        }
        for (name, site) in &w.sites {
            site.sched.audit().map_err(|e| format!("{name}: {e}"))?;
            site.director.audit().map_err(|e| format!("{name}: {e}"))?;
            for n in site.director.nodes() {
                if n.is_busy() != site.sched.node_busy(&n.node_id) {
                    return Err(format!("{}: director and scheduler disagree on occupancy", n.node_id));
                }
                if site.sched.node_busy(&n.node_id) && matches!(n.role, Role::Batch | Role::DrainingToCloud) {
                    return Err(format!("{} hosts cloud instances outside the cloud pool", n.node_id));
                }
                if site.sched.is_schedulable(&n.node_id) != site.should_schedule(&n.node_id) {
                    return Err(format!("{} schedulability disagrees with its role", n.node_id));
                }
            }
        }
        for (name, c) in &w.clusters {
            c.vc.audit()?;
            let site = &w.sites[&c.site];
            for worker in c.vc.workers() {
                let id = &worker.record.node_id;
                let running = site.sched.instance(id).is_some();
                let queued = site.sched.is_queued(id);
                let on = worker.record.power != Power::Off;
                if c.active && on != running {
                    return Err(format!("{name}: worker {id} power state disagrees with its site instance"));
                }
                if !on && queued && c.active {
                    return Err(format!("{name}: powered-off worker {id} is queued at the site"));
                }
            }
        }
        for rec in self.orch.list_deployments(None) {
            rec.audit()?;
            if let Some(site) = &rec.chosen_site {
                let covered = self.orch.slas().iter().any(|s| s.provider_id == *site && rec.groups.contains(&s.group));
                if !covered {
                    return Err(format!("{} landed on {site} without an SLA for its owner", rec.uuid));
                }
            }
            let Some(dep) = w.deps.get(&rec.uuid) else { continue };
            match rec.state {
                DeploymentState::CreateComplete => {
                    let site = dep.site.as_deref().ok_or("complete deployment without a site")?;
                    if rec.chosen_site.as_deref() != Some(site) {
                        return Err(format!("{}: chosen site and placement disagree", rec.uuid));
                    }
                    for id in &dep.instances {
                        if w.sites[site].sched.instance(id).is_none() {
                            return Err(format!("{}: instance {id} is not running", rec.uuid));
                        }
                    }
                }
                DeploymentState::CreateFailed | DeploymentState::Deleted => {
                    if !dep.instances.is_empty() || !dep.pending.is_empty() || !dep.clusters.is_empty() {
                        return Err(format!("{}: {} deployment still holds site resources", rec.uuid, rec.state));
                    }
                }
                DeploymentState::CreateInProgress => {
                    if dep.site.is_none() && rec.current_target().is_some() {
                        return Err(format!("{}: in progress without a target site", rec.uuid));
                    }
                }
                DeploymentState::DeleteInProgress => {
                    return Err(format!("{}: left in DELETE_IN_PROGRESS", rec.uuid));
                }
            }
        }
        let leaked = w.owners.values().map(Owner::uuid).find(|u| {
            self.orch
                .get_deployment(*u)
                .map(|r| matches!(r.state, DeploymentState::Deleted | DeploymentState::CreateFailed))
                .unwrap_or(true)
        });
        if let Some(u) = leaked {
            return Err(format!("site instances outlive deployment {u}"));
        }
        Ok(())
    }

    /// Runs the remaining agenda to the horizon and builds the report.
    pub fn finish(mut self) -> Result<RunReport, SimError> {
        self.run_until(self.horizon_s)?;
        let h = self.horizon_s;
        self.now = h;
        self.world.log(h, LogEvent::Horizon);
        let world = &mut self.world;
        let live: Vec<_> = std::mem::take(&mut world.stats.live).into_values().collect();
        for (user, cpus, start) in live {
            *world.stats.user_cpu.entry(user).or_default() += cpus * (h - start);
        }

        let sites = world
            .stats
            .series
            .iter()
            .map(|(name, series)| {
                let total_cpus = world.sites[name].sched.total_capacity().cpus;
                let cpu_seconds = report::integrate(series, h);
                let site = SiteMetrics {
                    total_cpus,
                    series: series.clone(),
                    cpu_seconds,
                    utilization: report::ratio(cpu_seconds, total_cpus * h),
                };
                (name.clone(), site)
            })
            .collect();
        let mut deployments: Vec<DeploymentOutcome> = world
            .deps
            .iter()
            .map(|(uuid, dep)| {
                let rec = self.orch.get_deployment(*uuid).expect("record");
                DeploymentOutcome {
                    reference: dep.reference.clone(),
                    uuid: *uuid,
                    owner: rec.owner.clone(),
                    state: rec.state,
                    chosen_site: rec.chosen_site.clone(),
                    attempts: rec
                        .attempts
                        .iter()
                        .map(|a| AttemptSummary { site: a.provider_id.clone(), ok: a.outcome == AttemptOutcome::Ok })
                        .collect(),
                    still_queued: rec.state == DeploymentState::CreateInProgress,
                }
            })
            .collect();
        deployments.sort_by(|a, b| a.reference.cmp(&b.reference));
        let s = &world.stats;
        let metrics = Metrics {
            horizon_s: h,
            sites,
            user_cpu_seconds: s.user_cpu.clone(),
            instances_started: s.started,
            preemptions: s.preemptions,
            mean_wait_s: report::ratio(s.wait_sum, s.started),
            jobs: JobMetrics {
                submitted: s.jobs_submitted,
                completed: s.jobs_completed,
                still_queued: world.clusters.values().map(|c| c.vc.queued().count() as u64).sum(),
                mean_wait_s: report::ratio(s.job_wait_sum, s.jobs_started_once.len() as u64),
            },
            deployments_rejected: s.rejected,
            deployments,
        };

        let mut final_state = FinalState::default();
        for (name, site) in &world.sites {
            final_state.sites.insert(
                name.clone(),
                SiteState {
                    capacity: site.sched.total_capacity(),
                    free: site.sched.total_capacity().saturating_sub(&site.sched.used_capacity()),
                    running: site.sched.running().count(),
                    queued: site.sched.queued_len(),
                    failed: site.failed_until.is_some(),
                    roles: site.director.nodes().map(|n| (n.node_id.clone(), n.role)).collect(),
                },
            );
        }
        for (name, c) in &world.clusters {
            final_state.clusters.insert(
                name.clone(),
                ClusterState {
                    site: c.site.clone(),
                    min_nodes: c.vc.policy.min_nodes,
                    max_nodes: c.vc.policy.max_nodes,
                    t_idle_s: c.vc.policy.t_idle_s,
                    worker_capacity: c.vc.worker_capacity,
                    workers: c
                        .vc
                        .workers()
                        .map(|w| {
                            let idle_since = match w.record.occupancy {
                                Occupancy::Idle { since } => Some(since),
                                Occupancy::Busy => None,
                            };
                            (w.record.node_id.clone(), WorkerState { power: w.record.power, idle_since })
                        })
                        .collect(),
                    queued_jobs: c.vc.queued().count(),
                    running_jobs: c.vc.running_jobs().count(),
                },
            );
        }
        let unresolved =
            metrics.deployments.iter().find(|d| d.state == DeploymentState::CreateInProgress && !d.still_queued);
        if let Some(d) = unresolved {
            return Err(SimError::InvariantViolation { t: h, message: format!("{} left unresolved", d.reference) });
        }
        Ok(RunReport { log: std::mem::take(&mut self.world.log), metrics, final_state })
    }
}

/// Compute nodes reachable from `node` through its dependencies.
fn compute_hosts(template: &DeploymentTemplate, node: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut stack = vec![node.to_owned()];
    while let Some(n) = stack.pop() {
        if !seen.insert(n.clone()) {
            continue;
        }
        if let Some(spec) = template.nodes.get(&n) {
            if spec.kind == NodeKind::Compute {
                out.push(n.clone());
            }
            stack.extend(spec.depends_on.iter().cloned());
        }
    }
    out.sort();
    out
}
