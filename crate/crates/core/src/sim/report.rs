//! Run reports: the ordered event log, the metrics derived from it, and an offline verifier.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::elasticity::{Power, Role};
use crate::orchestrator::DeploymentState;
use crate::resource::ResourceVector;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeclaredNode {
    pub node: String,
    pub role: Role,
    pub capacity: ResourceVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum LogEvent {
    SiteDeclared {
        site: String,
        nodes: Vec<DeclaredNode>,
    },
    TokenIssued {
        subject: String,
        token_id: String,
        expires_at: u64,
    },
    TokenRevoked {
        subject: String,
    },
    DeploymentRejected {
        reference: String,
        user: String,
        error: String,
        message: String,
    },
    DeploymentCreated {
        reference: String,
        uuid: Uuid,
        owner: String,
    },
    Ranked {
        uuid: Uuid,
        ranked: Vec<String>,
    },
    PlacementFailed {
        uuid: Uuid,
        error: String,
    },
    SiteSubmitted {
        uuid: Uuid,
        site: String,
    },
    AttemptFailed {
        uuid: Uuid,
        site: String,
        reason: String,
    },
    StateChanged {
        uuid: Uuid,
        from: DeploymentState,
        to: DeploymentState,
    },
    DeleteRejected {
        reference: String,
        error: String,
        message: String,
    },
    InstanceQueued {
        site: String,
        instance: String,
        user: String,
    },
    InstanceStarted {
        site: String,
        instance: String,
        node: String,
        user: String,
        cpus: u64,
        mem_mb: u64,
        disk_gb: u64,
        arrival: u64,
    },
    InstanceReleased {
        site: String,
        instance: String,
    },
    InstancePreempted {
        site: String,
        instance: String,
        by: String,
    },
    InstanceCanceled {
        site: String,
        instance: String,
    },
    InstanceRestarted {
        site: String,
        instance: String,
    },
    ClusterCreated {
        site: String,
        cluster: String,
        min_nodes: u32,
        max_nodes: u32,
    },
    ClusterRemoved {
        cluster: String,
    },
    PowerOn {
        cluster: String,
        worker: String,
        ready_at: u64,
    },
    PowerOnDeferred {
        cluster: String,
        worker: String,
    },
    WorkerReady {
        cluster: String,
        worker: String,
    },
    PowerOff {
        cluster: String,
        worker: String,
    },
    WorkerLost {
        cluster: String,
        worker: String,
    },
    JobSubmitted {
        cluster: String,
        job: String,
        cpus: u64,
        mem_mb: u64,
        disk_gb: u64,
        duration_s: u64,
    },
    JobRejected {
        reference: String,
        job: String,
        reason: String,
    },
    JobStarted {
        cluster: String,
        job: String,
        worker: String,
    },
    JobCompleted {
        cluster: String,
        job: String,
    },
    JobRequeued {
        cluster: String,
        job: String,
    },
    JobAborted {
        cluster: String,
        job: String,
    },
    RoleDraining {
        site: String,
        node: String,
        role: Role,
    },
    RoleSwitched {
        site: String,
        node: String,
        from: Role,
        to: Role,
    },
    RoleSwitchRejected {
        node: String,
        reason: String,
    },
    SiteFailed {
        site: String,
        until: u64,
    },
    SiteRecovered {
        site: String,
    },
    Horizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub t: u64,
    #[serde(flatten)]
    pub event: LogEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteMetrics {
    pub total_cpus: u64,
    /// `(t, busy cpus)` at every time the value changed, starting at `(0, 0)`.
    pub series: Vec<(u64, u64)>,
    pub cpu_seconds: u64,
    pub utilization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobMetrics {
    pub submitted: u64,
    pub completed: u64,
    pub still_queued: u64,
    pub mean_wait_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptSummary {
    pub site: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeploymentOutcome {
    pub reference: String,
    pub uuid: Uuid,
    pub owner: String,
    pub state: DeploymentState,
    pub chosen_site: Option<String>,
    pub attempts: Vec<AttemptSummary>,
    /// Still waiting for site capacity at the horizon.
    pub still_queued: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub horizon_s: u64,
    pub sites: BTreeMap<String, SiteMetrics>,
    pub user_cpu_seconds: BTreeMap<String, u64>,
    pub instances_started: u64,
    pub preemptions: u64,
    pub mean_wait_s: f64,
    pub jobs: JobMetrics,
    pub deployments_rejected: u64,
    pub deployments: Vec<DeploymentOutcome>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerState {
    pub power: Power,
    pub idle_since: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterState {
    pub site: String,
    pub min_nodes: u32,
    pub max_nodes: u32,
    pub t_idle_s: u64,
    pub worker_capacity: ResourceVector,
    pub workers: BTreeMap<String, WorkerState>,
    pub queued_jobs: usize,
    pub running_jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteState {
    pub capacity: ResourceVector,
    pub free: ResourceVector,
    pub running: usize,
    pub queued: usize,
    pub failed: bool,
    pub roles: BTreeMap<String, Role>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalState {
    pub sites: BTreeMap<String, SiteState>,
    pub clusters: BTreeMap<String, ClusterState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub log: Vec<LogRecord>,
    pub metrics: Metrics,
    pub final_state: FinalState,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename = "Summary")]
struct Summary {
    metrics: Metrics,
    final_state: FinalState,
}

impl RunReport {
    /// The event log, one JSON record per line.
    pub fn log_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.log {
            out.push_str(&serde_json::to_string(r).expect("log records serialize"));
            out.push('\n');
        }
        out
    }

    /// The full report: the log followed by one summary line with metrics and final state.
    pub fn to_jsonl(&self) -> String {
        let mut out = self.log_jsonl();
        let summary = Summary { metrics: self.metrics.clone(), final_state: self.final_state.clone() };
        out.push_str(&serde_json::to_string(&summary).expect("summary serializes"));
        out.push('\n');
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, String> {
        let mut log = Vec::new();
        let mut summary = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            if summary.is_some() {
                return Err(format!("line {}: record after the summary", i + 1));
            }
            if line.starts_with("{\"seq\"") {
                log.push(serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?);
            } else {
                summary = Some(serde_json::from_str::<Summary>(line).map_err(|e| format!("line {}: {e}", i + 1))?);
            }
        }
        let summary = summary.ok_or("report has no summary line")?;
        Ok(RunReport { log, metrics: summary.metrics, final_state: summary.final_state })
    }

    /// Re-derives the metrics from the log, compares them with the recorded ones and audits
    /// the log for consistency.
    pub fn verify(&self) -> Result<(), String> {
        audit_log(&self.log)?;
        let derived = derive_metrics(&self.log)?;
        if derived != self.metrics {
            return Err(format!(
                "metrics do not match the log\nrecorded: {}\nderived:  {}",
                serde_json::to_string(&self.metrics).unwrap_or_default(),
                serde_json::to_string(&derived).unwrap_or_default()
            ));
        }
        Ok(())
    }
}

/// Appends `(t, v)` keeping one point per time and dropping points that repeat the previous value.
pub(crate) fn push_point(series: &mut Vec<(u64, u64)>, t: u64, v: u64) {
    match series.last_mut() {
        Some(last) if last.0 == t => {
            last.1 = v;
            let n = series.len();
            if n >= 2 && series[n - 2].1 == v {
                series.pop();
            }
        }
        Some(last) if last.1 == v => {}
        _ => series.push((t, v)),
    }
}

pub(crate) fn integrate(series: &[(u64, u64)], horizon: u64) -> u64 {
    let mut total = 0;
    for (i, &(t, v)) in series.iter().enumerate() {
        if t >= horizon {
            break;
        }
        let end = series.get(i + 1).map_or(horizon, |n| n.0.min(horizon));
        total += v * (end - t);
    }
    total
}

pub(crate) fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

struct LiveInstance {
    user: String,
    cpus: u64,
    start: u64,
}

/// Recomputes every metric from the event log alone.
pub fn derive_metrics(log: &[LogRecord]) -> Result<Metrics, String> {
    let horizon_s = match log.last() {
        Some(LogRecord { t, event: LogEvent::Horizon, .. }) => *t,
        _ => return Err("log does not end with a horizon record".into()),
    };
    let mut totals: BTreeMap<String, u64> = BTreeMap::new();
    let mut busy: BTreeMap<String, u64> = BTreeMap::new();
    let mut series: BTreeMap<String, Vec<(u64, u64)>> = BTreeMap::new();
    let mut live: BTreeMap<(String, String), LiveInstance> = BTreeMap::new();
    let mut user_cpu: BTreeMap<String, u64> = BTreeMap::new();
    let mut started = 0u64;
    let mut wait_sum = 0u64;
    let mut preemptions = 0u64;

    let mut job_submit: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut job_first_start: BTreeSet<(String, String)> = BTreeSet::new();
    let mut jobs_queued: BTreeSet<(String, String)> = BTreeSet::new();
    let mut job_wait_sum = 0u64;
    let mut jobs_completed = 0u64;

    let mut rejected = 0u64;
    let mut outcomes: Vec<DeploymentOutcome> = Vec::new();
    let mut index: BTreeMap<Uuid, usize> = BTreeMap::new();
    let mut current_site: BTreeMap<Uuid, String> = BTreeMap::new();

    let mut end = |live: &mut BTreeMap<(String, String), LiveInstance>, site: &str, inst: &str, t: u64| {
        let key = (site.to_owned(), inst.to_owned());
        let li = live.remove(&key).ok_or_else(|| format!("t={t}: {inst} ended on {site} but was not running"))?;
        *user_cpu.entry(li.user).or_default() += li.cpus * (t - li.start);
        Ok::<u64, String>(li.cpus)
    };

    for r in log {
        let t = r.t;
        match &r.event {
            LogEvent::SiteDeclared { site, nodes } => {
                totals.insert(site.clone(), nodes.iter().map(|n| n.capacity.cpus).sum());
                busy.insert(site.clone(), 0);
                series.insert(site.clone(), vec![(0, 0)]);
            }
            LogEvent::InstanceStarted { site, instance, user, cpus, arrival, .. } => {
                live.insert(
                    (site.clone(), instance.clone()),
                    LiveInstance { user: user.clone(), cpus: *cpus, start: t },
                );
                *busy.get_mut(site).ok_or_else(|| format!("undeclared site {site}"))? += cpus;
                started += 1;
                wait_sum += t - arrival;
            }
            LogEvent::InstanceReleased { site, instance } | LogEvent::InstancePreempted { site, instance, .. } => {
                if matches!(r.event, LogEvent::InstancePreempted { .. }) {
                    preemptions += 1;
                }
                let cpus = end(&mut live, site, instance, t)?;
                *busy.get_mut(site).ok_or_else(|| format!("undeclared site {site}"))? -= cpus;
            }
            LogEvent::JobSubmitted { cluster, job, .. } => {
                job_submit.insert((cluster.clone(), job.clone()), t);
                jobs_queued.insert((cluster.clone(), job.clone()));
            }
            LogEvent::JobStarted { cluster, job, .. } => {
                let key = (cluster.clone(), job.clone());
                jobs_queued.remove(&key);
                if job_first_start.insert(key.clone()) {
                    job_wait_sum += t - job_submit.get(&key).ok_or_else(|| format!("job {job} never submitted"))?;
                }
            }
            LogEvent::JobRequeued { cluster, job } => {
                jobs_queued.insert((cluster.clone(), job.clone()));
            }
            LogEvent::JobAborted { cluster, job } => {
                jobs_queued.remove(&(cluster.clone(), job.clone()));
            }
            LogEvent::JobCompleted { .. } => jobs_completed += 1,
            LogEvent::DeploymentRejected { .. } => rejected += 1,
            LogEvent::DeploymentCreated { reference, uuid, owner } => {
                index.insert(*uuid, outcomes.len());
                outcomes.push(DeploymentOutcome {
                    reference: reference.clone(),
                    uuid: *uuid,
                    owner: owner.clone(),
                    state: DeploymentState::CreateInProgress,
                    chosen_site: None,
                    attempts: Vec::new(),
                    still_queued: false,
                });
            }
            LogEvent::SiteSubmitted { uuid, site } => {
                current_site.insert(*uuid, site.clone());
            }
            LogEvent::AttemptFailed { uuid, site, .. } => {
                let i = *index.get(uuid).ok_or_else(|| format!("unknown deployment {uuid}"))?;
                outcomes[i].attempts.push(AttemptSummary { site: site.clone(), ok: false });
            }
            LogEvent::StateChanged { uuid, to, .. } => {
                let i = *index.get(uuid).ok_or_else(|| format!("unknown deployment {uuid}"))?;
                outcomes[i].state = *to;
                if *to == DeploymentState::CreateComplete {
                    let site = current_site.get(uuid).cloned().ok_or("completed without a site")?;
                    outcomes[i].attempts.push(AttemptSummary { site: site.clone(), ok: true });
                    outcomes[i].chosen_site = Some(site);
                }
            }
            _ => {}
        }
        for (site, v) in &busy {
            push_point(series.get_mut(site).expect("declared"), t.min(horizon_s), *v);
        }
    }
    for ((_, _), li) in live {
        *user_cpu.entry(li.user).or_default() += li.cpus * (horizon_s - li.start);
    }
    for o in &mut outcomes {
        o.still_queued = o.state == DeploymentState::CreateInProgress;
    }
    outcomes.sort_by(|a, b| a.reference.cmp(&b.reference));

    let sites = series
        .into_iter()
        .map(|(site, series)| {
            let total_cpus = totals[&site];
            let cpu_seconds = integrate(&series, horizon_s);
            let utilization = ratio(cpu_seconds, total_cpus * horizon_s);
            (site, SiteMetrics { total_cpus, series, cpu_seconds, utilization })
        })
        .collect();
    Ok(Metrics {
        horizon_s,
        sites,
        user_cpu_seconds: user_cpu,
        instances_started: started,
        preemptions,
        mean_wait_s: ratio(wait_sum, started),
        jobs: JobMetrics {
            submitted: job_submit.len() as u64,
            completed: jobs_completed,
            still_queued: jobs_queued.len() as u64,
            mean_wait_s: ratio(job_wait_sum, job_first_start.len() as u64),
        },
        deployments_rejected: rejected,
        deployments: outcomes,
    })
}

/// Consistency checks over a log: pool exclusivity, no busy node powered off, legal
/// deployment transitions and failover along the ranked list.
pub fn audit_log(log: &[LogRecord]) -> Result<(), String> {
    let mut last_t = 0u64;
    let mut roles: BTreeMap<String, Role> = BTreeMap::new();
    let mut capacity: BTreeMap<String, u64> = BTreeMap::new();
    let mut used: BTreeMap<String, u64> = BTreeMap::new();
    let mut on_node: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut placed: BTreeMap<(String, String), (String, u64)> = BTreeMap::new();
    let mut power: BTreeMap<String, Power> = BTreeMap::new();
    let mut worker_jobs: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let mut job_worker: BTreeMap<(String, String), String> = BTreeMap::new();
    let mut states: BTreeMap<Uuid, DeploymentState> = BTreeMap::new();
    let mut ranked: BTreeMap<Uuid, Vec<String>> = BTreeMap::new();
    let mut submitted: BTreeMap<Uuid, usize> = BTreeMap::new();

    for (i, r) in log.iter().enumerate() {
        let at = |msg: String| format!("seq {} t={}: {msg}", r.seq, r.t);
        if r.t < last_t || r.seq != i as u64 {
            return Err(at("log is not ordered by (time, sequence)".into()));
        }
        last_t = r.t;
        match &r.event {
            LogEvent::SiteDeclared { site, nodes } => {
                for n in nodes {
                    roles.insert(n.node.clone(), n.role);
                }
                capacity.insert(site.clone(), nodes.iter().map(|n| n.capacity.cpus).sum());
            }
            LogEvent::InstanceStarted { site, instance, node, cpus, .. } => {
                if roles.get(node) != Some(&Role::Cloud) {
                    return Err(at(format!("{instance} started on {node} outside the cloud pool")));
                }
                let u = used.entry(site.clone()).or_default();
                *u += cpus;
                if *u > capacity.get(site).copied().unwrap_or(0) {
                    return Err(at(format!("site {site} runs more cpus than it has")));
                }
                on_node.entry(node.clone()).or_default().insert(instance.clone());
                placed.insert((site.clone(), instance.clone()), (node.clone(), *cpus));
            }
            LogEvent::InstanceReleased { site, instance } | LogEvent::InstancePreempted { site, instance, .. } => {
                let (node, cpus) = placed
                    .remove(&(site.clone(), instance.clone()))
                    .ok_or_else(|| at(format!("{instance} ended but was not running")))?;
                *used.entry(site.clone()).or_default() -= cpus;
                on_node.entry(node).or_default().remove(instance);
            }
            LogEvent::RoleDraining { node, role, .. } => {
                let cur = roles.get(node).copied().ok_or_else(|| at(format!("unknown node {node}")))?;
                if cur.is_draining() || !role.is_draining() {
                    return Err(at(format!("{node} cannot drain from {cur} to {role}")));
                }
                if on_node.get(node).is_none_or(BTreeSet::is_empty) {
                    return Err(at(format!("idle node {node} entered a draining state")));
                }
                roles.insert(node.clone(), *role);
            }
            LogEvent::RoleSwitched { node, from, to, .. } => {
                if roles.get(node) != Some(from) || to.is_draining() {
                    return Err(at(format!("{node} switch from {from} does not match its role")));
                }
                if on_node.get(node).is_some_and(|s| !s.is_empty()) {
                    return Err(at(format!("{node} switched pools while hosting instances")));
                }
                roles.insert(node.clone(), *to);
            }
            LogEvent::PowerOn { worker, ready_at, .. } => {
                let p = if *ready_at > r.t { Power::Booting { ready_at: *ready_at } } else { Power::On };
                power.insert(worker.clone(), p);
            }
            LogEvent::WorkerReady { worker, .. } => {
                power.insert(worker.clone(), Power::On);
            }
            LogEvent::PowerOff { worker, .. } => {
                if worker_jobs.get(worker).is_some_and(|j| !j.is_empty()) {
                    return Err(at(format!("busy worker {worker} powered off")));
                }
                power.insert(worker.clone(), Power::Off);
            }
            LogEvent::WorkerLost { worker, .. } => {
                if worker_jobs.get(worker).is_some_and(|j| !j.is_empty()) {
                    return Err(at(format!("worker {worker} lost with jobs still attached")));
                }
                power.insert(worker.clone(), Power::Off);
            }
            LogEvent::JobStarted { cluster, job, worker } => {
                if power.get(worker) != Some(&Power::On) {
                    return Err(at(format!("job {job} started on {worker} which is not on")));
                }
                worker_jobs.entry(worker.clone()).or_default().insert(job.clone());
                job_worker.insert((cluster.clone(), job.clone()), worker.clone());
            }
            LogEvent::JobCompleted { cluster, job }
            | LogEvent::JobRequeued { cluster, job }
            | LogEvent::JobAborted { cluster, job } => {
                if let Some(w) = job_worker.remove(&(cluster.clone(), job.clone())) {
                    worker_jobs.entry(w).or_default().remove(job);
                }
            }
            LogEvent::DeploymentCreated { uuid, .. } => {
                states.insert(*uuid, DeploymentState::CreateInProgress);
            }
            LogEvent::StateChanged { uuid, from, to } => {
                let cur = states.get(uuid).copied().ok_or_else(|| at(format!("unknown deployment {uuid}")))?;
                if cur != *from || !from.can_become(*to) {
                    return Err(at(format!("{uuid}: illegal transition {from} -> {to} (current {cur})")));
                }
                states.insert(*uuid, *to);
            }
            LogEvent::Ranked { uuid, ranked: list } => {
                ranked.insert(*uuid, list.clone());
            }
            LogEvent::SiteSubmitted { uuid, site } => {
                let n = submitted.entry(*uuid).or_default();
                if ranked.get(uuid).and_then(|l| l.get(*n)) != Some(site) {
                    return Err(at(format!("{uuid}: attempt {} on {site} leaves the ranked list", *n + 1)));
                }
                *n += 1;
            }
            _ => {}
        }
    }
    Ok(())
}
