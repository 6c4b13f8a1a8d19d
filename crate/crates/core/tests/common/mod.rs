//! Independent oracles and generators shared by the acceptance target and the property tests.
//! Nothing here calls into the code it checks except to build inputs.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use fedorch::elasticity::StableRole;
use fedorch::iam::PolicyRule;
use fedorch::orchestrator::{DataCatalogEntry, SlaRecord};
use fedorch::ranker::{PreferenceList, ProviderSnapshot, RankerConfig};
use fedorch::scheduler::{InstanceClass, InstanceRequest, RunningInstance, SchedEvent, SchedulerConfig, SiteScheduler};
use fedorch::sim::{EventAction, LogEvent, LogRecord, PhysicalNode, ProviderSpec, Scenario, ScenarioEvent, UserSpec};
use fedorch::{DeploymentState, OrchConfig, ResourceVector, Role};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn examples_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples")
}

pub fn shipped_scenarios() -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(examples_dir())
        .expect("examples directory")
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "scn"))
        .collect();
    out.sort();
    out
}

// ---------------------------------------------------------------- ranking

pub fn random_snapshots(rng: &mut ChaCha8Rng, n: usize) -> Vec<ProviderSnapshot> {
    // coarse grids make exact ties on individual terms common
    let mut ids: Vec<String> = (0..n).map(|i| format!("p{i:02}")).collect();
    ids.shuffle(rng);
    ids.into_iter()
        .map(|id| ProviderSnapshot {
            provider_id: id,
            sla_rank: if rng.gen_bool(0.3) { f64::from(rng.gen_range(0..4u8)) } else { rng.gen_range(0.0..10.0) },
            availability: if rng.gen_bool(0.3) { 0.99 } else { rng.gen_range(0.0..=1.0) },
            latency_ms: if rng.gen_bool(0.3) { 20.0 } else { rng.gen_range(0.0..300.0) },
            free_capacity: ResourceVector::new(rng.gen_range(0..64), rng.gen_range(0..65536), rng.gen_range(0..2000)),
            data_locality: if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..=1.0) },
        })
        .collect()
}

pub fn random_weights(rng: &mut ChaCha8Rng) -> RankerConfig {
    let mut w = || if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..5.0) };
    let mut c = RankerConfig { w_sla: w(), w_avail: w(), w_lat: w(), w_data: w() };
    if c.w_sla + c.w_avail + c.w_lat + c.w_data == 0.0 {
        c.w_avail = 1.0;
    }
    c
}

pub fn random_prefs(rng: &mut ChaCha8Rng, candidates: &[ProviderSnapshot]) -> Option<PreferenceList> {
    if rng.gen_bool(0.3) {
        return None;
    }
    let mut pool: Vec<String> = candidates.iter().map(|c| c.provider_id.clone()).collect();
    pool.push("absent-site".into());
    pool.shuffle(rng);
    let k = rng.gen_range(0..=pool.len().min(4));
    Some(PreferenceList::new(pool[..k].to_vec()).expect("distinct ids"))
}

fn minmax(xs: &[f64]) -> Vec<f64> {
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    xs.iter().map(|x| if hi == lo { 1.0 } else { (x - lo) / (hi - lo) }).collect()
}

/// Score every candidate, then repeatedly pick the best remaining one.
pub fn rank_oracle(c: &[ProviderSnapshot], w: &RankerConfig, prefs: Option<&PreferenceList>) -> Vec<String> {
    let sla = minmax(&c.iter().map(|p| p.sla_rank).collect::<Vec<_>>());
    let lat = minmax(&c.iter().map(|p| p.latency_ms).collect::<Vec<_>>());
    let score: Vec<f64> = (0..c.len())
        .map(|i| {
            w.w_sla * sla[i] + w.w_avail * c[i].availability + w.w_lat * (1.0 - lat[i]) + w.w_data * c[i].data_locality
        })
        .collect();
    let pref_pos = |id: &str| prefs.and_then(|p| p.providers().iter().position(|x| x == id));
    let mut left: Vec<usize> = (0..c.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            let (a, b) = (left[k], left[best]);
            let better = match (pref_pos(&c[a].provider_id), pref_pos(&c[b].provider_id)) {
                (Some(x), Some(y)) => x < y,
                (Some(_), None) => true,
                (None, Some(_)) => false,
                (None, None) => score[a] > score[b] || (score[a] == score[b] && c[a].provider_id < c[b].provider_id),
            };
            if better {
                best = k;
            }
        }
        out.push(c[left.remove(best)].provider_id.clone());
    }
    out
}

// ---------------------------------------------------------------- preemption

pub struct VictimCase {
    pub request: InstanceRequest,
    pub nodes: Vec<(String, ResourceVector)>,
    pub running: Vec<RunningInstance>,
}

fn req(id: String, user: &str, r: ResourceVector, class: InstanceClass, t: u64) -> InstanceRequest {
    InstanceRequest { request_id: id, user: user.into(), group: "g".into(), resources: r, class, arrival_time: t }
}

pub fn random_victim_case(rng: &mut ChaCha8Rng) -> VictimCase {
    let n_nodes = rng.gen_range(1..=3);
    let n_inst = rng.gen_range(0..=8);
    let caps: Vec<ResourceVector> =
        (0..n_nodes).map(|_| ResourceVector::new(rng.gen_range(4..=16), rng.gen_range(4..=32) * 512, 100)).collect();
    let mut free = caps.clone();
    let mut running = Vec::new();
    for i in 0..n_inst {
        let node = rng.gen_range(0..n_nodes);
        let r = ResourceVector::new(rng.gen_range(1..=4), rng.gen_range(1..=8) * 512, rng.gen_range(0..=20));
        if !r.fits(&free[node]) {
            continue;
        }
        free[node] = free[node].checked_sub(&r).unwrap();
        let class = if rng.gen_bool(0.7) {
            InstanceClass::Preemptible { bid: f64::from(rng.gen_range(0..5u8)) * 0.1 }
        } else {
            InstanceClass::Normal
        };
        running.push(RunningInstance {
            request: req(format!("i{i}"), "u", r, class, 0),
            start_time: rng.gen_range(0..100),
            node: format!("n{node}"),
        });
    }
    let class = if rng.gen_bool(0.6) {
        InstanceClass::Normal
    } else {
        InstanceClass::Preemptible { bid: f64::from(rng.gen_range(0..6u8)) * 0.1 }
    };
    let r = ResourceVector::new(rng.gen_range(1..=12), rng.gen_range(1..=24) * 512, rng.gen_range(0..=60));
    VictimCase {
        request: req("new".into(), "v", r, class, 100),
        nodes: free.iter().enumerate().map(|(i, f)| (format!("n{i}"), *f)).collect(),
        running,
    }
}

/// A running instance may be terminated for the request: it is preemptible and, when the
/// request is itself preemptible, its bid is strictly lower.
pub fn may_evict(request: &InstanceClass, victim: &InstanceClass) -> bool {
    match (request, victim) {
        (_, InstanceClass::Normal) => false,
        (InstanceClass::Normal, _) => true,
        (InstanceClass::Preemptible { bid: a }, InstanceClass::Preemptible { bid: b }) => b < a,
    }
}

/// Fewest terminations that make room on a single node, over every subset; `None` when no
/// subset works.
pub fn brute_force_min_victims(case: &VictimCase) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (node, free) in &case.nodes {
        let local: Vec<&RunningInstance> = case
            .running
            .iter()
            .filter(|r| r.node == *node && may_evict(&case.request.class, &r.request.class))
            .collect();
        for mask in 0u32..(1 << local.len()) {
            let mut room = *free;
            for (i, r) in local.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    room += r.request.resources;
                }
            }
            if case.request.resources.fits(&room) {
                let k = mask.count_ones() as usize;
                best = Some(best.map_or(k, |b| b.min(k)));
            }
        }
    }
    best
}

// ---------------------------------------------------------------- fair share

/// Cumulative cpu-seconds per user when two users keep an 8-cpu node saturated with 1-cpu,
/// 10 s requests for `half_lives` half-lives of length `half_life_s`.
pub fn fair_share_run(weights: [f64; 2], half_life_s: f64, half_lives: u64) -> [f64; 2] {
    const DURATION: u64 = 10;
    const BACKLOG: usize = 16;
    let users = ["u0", "u1"];
    let mut cfg = SchedulerConfig { half_life_s, ..SchedulerConfig::default() };
    for (u, w) in users.iter().zip(weights) {
        cfg.weights.insert((*u).into(), w);
    }
    let mut sched = SiteScheduler::new(cfg, [("n0".to_owned(), ResourceVector::new(8, 8192, 100))]);
    let horizon = (half_life_s as u64) * half_lives;
    let mut ends: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
    let mut starts: BTreeMap<String, (usize, u64)> = BTreeMap::new();
    let mut queued = [0usize; 2];
    let mut next_id = 0u64;

    let mut note =
        |events: Vec<SchedEvent>, queued: &mut [usize; 2], ends: &mut BTreeMap<u64, BTreeSet<String>>, t: u64| {
            for e in events {
                if let SchedEvent::Started(inst) = e {
                    let u = users.iter().position(|x| *x == inst.request.user).unwrap();
                    queued[u] -= 1;
                    starts.insert(inst.id().to_owned(), (u, t));
                    ends.entry(t + DURATION).or_default().insert(inst.id().to_owned());
                }
            }
        };

    let mut t = 0;
    loop {
        if let Some(done) = ends.remove(&t) {
            for id in done {
                let (_, events) = sched.release(&id, t).unwrap();
                note(events, &mut queued, &mut ends, t);
            }
        }
        for u in 0..2 {
            while queued[u] < BACKLOG {
                queued[u] += 1;
                next_id += 1;
                let r = req(format!("r{next_id}"), users[u], ResourceVector::new(1, 512, 1), InstanceClass::Normal, t);
                let out = sched.submit(r, t).unwrap();
                note(out.events, &mut queued, &mut ends, t);
            }
        }
        match ends.keys().next() {
            Some(&next) if next <= horizon => t = next,
            _ => break,
        }
    }
    let mut cpu = [0f64; 2];
    for (u, s) in starts.values() {
        cpu[*u] += ((s + DURATION).min(horizon).saturating_sub(*s)) as f64;
    }
    cpu
}

// ---------------------------------------------------------------- log replay

/// Replays a log with full resource vectors and checks conservation, pool exclusivity and
/// worker power against occupancy. Returns every violation found.
pub fn replay_violations(log: &[LogRecord], final_free: Option<&BTreeMap<String, ResourceVector>>) -> Vec<String> {
    let mut bad = Vec::new();
    let mut capacity: BTreeMap<String, ResourceVector> = BTreeMap::new();
    let mut used: BTreeMap<String, ResourceVector> = BTreeMap::new();
    let mut role: BTreeMap<String, Role> = BTreeMap::new();
    let mut node_site: BTreeMap<String, String> = BTreeMap::new();
    let mut live: BTreeMap<(String, String), (String, ResourceVector)> = BTreeMap::new();
    let mut worker_jobs: BTreeMap<String, usize> = BTreeMap::new();
    let mut job_on: BTreeMap<(String, String), String> = BTreeMap::new();
    let mut refs: BTreeMap<fedorch::Uuid, String> = BTreeMap::new();

    for r in log {
        let mut v = |m: String| bad.push(format!("seq {} t={}: {m}", r.seq, r.t));
        match &r.event {
            LogEvent::SiteDeclared { site, nodes } => {
                let mut total = ResourceVector::ZERO;
                for n in nodes {
                    total += n.capacity;
                    role.insert(n.node.clone(), n.role);
                    node_site.insert(n.node.clone(), site.clone());
                }
                capacity.insert(site.clone(), total);
                used.insert(site.clone(), ResourceVector::ZERO);
            }
            LogEvent::InstanceStarted { site, instance, node, cpus, mem_mb, disk_gb, .. } => {
                let res = ResourceVector::new(*cpus, *mem_mb, *disk_gb);
                if role.get(node) != Some(&Role::Cloud) {
                    v(format!("{instance} placed on {node} while it is {:?}", role.get(node)));
                }
                if node_site.get(node) != Some(site) {
                    v(format!("{instance}: node {node} is not part of {site}"));
                }
                let u = used.entry(site.clone()).or_insert(ResourceVector::ZERO);
                *u += res;
                if !u.fits(&capacity[site]) {
                    v(format!("{site}: running {u:?} exceeds capacity {:?}", capacity[site]));
                }
                if live.insert((site.clone(), instance.clone()), (node.clone(), res)).is_some() {
                    v(format!("{instance} started twice"));
                }
            }
            LogEvent::InstanceReleased { site, instance } | LogEvent::InstancePreempted { site, instance, .. } => {
                match live.remove(&(site.clone(), instance.clone())) {
                    Some((_, res)) => {
                        let u = used.get_mut(site).unwrap();
                        match u.checked_sub(&res) {
                            Ok(x) => *u = x,
                            Err(_) => v(format!("{site}: releasing {instance} underflows")),
                        }
                    }
                    None => v(format!("{instance} ended without running")),
                }
            }
            LogEvent::RoleDraining { node, role: to, .. } => {
                let hosting = live.values().any(|(n, _)| n == node);
                let from = role.get(node).copied();
                let ok = matches!(
                    (from, to),
                    (Some(Role::Cloud), Role::DrainingToBatch) | (Some(Role::Batch), Role::DrainingToCloud)
                );
                if !ok || !hosting {
                    v(format!("{node}: drain {from:?} -> {to:?} while hosting={hosting}"));
                }
                role.insert(node.clone(), *to);
            }
            LogEvent::RoleSwitched { node, from, to, .. } => {
                if live.values().any(|(n, _)| n == node) {
                    v(format!("{node} switched pools while hosting instances"));
                }
                if role.get(node) != Some(from) || !matches!(to, Role::Cloud | Role::Batch) {
                    v(format!("{node}: switch {from:?} -> {to:?} from {:?}", role.get(node)));
                }
                role.insert(node.clone(), *to);
            }
            LogEvent::JobStarted { cluster, job, worker } => {
                *worker_jobs.entry(worker.clone()).or_default() += 1;
                job_on.insert((cluster.clone(), job.clone()), worker.clone());
            }
            LogEvent::JobCompleted { cluster, job }
            | LogEvent::JobRequeued { cluster, job }
            | LogEvent::JobAborted { cluster, job } => {
                if let Some(w) = job_on.remove(&(cluster.clone(), job.clone())) {
                    *worker_jobs.get_mut(&w).unwrap() -= 1;
                }
            }
            LogEvent::PowerOff { worker, .. } | LogEvent::WorkerLost { worker, .. } => {
                if worker_jobs.get(worker).copied().unwrap_or(0) > 0 {
                    v(format!("busy worker {worker} powered off"));
                }
            }
            LogEvent::DeploymentCreated { reference, uuid, .. } => {
                refs.insert(*uuid, reference.clone());
            }
            LogEvent::StateChanged { uuid, to, .. }
                if matches!(to, DeploymentState::Deleted | DeploymentState::CreateFailed) =>
            {
                let prefix = format!("{}.", refs[uuid]);
                if let Some(((_, id), _)) = live.iter().find(|((_, id), _)| id.starts_with(&prefix)) {
                    v(format!("{} reached {to} while {id} still runs", refs[uuid]));
                }
            }
            _ => {}
        }
    }
    if let Some(free) = final_free {
        for (site, cap) in &capacity {
            if free[site] + used[site] != *cap {
                bad.push(format!("{site}: free {:?} + running {:?} != capacity {cap:?}", free[site], used[site]));
            }
        }
    }
    bad
}

// ---------------------------------------------------------------- random failure scenarios

const SMALL: &str = "\
tosca_version: indigo_subset_1
nodes:
  vm:
    kind: Compute
    resources: { cpus: 2, mem_mb: 2048, disk_gb: 10 }
";

const PAIR: &str = "\
tosca_version: indigo_subset_1
nodes:
  db:
    kind: Compute
    resources: { cpus: 2, mem_mb: 4096, disk_gb: 20 }
  svc:
    kind: Service
    depends_on: [db]
  web:
    kind: Compute
    resources: { cpus: 1, mem_mb: 1024, disk_gb: 5 }
    depends_on: [svc]
";

const SPOT: &str = "\
tosca_version: indigo_subset_1
nodes:
  vm:
    kind: Compute
    resources: { cpus: 4, mem_mb: 2048, disk_gb: 10 }
    preemptible: true
    bid: 0.1
";

const CLUSTER: &str = "\
tosca_version: indigo_subset_1
nodes:
  fe:
    kind: Compute
    resources: { cpus: 1, mem_mb: 1024, disk_gb: 10 }
  wn:
    kind: ElasticCluster
    resources: { cpus: 2, mem_mb: 2048, disk_gb: 10 }
    depends_on: [fe]
    min_workers: 0
    max_workers: 3
";

/// A small federation with random site failures, submissions, deletions, jobs and role
/// switches.
pub fn random_failure_scenario(seed: u64) -> Scenario {
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    let n_sites = rng.gen_range(2..=4);
    let horizon_s = 2000;
    let mut providers = Vec::new();
    let mut slas = Vec::new();
    let mut config = OrchConfig::default();
    config.elastic.t_idle_s = 60;
    config.elastic.boot_delay_s = 20;
    for i in 0..n_sites {
        let id = format!("site-{}", (b'a' + i as u8) as char);
        let nodes = (0..rng.gen_range(1..=3))
            .map(|_| PhysicalNode {
                capacity: ResourceVector::new(rng.gen_range(2..=8), 8192, 200),
                role: if rng.gen_bool(0.2) { StableRole::Batch } else { StableRole::Cloud },
            })
            .collect();
        providers.push(ProviderSpec {
            provider_id: id.clone(),
            availability: rng.gen_range(0.8..=1.0),
            latency_ms: f64::from(rng.gen_range(1..100u32)),
            nodes,
        });
        if rng.gen_bool(0.9) {
            slas.push(SlaRecord {
                provider_id: id.clone(),
                group: "g".into(),
                sla_rank: rng.gen_range(0.0..1.0),
                guaranteed: ResourceVector::ZERO,
            });
        }
        if rng.gen_bool(0.9) {
            config.policy.push(PolicyRule { group: "g".into(), provider_id: id, permit: true });
        }
    }
    let users = vec![
        UserSpec { name: "u1".into(), group: "g".into(), weight: 1.0, ttl_s: None },
        UserSpec { name: "u2".into(), group: "g".into(), weight: 2.0, ttl_s: None },
    ];
    let templates: BTreeMap<String, String> = [("small", SMALL), ("pair", PAIR), ("spot", SPOT), ("cluster", CLUSTER)]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v.to_owned()))
        .collect();
    let datasets: Vec<DataCatalogEntry> = Vec::new();

    let mut events = Vec::new();
    let mut created: Vec<(String, &str)> = Vec::new();
    let mut t = 0;
    for k in 0..rng.gen_range(5..=25) {
        t += rng.gen_range(0..120);
        let site = providers.choose(&mut rng).unwrap();
        let action = match rng.gen_range(0..10) {
            0..=3 => {
                let tpl = *["small", "pair", "spot", "cluster"].choose(&mut rng).unwrap();
                let reference = format!("d{k}");
                created.push((reference.clone(), tpl));
                EventAction::Submit {
                    template: tpl.into(),
                    user: if rng.gen_bool(0.5) { "u1".into() } else { "u2".into() },
                    reference,
                    duration_s: rng.gen_bool(0.5).then(|| rng.gen_range(50..600)),
                    prefs: rng.gen_bool(0.2).then(|| PreferenceList::new(vec![site.provider_id.clone()]).unwrap()),
                }
            }
            4..=5 => EventAction::FailSite { provider: site.provider_id.clone(), duration_s: rng.gen_range(10..400) },
            6 if !created.is_empty() => EventAction::Delete { reference: created.choose(&mut rng).unwrap().0.clone() },
            7 if created.iter().any(|(_, tpl)| *tpl == "cluster") => {
                let clusters: Vec<&(String, &str)> = created.iter().filter(|(_, tpl)| *tpl == "cluster").collect();
                EventAction::Job {
                    reference: clusters.choose(&mut rng).unwrap().0.clone(),
                    cluster: None,
                    job_id: format!("j{k}"),
                    resources: ResourceVector::new(rng.gen_range(1..=2), 512, 1),
                    duration_s: rng.gen_range(10..300),
                }
            }
            8 => {
                let node = rng.gen_range(0..site.nodes.len());
                EventAction::SwitchRole {
                    node: site.node_id(node),
                    to: if rng.gen_bool(0.5) { StableRole::Batch } else { StableRole::Cloud },
                }
            }
            _ => EventAction::Revoke { user: "u1".into() },
        };
        events.push(ScenarioEvent { at: t, action });
    }
    Scenario {
        seed,
        horizon_s,
        config,
        recovery_jitter_s: rng.gen_range(0..=30),
        providers,
        slas,
        datasets,
        users,
        templates,
        events,
    }
}

/// Legal lifecycle edges, written out independently of the state machine.
pub fn legal_edge(from: DeploymentState, to: DeploymentState) -> bool {
    use DeploymentState::*;
    [
        (CreateInProgress, CreateComplete),
        (CreateInProgress, CreateFailed),
        (CreateComplete, DeleteInProgress),
        (CreateFailed, DeleteInProgress),
        (DeleteInProgress, Deleted),
    ]
    .contains(&(from, to))
}
