//! Scenario files: the world (providers, SLAs, datasets, users, policy) plus a time-ordered
//! event script. They use the same indentation-structured text as templates.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::config::OrchConfig;
use crate::elasticity::StableRole;
use crate::iam;
use crate::orchestrator::{DataCatalogEntry, SlaRecord};
use crate::ranker::PreferenceList;
use crate::resource::ResourceVector;
use crate::template;
use crate::text::{self, MapReader, Node, SyntaxError};

use super::SimError;

#[derive(Debug, Clone, PartialEq)]
pub struct PhysicalNode {
    pub capacity: ResourceVector,
    pub role: StableRole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderSpec {
    pub provider_id: String,
    pub availability: f64,
    pub latency_ms: f64,
    pub nodes: Vec<PhysicalNode>,
}

impl ProviderSpec {
    pub fn node_id(&self, idx: usize) -> String {
        format!("{}-n{idx}", self.provider_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserSpec {
    pub name: String,
    pub group: String,
    pub weight: f64,
    /// Token lifetime; defaults to outliving the horizon.
    pub ttl_s: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventAction {
    Submit { template: String, user: String, reference: String, duration_s: Option<u64>, prefs: Option<PreferenceList> },
    Delete { reference: String },
    FailSite { provider: String, duration_s: u64 },
    Revoke { user: String },
    Job { reference: String, cluster: Option<String>, job_id: String, resources: ResourceVector, duration_s: u64 },
    SwitchRole { node: String, to: StableRole },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioEvent {
    pub at: u64,
    pub action: EventAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub seed: u64,
    pub horizon_s: u64,
    pub config: OrchConfig,
    /// Upper bound of the random extra delay added to each site recovery; 0 disables it.
    pub recovery_jitter_s: u64,
    pub providers: Vec<ProviderSpec>,
    pub slas: Vec<SlaRecord>,
    pub datasets: Vec<DataCatalogEntry>,
    pub users: Vec<UserSpec>,
    /// Template name to template text.
    pub templates: BTreeMap<String, String>,
    pub events: Vec<ScenarioEvent>,
}

const TOP_KEYS: &[&str] = &[
    "seed",
    "horizon_s",
    "config",
    "recovery_jitter_s",
    "providers",
    "slas",
    "datasets",
    "users",
    "permits",
    "templates",
    "events",
];

fn syntax(e: SyntaxError) -> SimError {
    SimError::Scenario { line: e.line, message: e.message }
}

fn bad(line: usize, message: impl Into<String>) -> SimError {
    SimError::Scenario { line, message: message.into() }
}

impl Scenario {
    /// Loads a scenario file. Template and config paths resolve against the file's directory;
    /// `fallback` is used when the file names no config.
    pub fn load(path: &Path, fallback: Option<OrchConfig>) -> Result<Self, SimError> {
        let text = fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(
            &text,
            |name| {
                let p = base.join(name);
                fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))
            },
            fallback,
        )
    }

    /// Parses scenario text; `read` supplies the contents of referenced files.
    pub fn parse(
        text: &str,
        read: impl Fn(&str) -> Result<String, String>,
        fallback: Option<OrchConfig>,
    ) -> Result<Self, SimError> {
        let root = text::parse(text).map_err(syntax)?;
        let top = MapReader::new(&root, TOP_KEYS).map_err(syntax)?;

        let seed = top.require("seed").and_then(Node::as_u64).map_err(syntax)?;
        let horizon_s = top.require("horizon_s").and_then(Node::as_u64).map_err(syntax)?;
        let recovery_jitter_s = opt_u64(top.get("recovery_jitter_s"))?.unwrap_or(0);

        let mut config = match top.get("config") {
            Some(n) => {
                let name = n.as_str().map_err(syntax)?;
                let body = read(name).map_err(|e| bad(n.line, e))?;
                OrchConfig::parse(&body).map_err(|e| bad(n.line, format!("config {name}: {e}")))?
            }
            None => fallback.unwrap_or_default(),
        };

        let providers = match top.get("providers") {
            Some(n) => parse_providers(n)?,
            None => Vec::new(),
        };
        let slas = list_of(top.get("slas"), parse_sla)?;
        let datasets = list_of(top.get("datasets"), parse_dataset)?;
        let users = match top.get("users") {
            Some(n) => parse_users(n)?,
            None => Vec::new(),
        };
        for n in top.get("permits").map(Node::as_list).transpose().map_err(syntax)?.unwrap_or(&[]) {
            let line = n.as_str().map_err(syntax)?;
            config.policy.push(iam::parse_policy_line(line).map_err(|e| bad(n.line, e))?);
        }
        let mut templates = BTreeMap::new();
        if let Some(n) = top.get("templates") {
            for e in n.as_map().map_err(syntax)? {
                let path = e.node.as_str().map_err(syntax)?;
                let body = read(path).map_err(|m| bad(e.node.line, m))?;
                template::parse_template(&body)
                    .map_err(|err| bad(e.node.line, format!("template {}: {err}", e.key)))?;
                templates.insert(e.key.clone(), body);
            }
        }
        let events = list_of(top.get("events"), parse_event)?;

        let scenario = Scenario {
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
        };
        scenario.check(&root)?;
        Ok(scenario)
    }

    /// Events are sorted and every name they mention resolves.
    fn check(&self, root: &Node) -> Result<(), SimError> {
        let ev_lines: Vec<usize> = MapReader::new(root, TOP_KEYS)
            .ok()
            .and_then(|m| m.get("events"))
            .and_then(|n| n.as_list().ok())
            .map(|l| l.iter().map(|n| n.line).collect())
            .unwrap_or_default();
        let line_of = |i: usize| ev_lines.get(i).copied().unwrap_or(0);

        let providers: BTreeSet<&str> = self.providers.iter().map(|p| p.provider_id.as_str()).collect();
        let nodes: BTreeSet<String> =
            self.providers.iter().flat_map(|p| (0..p.nodes.len()).map(move |i| p.node_id(i))).collect();
        let users: BTreeSet<&str> = self.users.iter().map(|u| u.name.as_str()).collect();
        for s in &self.slas {
            if !providers.contains(s.provider_id.as_str()) {
                return Err(SimError::UnresolvedReference(format!("sla provider `{}`", s.provider_id)));
            }
        }
        for d in &self.datasets {
            if !providers.contains(d.provider_id.as_str()) {
                return Err(SimError::UnresolvedReference(format!("dataset provider `{}`", d.provider_id)));
            }
        }
        let mut refs = BTreeSet::new();
        let mut last = 0;
        for (i, ev) in self.events.iter().enumerate() {
            if ev.at < last {
                return Err(bad(line_of(i), "events must be sorted by time"));
            }
            last = ev.at;
            let unresolved =
                |what: &str, name: &str| SimError::UnresolvedReference(format!("line {}: {what} `{name}`", line_of(i)));
            match &ev.action {
                EventAction::Submit { template, user, reference, .. } => {
                    if !self.templates.contains_key(template) {
                        return Err(unresolved("template", template));
                    }
                    if !users.contains(user.as_str()) {
                        return Err(unresolved("user", user));
                    }
                    if !refs.insert(reference.clone()) {
                        return Err(bad(line_of(i), format!("deployment id `{reference}` reused")));
                    }
                }
                EventAction::Delete { reference } | EventAction::Job { reference, .. } => {
                    if !refs.contains(reference) {
                        return Err(unresolved("deployment", reference));
                    }
                }
                EventAction::FailSite { provider, .. } => {
                    if !providers.contains(provider.as_str()) {
                        return Err(unresolved("provider", provider));
                    }
                }
                EventAction::Revoke { user } => {
                    if !users.contains(user.as_str()) {
                        return Err(unresolved("user", user));
                    }
                }
                EventAction::SwitchRole { node, .. } => {
                    if !nodes.contains(node) {
                        return Err(unresolved("node", node));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn user(&self, name: &str) -> Option<&UserSpec> {
        self.users.iter().find(|u| u.name == name)
    }
}

fn opt_u64(n: Option<&Node>) -> Result<Option<u64>, SimError> {
    n.map(Node::as_u64).transpose().map_err(syntax)
}

fn list_of<T>(n: Option<&Node>, f: impl Fn(&Node) -> Result<T, SimError>) -> Result<Vec<T>, SimError> {
    match n {
        Some(n) => n.as_list().map_err(syntax)?.iter().map(f).collect(),
        None => Ok(Vec::new()),
    }
}

fn parse_role(n: &Node) -> Result<StableRole, SimError> {
    match n.as_str().map_err(syntax)? {
        "cloud" => Ok(StableRole::Cloud),
        "batch" => Ok(StableRole::Batch),
        other => Err(bad(n.line, format!("role must be cloud or batch, got `{other}`"))),
    }
}

fn parse_providers(n: &Node) -> Result<Vec<ProviderSpec>, SimError> {
    let mut out = Vec::new();
    for e in n.as_map().map_err(syntax)? {
        let m = MapReader::new(&e.node, &["availability", "latency_ms", "nodes"]).map_err(syntax)?;
        let availability = m.require("availability").and_then(Node::as_f64).map_err(syntax)?;
        let latency_ms = m.require("latency_ms").and_then(Node::as_f64).map_err(syntax)?;
        if !(0.0..=1.0).contains(&availability) || latency_ms < 0.0 {
            return Err(bad(e.node.line, format!("provider `{}` has out-of-range monitoring data", e.key)));
        }
        let mut nodes = Vec::new();
        for item in m.require("nodes").and_then(Node::as_list).map_err(syntax)? {
            let nm = MapReader::new(item, &["cpus", "mem_mb", "disk_gb", "role"]).map_err(syntax)?;
            let capacity = ResourceVector::new(
                nm.require("cpus").and_then(Node::as_u64).map_err(syntax)?,
                nm.require("mem_mb").and_then(Node::as_u64).map_err(syntax)?,
                nm.require("disk_gb").and_then(Node::as_u64).map_err(syntax)?,
            );
            let role = nm.get("role").map(parse_role).transpose()?.unwrap_or(StableRole::Cloud);
            nodes.push(PhysicalNode { capacity, role });
        }
        if out.iter().any(|p: &ProviderSpec| p.provider_id == e.key) {
            return Err(bad(e.node.line, format!("duplicate provider `{}`", e.key)));
        }
        out.push(ProviderSpec { provider_id: e.key.clone(), availability, latency_ms, nodes });
    }
    out.sort_by(|a, b| a.provider_id.cmp(&b.provider_id));
    Ok(out)
}

fn parse_sla(n: &Node) -> Result<SlaRecord, SimError> {
    let m = MapReader::new(n, &["provider", "group", "sla_rank", "cpus", "mem_mb", "disk_gb"]).map_err(syntax)?;
    let sla_rank = m.require("sla_rank").and_then(Node::as_f64).map_err(syntax)?;
    if sla_rank < 0.0 {
        return Err(bad(n.line, "sla_rank must be non-negative"));
    }
    let get = |k: &str| opt_u64(m.get(k)).map(Option::unwrap_or_default);
    Ok(SlaRecord {
        provider_id: m.require("provider").and_then(Node::as_str).map_err(syntax)?.to_owned(),
        group: m.require("group").and_then(Node::as_str).map_err(syntax)?.to_owned(),
        sla_rank,
        guaranteed: ResourceVector::new(get("cpus")?, get("mem_mb")?, get("disk_gb")?),
    })
}

fn parse_dataset(n: &Node) -> Result<DataCatalogEntry, SimError> {
    let m = MapReader::new(n, &["dataset", "provider", "present", "total"]).map_err(syntax)?;
    let bytes_present = m.require("present").and_then(Node::as_u64).map_err(syntax)?;
    let bytes_total = m.require("total").and_then(Node::as_u64).map_err(syntax)?;
    if bytes_total == 0 || bytes_present > bytes_total {
        return Err(bad(n.line, "dataset bytes must satisfy 0 <= present <= total, total > 0"));
    }
    Ok(DataCatalogEntry {
        dataset_id: m.require("dataset").and_then(Node::as_str).map_err(syntax)?.to_owned(),
        provider_id: m.require("provider").and_then(Node::as_str).map_err(syntax)?.to_owned(),
        bytes_present,
        bytes_total,
    })
}

fn parse_users(n: &Node) -> Result<Vec<UserSpec>, SimError> {
    n.as_map()
        .map_err(syntax)?
        .iter()
        .map(|e| {
            let m = MapReader::new(&e.node, &["group", "weight", "ttl_s"]).map_err(syntax)?;
            let weight = m.get("weight").map(Node::as_f64).transpose().map_err(syntax)?.unwrap_or(1.0);
            if weight <= 0.0 {
                return Err(bad(e.node.line, format!("weight of `{}` must be positive", e.key)));
            }
            let ttl_s = opt_u64(m.get("ttl_s"))?;
            if ttl_s == Some(0) {
                return Err(bad(e.node.line, "ttl_s must be positive"));
            }
            Ok(UserSpec {
                name: e.key.clone(),
                group: m.require("group").and_then(Node::as_str).map_err(syntax)?.to_owned(),
                weight,
                ttl_s,
            })
        })
        .collect()
}

fn parse_event(n: &Node) -> Result<ScenarioEvent, SimError> {
    let entries = n.as_map().map_err(syntax)?;
    let verb = entries
        .iter()
        .find(|e| e.key != "at")
        .map(|e| e.key.as_str())
        .ok_or_else(|| bad(n.line, "event has no action"))?;
    let allowed: &[&str] = match verb {
        "submit" => &["at", "submit", "user", "id", "duration", "prefs"],
        "delete" => &["at", "delete"],
        "fail_site" => &["at", "fail_site", "duration"],
        "revoke" => &["at", "revoke"],
        "job" => &["at", "job", "cluster", "id", "cpus", "mem_mb", "disk_gb", "duration"],
        "switch_role" => &["at", "switch_role", "to"],
        other => return Err(bad(n.line, format!("unknown event `{other}`"))),
    };
    let m = MapReader::new(n, allowed).map_err(syntax)?;
    let s = |k: &str| m.require(k).and_then(Node::as_str).map(str::to_owned).map_err(syntax);
    let u = |k: &str| m.require(k).and_then(Node::as_u64).map_err(syntax);
    let at = u("at")?;
    let action = match verb {
        "submit" => EventAction::Submit {
            template: s("submit")?,
            user: s("user")?,
            reference: s("id")?,
            duration_s: opt_u64(m.get("duration"))?,
            prefs: m
                .get("prefs")
                .map(|p| {
                    let list = p.as_str_list().map_err(syntax)?;
                    PreferenceList::new(list).map_err(|e| bad(p.line, e.to_string()))
                })
                .transpose()?,
        },
        "delete" => EventAction::Delete { reference: s("delete")? },
        "fail_site" => EventAction::FailSite { provider: s("fail_site")?, duration_s: u("duration")? },
        "revoke" => EventAction::Revoke { user: s("revoke")? },
        "job" => {
            let resources = ResourceVector::new(u("cpus")?, u("mem_mb")?, u("disk_gb")?);
            if !resources.any_positive() {
                return Err(bad(n.line, "job resources must have a positive component"));
            }
            EventAction::Job {
                reference: s("job")?,
                cluster: m.get("cluster").map(|c| c.as_str().map(str::to_owned)).transpose().map_err(syntax)?,
                job_id: s("id")?,
                resources,
                duration_s: u("duration")?,
            }
        }
        _ => EventAction::SwitchRole { node: s("switch_role")?, to: parse_role(m.require("to").map_err(syntax)?)? },
    };
    Ok(ScenarioEvent { at, action })
}
