//! The deployment state machine.
//!
//! A deployment is created from template text and a bearer token, placed against a frozen
//! snapshot of the eligible providers, and then advanced by site outcomes: the first site
//! that accepts completes it, each failure moves on to the next ranked provider, and an
//! exhausted list fails it. The ranked list is never recomputed for a deployment.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::iam::{IamError, IamService, TokenRecord};
use crate::ranker::{self, PreferenceBook, PreferenceList, ProviderSnapshot, RankerConfig, RankerError};
use crate::resource::ResourceVector;
use crate::template::{self, DeploymentTemplate, TemplateError, ValidationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeploymentState {
    CreateInProgress,
    CreateComplete,
    CreateFailed,
    DeleteInProgress,
    Deleted,
}

impl DeploymentState {
    pub fn as_str(&self) -> &'static str {
        match self {
            DeploymentState::CreateInProgress => "CREATE_IN_PROGRESS",
            DeploymentState::CreateComplete => "CREATE_COMPLETE",
            DeploymentState::CreateFailed => "CREATE_FAILED",
            DeploymentState::DeleteInProgress => "DELETE_IN_PROGRESS",
            DeploymentState::Deleted => "DELETED",
        }
    }

    pub fn can_become(self, next: DeploymentState) -> bool {
        use DeploymentState::*;
        matches!(
            (self, next),
            (CreateInProgress, CreateComplete)
                | (CreateInProgress, CreateFailed)
                | (CreateComplete, DeleteInProgress)
                | (CreateFailed, DeleteInProgress)
                | (DeleteInProgress, Deleted)
        )
    }
}

impl fmt::Display for DeploymentState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum AttemptOutcome {
    Ok,
    Fail { reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub provider_id: String,
    #[serde(flatten)]
    pub outcome: AttemptOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub t: u64,
    pub from: Option<DeploymentState>,
    pub to: DeploymentState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentRecord {
    pub uuid: Uuid,
    pub owner: String,
    pub groups: BTreeSet<String>,
    pub template: DeploymentTemplate,
    pub prefs: Option<PreferenceList>,
    pub state: DeploymentState,
    pub chosen_site: Option<String>,
    /// Ranked providers frozen at placement time.
    pub ranked: Vec<String>,
    pub attempts: Vec<Attempt>,
    pub outputs: BTreeMap<String, String>,
    pub created_at: u64,
    pub updated_at: u64,
    pub history: Vec<Transition>,
}

impl DeploymentRecord {
    /// Provider the deployment is currently being attempted on.
    pub fn current_target(&self) -> Option<&str> {
        if self.state != DeploymentState::CreateInProgress {
            return None;
        }
        self.ranked.get(self.attempts.len()).map(String::as_str)
    }

    fn transition(&mut self, to: DeploymentState, t: u64) -> Result<(), OrchestratorError> {
        if !self.state.can_become(to) {
            return Err(OrchestratorError::IllegalTransition { uuid: self.uuid, from: self.state, to });
        }
        self.history.push(Transition { t, from: Some(self.state), to });
        self.state = to;
        self.updated_at = t;
        Ok(())
    }

    /// Every recorded transition is legal and the attempts follow the ranked list in order.
    pub fn audit(&self) -> Result<(), String> {
        let mut prev: Option<DeploymentState> = None;
        for tr in &self.history {
            let legal = match (prev, tr.from) {
                (None, None) => tr.to == DeploymentState::CreateInProgress,
                (Some(p), Some(f)) => p == f && f.can_become(tr.to),
                _ => false,
            };
            if !legal {
                return Err(format!("{}: illegal transition {:?} -> {}", self.uuid, tr.from, tr.to));
            }
            prev = Some(tr.to);
        }
        if prev != Some(self.state) {
            return Err(format!("{}: history does not end in the current state", self.uuid));
        }
        if self.attempts.len() > self.ranked.len()
            || self.attempts.iter().zip(&self.ranked).any(|(a, r)| a.provider_id != *r)
        {
            return Err(format!("{}: attempts are not a prefix of the ranked list", self.uuid));
        }
        let succeeded = self.attempts.last().is_some_and(|a| a.outcome == AttemptOutcome::Ok);
        if self.chosen_site.is_some() != succeeded {
            return Err(format!("{}: chosen site disagrees with the attempt history", self.uuid));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlaRecord {
    pub provider_id: String,
    pub group: String,
    pub sla_rank: f64,
    pub guaranteed: ResourceVector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataCatalogEntry {
    pub dataset_id: String,
    pub provider_id: String,
    pub bytes_present: u64,
    pub bytes_total: u64,
}

/// Live monitoring view of a provider at placement time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderStatus {
    pub provider_id: String,
    pub availability: f64,
    pub latency_ms: f64,
    pub free_capacity: ResourceVector,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SiteEvent {
    /// The site started the deployment; maps resource-holding template nodes to instance ids.
    SiteAccepted {
        instances: BTreeMap<String, String>,
    },
    SiteFailed {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrchestratorError {
    #[error("authentication failed: {0}")]
    Auth(#[from] IamError),
    #[error("`{subject}` may not act on deployment {uuid}")]
    Forbidden { subject: String, uuid: Uuid },
    #[error("template rejected: {0}")]
    TemplateParse(#[from] TemplateError),
    #[error("template rejected with {} violation(s)", report.violations.len())]
    TemplateInvalid { report: ValidationReport },
    #[error("deployment {0} not found")]
    NotFound(Uuid),
    #[error("no eligible provider for deployment {0}")]
    NoEligibleProvider(Uuid),
    #[error("deployment {uuid}: illegal transition {from} -> {to}")]
    IllegalTransition { uuid: Uuid, from: DeploymentState, to: DeploymentState },
    #[error("ranking failed: {0}")]
    Ranker(#[from] RankerError),
}

impl OrchestratorError {
    /// Stable error name for machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            OrchestratorError::Auth(_) | OrchestratorError::Forbidden { .. } => "AuthError",
            OrchestratorError::TemplateParse(_) | OrchestratorError::TemplateInvalid { .. } => "TemplateError",
            OrchestratorError::NotFound(_) => "NotFound",
            OrchestratorError::NoEligibleProvider(_) => "NoEligibleProvider",
            OrchestratorError::IllegalTransition { .. } => "IllegalTransition",
            OrchestratorError::Ranker(_) => "RankerError",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Orchestrator {
    ranker: RankerConfig,
    prefs: PreferenceBook,
    slas: Vec<SlaRecord>,
    catalog: Vec<DataCatalogEntry>,
    records: BTreeMap<Uuid, DeploymentRecord>,
    tokens: BTreeMap<Uuid, TokenRecord>,
    rng: ChaCha8Rng,
}

impl Orchestrator {
    pub fn new(
        ranker: RankerConfig,
        prefs: PreferenceBook,
        slas: Vec<SlaRecord>,
        catalog: Vec<DataCatalogEntry>,
        seed: u64,
    ) -> Self {
        Self {
            ranker,
            prefs,
            slas,
            catalog,
            records: BTreeMap::new(),
            tokens: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn ranker_config(&self) -> &RankerConfig {
        &self.ranker
    }

    fn next_uuid(&mut self) -> Uuid {
        let mut bytes = [0u8; 16];
        self.rng.fill_bytes(&mut bytes);
        uuid::Builder::from_random_bytes(bytes).into_uuid()
    }

    pub fn create_deployment(
        &mut self,
        template_text: &str,
        token_id: &str,
        iam: &IamService,
        prefs: Option<PreferenceList>,
        t: u64,
    ) -> Result<Uuid, OrchestratorError> {
        let token = iam.validate(token_id, t)?;
        let template = template::parse_template(template_text)?;
        let report = template::validate(&template);
        if !report.is_deployable() {
            return Err(OrchestratorError::TemplateInvalid { report });
        }
        let uuid = self.next_uuid();
        let record = DeploymentRecord {
            uuid,
            owner: token.subject.clone(),
            groups: token.groups.clone(),
            template,
            prefs,
            state: DeploymentState::CreateInProgress,
            chosen_site: None,
            ranked: Vec::new(),
            attempts: Vec::new(),
            outputs: BTreeMap::new(),
            created_at: t,
            updated_at: t,
            history: vec![Transition { t, from: None, to: DeploymentState::CreateInProgress }],
        };
        self.records.insert(uuid, record);
        self.tokens.insert(uuid, token);
        Ok(uuid)
    }

    /// Fraction of the template's required dataset bytes already present at `provider`;
    /// 1.0 when nothing is required.
    pub fn data_locality(&self, template: &DeploymentTemplate, provider: &str) -> f64 {
        let required = template.required_datasets();
        let mut present = 0u64;
        let mut total = 0u64;
        for ds in &required {
            let entries = self.catalog.iter().filter(|e| e.dataset_id == *ds);
            total += entries.clone().map(|e| e.bytes_total).max().unwrap_or(0);
            present +=
                entries.filter(|e| e.provider_id == provider).map(|e| e.bytes_present.min(e.bytes_total)).sum::<u64>();
        }
        if total == 0 {
            1.0
        } else {
            present as f64 / total as f64
        }
    }

    /// Ranking inputs for the providers this deployment may use: an SLA for one of the
    /// owner's groups, a permit rule, and room for the whole topology.
    pub fn candidate_snapshots(
        &self,
        uuid: Uuid,
        iam: &IamService,
        providers: &[ProviderStatus],
    ) -> Result<Vec<ProviderSnapshot>, OrchestratorError> {
        let record = self.records.get(&uuid).ok_or(OrchestratorError::NotFound(uuid))?;
        let token = &self.tokens[&uuid];
        let demand = template::aggregate_demand(&record.template);
        Ok(providers
            .iter()
            .filter_map(|p| {
                let sla_rank = self
                    .slas
                    .iter()
                    .filter(|s| s.provider_id == p.provider_id && record.groups.contains(&s.group))
                    .map(|s| s.sla_rank)
                    .max_by(f64::total_cmp)?;
                if !iam.authorize(token, &p.provider_id) || !demand.fits(&p.free_capacity) {
                    return None;
                }
                Some(ProviderSnapshot {
                    provider_id: p.provider_id.clone(),
                    sla_rank,
                    availability: p.availability,
                    latency_ms: p.latency_ms,
                    free_capacity: p.free_capacity,
                    data_locality: self.data_locality(&record.template, &p.provider_id),
                })
            })
            .collect())
    }

    /// Ranks the eligible providers and freezes the list on the record. With no eligible
    /// provider the deployment fails.
    pub fn place(
        &mut self,
        uuid: Uuid,
        iam: &IamService,
        providers: &[ProviderStatus],
        t: u64,
    ) -> Result<Vec<String>, OrchestratorError> {
        let state = self.get_deployment(uuid)?.state;
        if state != DeploymentState::CreateInProgress || !self.records[&uuid].ranked.is_empty() {
            return Err(OrchestratorError::IllegalTransition {
                uuid,
                from: state,
                to: DeploymentState::CreateInProgress,
            });
        }
        let candidates = self.candidate_snapshots(uuid, iam, providers)?;
        let record = &self.records[&uuid];
        if candidates.is_empty() {
            let record = self.records.get_mut(&uuid).expect("record exists");
            record.transition(DeploymentState::CreateFailed, t)?;
            return Err(OrchestratorError::NoEligibleProvider(uuid));
        }
        let prefs = record.prefs.as_ref().or_else(|| self.prefs.resolve(&record.owner, &record.groups));
        let ranked = ranker::rank_providers(&candidates, &self.ranker, prefs)?;
        let record = self.records.get_mut(&uuid).expect("record exists");
        record.ranked = ranked.clone();
        record.updated_at = t;
        Ok(ranked)
    }

    pub fn advance(&mut self, uuid: Uuid, event: SiteEvent, t: u64) -> Result<&DeploymentRecord, OrchestratorError> {
        let record = self.records.get_mut(&uuid).ok_or(OrchestratorError::NotFound(uuid))?;
        let Some(site) = record.current_target().map(str::to_owned) else {
            let to = match event {
                SiteEvent::SiteAccepted { .. } => DeploymentState::CreateComplete,
                SiteEvent::SiteFailed { .. } => DeploymentState::CreateFailed,
            };
            return Err(OrchestratorError::IllegalTransition { uuid, from: record.state, to });
        };
        match event {
            SiteEvent::SiteAccepted { instances } => {
                record.transition(DeploymentState::CreateComplete, t)?;
                record.attempts.push(Attempt { provider_id: site.clone(), outcome: AttemptOutcome::Ok });
                record.outputs = record
                    .template
                    .outputs
                    .iter()
                    .map(|(name, node)| {
                        let instance = hosting_instance(&record.template, node, &instances).unwrap_or("unplaced");
                        (name.clone(), format!("{site}/{node}/{instance}"))
                    })
                    .collect();
                record.chosen_site = Some(site);
            }
            SiteEvent::SiteFailed { reason } => {
                record.attempts.push(Attempt { provider_id: site, outcome: AttemptOutcome::Fail { reason } });
                if record.attempts.len() >= record.ranked.len() {
                    record.transition(DeploymentState::CreateFailed, t)?;
                } else {
                    record.updated_at = t;
                }
            }
        }
        Ok(record)
    }

    /// Deletes a finished deployment. `release` runs while the record is DELETE_IN_PROGRESS
    /// and must free every site resource the deployment holds.
    pub fn delete_deployment(
        &mut self,
        uuid: Uuid,
        token_id: &str,
        iam: &IamService,
        t: u64,
        release: impl FnOnce(&DeploymentRecord),
    ) -> Result<DeploymentRecord, OrchestratorError> {
        let token = iam.validate(token_id, t)?;
        let record = self.records.get_mut(&uuid).ok_or(OrchestratorError::NotFound(uuid))?;
        if record.owner != token.subject && !token.is_admin() {
            return Err(OrchestratorError::Forbidden { subject: token.subject, uuid });
        }
        record.transition(DeploymentState::DeleteInProgress, t)?;
        release(record);
        record.transition(DeploymentState::Deleted, t)?;
        Ok(record.clone())
    }

    pub fn get_deployment(&self, uuid: Uuid) -> Result<&DeploymentRecord, OrchestratorError> {
        self.records.get(&uuid).ok_or(OrchestratorError::NotFound(uuid))
    }

    /// Records ordered by creation time, then uuid.
    pub fn list_deployments(&self, owner: Option<&str>) -> Vec<&DeploymentRecord> {
        let mut out: Vec<&DeploymentRecord> =
            self.records.values().filter(|r| owner.is_none_or(|o| r.owner == o)).collect();
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then_with(|| a.uuid.cmp(&b.uuid)));
        out
    }

    pub fn slas(&self) -> &[SlaRecord] {
        &self.slas
    }
}

/// Instance backing `node`: its own, or the nearest dependency's (breadth-first, by name).
fn hosting_instance<'a>(
    template: &DeploymentTemplate,
    node: &str,
    instances: &'a BTreeMap<String, String>,
) -> Option<&'a str> {
    let mut queue = VecDeque::from([node.to_owned()]);
    let mut seen = BTreeSet::new();
    while let Some(n) = queue.pop_front() {
        if !seen.insert(n.clone()) {
            continue;
        }
        if let Some(i) = instances.get(&n) {
            return Some(i);
        }
        if let Some(spec) = template.nodes.get(&n) {
            let mut deps = spec.depends_on.clone();
            deps.sort();
            queue.extend(deps);
        }
    }
    None
}
