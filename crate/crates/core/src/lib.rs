//! Federated-cloud orchestration engine with a deterministic simulator of IaaS sites.
//!
//! The crate is organised around the control-plane pieces a PaaS orchestrator needs:
//!
//! * [`template`]: a strict TOSCA-subset template parser producing a typed topology DAG.
//! * [`ranker`]: provider ranking from preferences, SLA rank, monitoring data and data locality.
//! * [`scheduler`]: per-site fair-share scheduling with a persistent queue and preemptible instances.
//! * [`elasticity`]: power management of elastic worker pools and batch/cloud role commuting.
//! * [`orchestrator`]: the deployment state machine with failover across ranked sites.
//! * [`iam`]: opaque bearer tokens, group policy and credential translation.
//! * [`sim`]: the discrete-event simulator that ties everything together, plus run reports.

pub mod config;
pub mod elasticity;
pub mod iam;
pub mod orchestrator;
pub mod ranker;
pub mod resource;
pub mod scheduler;
pub mod sim;
pub mod template;
pub mod text;

pub use config::OrchConfig;
pub use elasticity::{Action, ElasticPolicy, NodeRecord, PartitionDirector, Power, Role, VirtualCluster};
pub use iam::{CredentialKind, IamService, PolicyRule, TokenRecord, TranslatedCredential};
pub use orchestrator::{DataCatalogEntry, DeploymentRecord, DeploymentState, Orchestrator, SlaRecord};
pub use ranker::{rank_providers, PreferenceList, ProviderSnapshot, RankerConfig};
pub use resource::ResourceVector;
pub use scheduler::{Decision, InstanceClass, InstanceRequest, RunningInstance, SchedulerConfig, SiteScheduler};
pub use sim::{run_scenario, RunReport, Scenario};
pub use template::{parse_template, DeploymentTemplate, NodeKind, NodeSpec};
pub use uuid::Uuid;
