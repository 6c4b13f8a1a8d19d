//! `fedorch`: manage deployments against a simulated federation, rank providers, validate
//! templates and run scenarios.

mod journal;
mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedorch::orchestrator::OrchestratorError;
use fedorch::ranker::{self, RankerConfig};
use fedorch::sim::{run_scenario, RunReport};
use fedorch::template::{self, Violation};
use fedorch::{DeploymentRecord, OrchConfig, Scenario, Uuid};
use serde::Serialize;

use journal::{Entry, Session};
use output::{or_dash, Out};

#[derive(Parser)]
#[command(name = "fedorch", version, about = "Federated-cloud orchestrator and site simulator")]
struct Cli {
    /// One JSON record per line instead of tables.
    #[arg(long, global = true)]
    machine: bool,
    /// Scenario describing the providers, users and agreements deployments run against.
    #[arg(long, global = true, env = "ORCH_WORLD")]
    world: Option<PathBuf>,
    /// Journal of earlier deployment commands.
    #[arg(long, global = true, env = "ORCH_STATE", default_value = ".fedorch-state")]
    state: PathBuf,
    /// Ranker, scheduler, elasticity and policy settings.
    #[arg(long = "orch-config", global = true, env = "ORCH_CONFIG")]
    orch_config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a deployment from a template.
    Depcreate {
        template: PathBuf,
        #[arg(long, env = "ORCH_USER")]
        user: String,
        /// Comma-separated provider preference list.
        #[arg(long, value_delimiter = ',')]
        prefs: Option<Vec<String>>,
    },
    /// Show one deployment.
    Depshow { uuid: String },
    /// List deployments.
    Deplist {
        #[arg(long)]
        user: Option<String>,
    },
    /// Delete a deployment.
    Depdel {
        uuid: String,
        #[arg(long, env = "ORCH_USER")]
        user: String,
    },
    /// Rank the providers of a snapshot file.
    Rank {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        snapshot: PathBuf,
    },
    /// Run or check scenarios.
    Sim {
        #[command(subcommand)]
        command: SimCommand,
    },
    /// Check a template for structural problems.
    Validate { template: PathBuf },
}

#[derive(Subcommand)]
enum SimCommand {
    /// Run a scenario to its horizon.
    Run {
        scenario: PathBuf,
        /// Write the full report (log and summary) here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Re-derive a report's metrics from its log and compare.
    Verify { report: PathBuf },
}

enum Failure {
    Domain { kind: String, message: String },
    Usage(String),
}

impl From<OrchestratorError> for Failure {
    fn from(e: OrchestratorError) -> Self {
        Failure::Domain { kind: e.kind().to_owned(), message: e.to_string() }
    }
}

fn domain(kind: &str, message: impl Into<String>) -> Failure {
    Failure::Domain { kind: kind.to_owned(), message: message.into() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = Out { machine: cli.machine };
    match run(&cli, &out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Domain { kind, message }) => {
            out.error(&kind, &message);
            ExitCode::from(1)
        }
        Err(Failure::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| domain("IoError", format!("{}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<Option<OrchConfig>, Failure> {
    match path {
        Some(p) => {
            let text = read(p)?;
            OrchConfig::parse(&text).map(Some).map_err(|e| domain("ConfigError", format!("{}: {e}", p.display())))
        }
        None => Ok(None),
    }
}

fn session(cli: &Cli) -> Result<Session, Failure> {
    let world = cli.world.as_deref().ok_or_else(|| {
        Failure::Usage("`--world <scenario>` (or ORCH_WORLD) is required for deployment commands".into())
    })?;
    let fallback = load_config(cli.orch_config.as_deref())?;
    Session::open(world, &cli.state, fallback).map_err(|e| domain("WorldError", e))
}

fn parse_uuid(s: &str) -> Result<Uuid, Failure> {
    s.parse().map_err(|_| Failure::Usage(format!("`{s}` is not a deployment uuid")))
}

#[derive(Serialize)]
struct DepView<'a> {
    uuid: Uuid,
    owner: &'a str,
    state: &'a str,
    chosen_site: Option<&'a str>,
    ranked: &'a [String],
    attempts: Vec<String>,
    outputs: &'a std::collections::BTreeMap<String, String>,
    created_at: u64,
    updated_at: u64,
}

impl<'a> DepView<'a> {
    fn new(r: &'a DeploymentRecord) -> Self {
        DepView {
            uuid: r.uuid,
            owner: &r.owner,
            state: r.state.as_str(),
            chosen_site: r.chosen_site.as_deref(),
            ranked: &r.ranked,
            attempts: r
                .attempts
                .iter()
                .map(|a| match &a.outcome {
                    fedorch::orchestrator::AttemptOutcome::Ok => format!("{}:ok", a.provider_id),
                    fedorch::orchestrator::AttemptOutcome::Fail { reason } => {
                        format!("{}:fail({reason})", a.provider_id)
                    }
                })
                .collect(),
            outputs: &r.outputs,
            created_at: r.created_at,
            updated_at: r.updated_at,
        }
    }

    fn cells(&self) -> Vec<String> {
        vec![
            self.uuid.to_string(),
            self.owner.to_owned(),
            self.state.to_owned(),
            or_dash(self.chosen_site),
            if self.ranked.is_empty() { "-".into() } else { self.ranked.join(",") },
        ]
    }
}

const DEP_HEADERS: &[&str] = &["UUID", "OWNER", "STATE", "SITE", "RANKED"];

fn run(cli: &Cli, out: &Out) -> Result<(), Failure> {
    match &cli.command {
        Command::Depcreate { template, user, prefs } => {
            let text = read(template)?;
            let mut s = session(cli)?;
            let entry = Entry::Create { template: text, user: user.clone(), prefs: prefs.clone() };
            let uuid = s.run(entry).map_err(|e| domain("WorldError", e))??;
            let rec = s.engine.orchestrator().get_deployment(uuid)?;
            let view = DepView::new(rec);
            out.record(DEP_HEADERS, &view, DepView::cells);
            Ok(())
        }
        Command::Depshow { uuid } => {
            let uuid = parse_uuid(uuid)?;
            let s = session(cli)?;
            let rec = s.engine.orchestrator().get_deployment(uuid)?;
            let view = DepView::new(rec);
            if out.machine {
                out.record(DEP_HEADERS, &view, DepView::cells);
            } else {
                let mut rows = vec![
                    vec!["uuid".into(), view.uuid.to_string()],
                    vec!["owner".into(), view.owner.into()],
                    vec!["state".into(), view.state.into()],
                    vec!["site".into(), or_dash(view.chosen_site)],
                    vec!["ranked".into(), view.ranked.join(",")],
                    vec!["attempts".into(), view.attempts.join(" ")],
                    vec!["created".into(), view.created_at.to_string()],
                    vec!["updated".into(), view.updated_at.to_string()],
                ];
                rows.extend(view.outputs.iter().map(|(k, v)| vec![format!("output {k}"), v.clone()]));
                print!("{}", output::table(&["FIELD", "VALUE"], &rows));
            }
            Ok(())
        }
        Command::Deplist { user } => {
            let s = session(cli)?;
            let views: Vec<DepView> =
                s.engine.orchestrator().list_deployments(user.as_deref()).into_iter().map(DepView::new).collect();
            out.records(DEP_HEADERS, &views, DepView::cells);
            Ok(())
        }
        Command::Depdel { uuid, user } => {
            let uuid = parse_uuid(uuid)?;
            let mut s = session(cli)?;
            let uuid = s.run(Entry::Delete { uuid, user: user.clone() }).map_err(|e| domain("WorldError", e))??;
            let rec = s.engine.orchestrator().get_deployment(uuid)?;
            out.record(DEP_HEADERS, &DepView::new(rec), DepView::cells);
            Ok(())
        }
        Command::Rank { config, snapshot } => rank(cli, out, config.as_deref(), snapshot),
        Command::Sim { command: SimCommand::Run { scenario, report } } => {
            let fallback = load_config(cli.orch_config.as_deref())?;
            let s = Scenario::load(scenario, fallback).map_err(|e| domain("ScenarioError", e.to_string()))?;
            let r = run_scenario(s).map_err(|e| domain("SimError", e.to_string()))?;
            if let Some(path) = report {
                fs::write(path, r.to_jsonl()).map_err(|e| domain("IoError", format!("{}: {e}", path.display())))?;
            }
            print_run(out, &r);
            Ok(())
        }
        Command::Sim { command: SimCommand::Verify { report } } => {
            let r = RunReport::from_jsonl(&read(report)?).map_err(|e| domain("ReportError", e))?;
            r.verify().map_err(|e| domain("VerificationFailed", e))?;
            let v = serde_json::json!({ "verified": true, "records": r.log.len() });
            if out.machine {
                println!("{v}");
            } else {
                println!("verified {} log records", r.log.len());
            }
            Ok(())
        }
        Command::Validate { template } => {
            let text = read(template)?;
            let t = template::parse_template(&text).map_err(|e| domain("TemplateError", e.to_string()))?;
            let report = template::validate(&t);
            if out.machine {
                let v =
                    serde_json::json!({ "template": template.display().to_string(), "violations": report.violations });
                println!("{v}");
            } else if report.is_deployable() {
                println!("{}: ok, {} node(s)", template.display(), t.nodes.len());
            } else {
                let rows: Vec<Vec<String>> =
                    report.violations.iter().map(|v| vec![kind_of(v), v.to_string()]).collect();
                print!("{}", output::table(&["VIOLATION", "DETAIL"], &rows));
            }
            if report.is_deployable() {
                Ok(())
            } else {
                Err(domain("TemplateInvalid", format!("{} violation(s)", report.violations.len())))
            }
        }
    }
}

fn kind_of(v: &Violation) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.get("violation").and_then(|k| k.as_str()).map(str::to_owned))
        .unwrap_or_default()
}

#[derive(Serialize)]
struct RankRow {
    rank: usize,
    provider: String,
    score: f64,
    preferred: bool,
}

fn rank(cli: &Cli, out: &Out, config: Option<&Path>, snapshot: &Path) -> Result<(), Failure> {
    let cfg = load_config(config.or(cli.orch_config.as_deref()))?;
    let snap = ranker::parse_snapshot(&read(snapshot)?)
        .map_err(|e| domain("SnapshotError", format!("{}: {e}", snapshot.display())))?;
    let weights: RankerConfig = cfg.map(|c| c.ranker).unwrap_or_default();
    let ranked = ranker::rank_with_scores(&snap.candidates, &weights, snap.prefs.as_ref())
        .map_err(|e| domain("RankerError", e.to_string()))?;
    let preferred = |id: &str| snap.prefs.as_ref().is_some_and(|p| p.providers().iter().any(|x| x == id));
    let rows: Vec<RankRow> = ranked
        .into_iter()
        .enumerate()
        .map(|(i, (provider, score))| RankRow { rank: i + 1, preferred: preferred(&provider), provider, score })
        .collect();
    out.records(&["RANK", "PROVIDER", "SCORE", "PREFERRED"], &rows, |r| {
        vec![
            r.rank.to_string(),
            r.provider.clone(),
            format!("{:.6}", r.score),
            if r.preferred { "yes" } else { "" }.into(),
        ]
    });
    Ok(())
}

#[derive(Serialize)]
struct SiteRow<'a> {
    site: &'a str,
    total_cpus: u64,
    cpu_seconds: u64,
    utilization: f64,
}

fn print_run(out: &Out, r: &RunReport) {
    let m = &r.metrics;
    if out.machine {
        print!("{}", r.to_jsonl());
        return;
    }
    let sites: Vec<SiteRow> = m
        .sites
        .iter()
        .map(|(site, s)| SiteRow {
            site,
            total_cpus: s.total_cpus,
            cpu_seconds: s.cpu_seconds,
            utilization: s.utilization,
        })
        .collect();
    out.records(&["SITE", "CPUS", "CPU_SECONDS", "UTILIZATION"], &sites, |s| {
        vec![s.site.into(), s.total_cpus.to_string(), s.cpu_seconds.to_string(), format!("{:.4}", s.utilization)]
    });
    println!();
    let rows: Vec<Vec<String>> = m
        .deployments
        .iter()
        .map(|d| {
            let attempts: Vec<String> =
                d.attempts.iter().map(|a| format!("{}:{}", a.site, if a.ok { "ok" } else { "fail" })).collect();
            vec![
                d.reference.clone(),
                d.owner.clone(),
                d.state.to_string(),
                or_dash(d.chosen_site.as_deref()),
                if attempts.is_empty() { "-".into() } else { attempts.join(" ") },
                if d.still_queued { "queued".into() } else { String::new() },
            ]
        })
        .collect();
    print!("{}", output::table(&["DEPLOYMENT", "OWNER", "STATE", "SITE", "ATTEMPTS", ""], &rows));
    println!();
    println!(
        "horizon {} s, {} log records, {} instances started, {} preempted, mean wait {:.2} s",
        m.horizon_s,
        r.log.len(),
        m.instances_started,
        m.preemptions,
        m.mean_wait_s
    );
    println!(
        "jobs: {} submitted, {} completed, {} queued at horizon; {} deployment(s) rejected",
        m.jobs.submitted, m.jobs.completed, m.jobs.still_queued, m.deployments_rejected
    );
}
