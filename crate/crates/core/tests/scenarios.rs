use std::path::{Path, PathBuf};

use fedorch::sim::{run_scenario, LogEvent, RunReport, Scenario};
use fedorch::{DeploymentState, Role};

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn run(name: &str) -> RunReport {
    let s = Scenario::load(&example(name), None).unwrap_or_else(|e| panic!("{name}: {e}"));
    run_scenario(s).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn shipped() -> Vec<String> {
    let mut out: Vec<String> = std::fs::read_dir(example(""))
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".scn"))
        .collect();
    out.sort();
    out
}

#[test]
fn every_shipped_scenario_runs_and_verifies() {
    let names = shipped();
    assert!(names.len() >= 7);
    for name in names {
        let report = run(&name);
        report.verify().unwrap_or_else(|e| panic!("{name}: {e}"));
        let back = RunReport::from_jsonl(&report.to_jsonl()).unwrap();
        assert_eq!(back, report, "{name}");
    }
}

#[test]
fn single_job_uses_half_the_site() {
    let r = run("single-job.scn");
    let site = &r.metrics.sites["site-a"];
    assert_eq!(site.cpu_seconds, 20);
    assert_eq!(site.utilization, 0.5);
    assert_eq!(r.metrics.user_cpu_seconds["alice"], 20);
    assert_eq!(r.metrics.deployments[0].state, DeploymentState::Deleted);
}

#[test]
fn empty_scenario_has_no_workload() {
    let r = run("empty.scn");
    assert_eq!(r.metrics.sites["site-a"].utilization, 0.0);
    assert_eq!(r.metrics.instances_started, 0);
    assert!(r.metrics.deployments.is_empty());
    assert!(r
        .log
        .iter()
        .all(|l| matches!(l.event, LogEvent::SiteDeclared { .. } | LogEvent::TokenIssued { .. } | LogEvent::Horizon)));
}

#[test]
fn runs_are_byte_identical() {
    for name in shipped() {
        assert_eq!(run(&name).to_jsonl(), run(&name).to_jsonl(), "{name}");
    }
}

#[test]
fn data_resident_site_is_chosen() {
    let r = run("data-locality.scn");
    for d in &r.metrics.deployments {
        assert_eq!(d.chosen_site.as_deref(), Some("site-b"), "{}", d.reference);
    }
}

#[test]
fn failover_walks_the_ranked_list() {
    let r = run("failover.scn");
    let by_ref = |r0: &str| r.metrics.deployments.iter().find(|d| d.reference == r0).unwrap();
    let v1 = by_ref("v1");
    assert_eq!(v1.chosen_site.as_deref(), Some("site-b"));
    assert_eq!(v1.attempts.len(), 2);
    assert!(!v1.attempts[0].ok);
    let v2 = by_ref("v2");
    assert_eq!(v2.chosen_site.as_deref(), Some("site-c"));
    let v3 = by_ref("v3");
    assert_eq!(v3.chosen_site.as_deref(), Some("site-a"));
    assert_eq!(v3.attempts.len(), 1);
}

#[test]
fn elastic_cluster_drains_its_queue_and_powers_down() {
    let r = run("elastic-cluster.scn");
    assert_eq!(r.metrics.jobs.still_queued, 0);
    assert_eq!(r.metrics.jobs.completed, r.metrics.jobs.submitted);
    let c = &r.final_state.clusters["c1.wn"];
    let on = c.workers.values().filter(|w| w.power != fedorch::Power::Off).count();
    assert_eq!(on, c.min_nodes as usize);
    let peak = r.log.iter().filter(|l| matches!(l.event, LogEvent::PowerOn { .. })).count();
    assert!(peak > 1);
}

#[test]
fn preemption_and_role_switching() {
    let r = run("preemption.scn");
    assert!(r.metrics.preemptions >= 1);
    assert!(r.log.iter().any(|l| matches!(l.event, LogEvent::RoleDraining { .. })));
    assert_eq!(r.final_state.sites["site-a"].roles["site-a-n2"], Role::Batch);
}
