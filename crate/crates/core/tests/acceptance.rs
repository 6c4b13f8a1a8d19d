//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fedorch::ranker::{rank_providers, PreferenceList};
use fedorch::scheduler::{select_victims, InstanceClass};
use fedorch::sim::{run_scenario, Engine, LogEvent, RunReport};
use fedorch::{DeploymentState, Power, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

const RANKER_CASES: usize = 1_000;
const RANKER_BUDGET: Duration = Duration::from_secs(10);
const DOMINANCE_TRIALS: usize = 10_000;
const VICTIM_CASES: usize = 1_000;
const SHARE_TOLERANCE_POINTS: f64 = 5.0;
const HALF_LIFE_S: f64 = 100.0;
const HALF_LIVES: u64 = 100;
const FAILURE_SCENARIOS: u64 = 1_000;
const LOCALITY_RUNS: u64 = 100;
const SUITE_BUDGET: Duration = Duration::from_secs(60);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn load(path: &std::path::Path) -> Scenario {
    Scenario::load(path, None).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn name(path: &std::path::Path) -> String {
    path.file_name().unwrap().to_string_lossy().into_owned()
}

fn ranker_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..RANKER_CASES {
        let n = rng.gen_range(2..=10);
        let cands = random_snapshots(&mut rng, n);
        let w = random_weights(&mut rng);
        let prefs = random_prefs(&mut rng, &cands);
        let got = rank_providers(&cands, &w, prefs.as_ref()).expect("valid input");
        if got != rank_oracle(&cands, &w, prefs.as_ref()) {
            mismatches += 1;
        }
    }
    let took = start.elapsed();
    outcome(
        mismatches == 0 && took < RANKER_BUDGET,
        format!(
            "{RANKER_CASES} cases, {mismatches} mismatches, {:.2} s (< {} s)",
            took.as_secs_f64(),
            RANKER_BUDGET.as_secs()
        ),
    )
}

fn preference_dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    for _ in 0..DOMINANCE_TRIALS {
        let n = rng.gen_range(2..=10);
        let cands = random_snapshots(&mut rng, n);
        let w = random_weights(&mut rng);
        let prefs = random_prefs(&mut rng, &cands)
            .unwrap_or_else(|| PreferenceList::new(vec![cands[rng.gen_range(0..n)].provider_id.clone()]).unwrap());
        let ranked = rank_providers(&cands, &w, Some(&prefs)).unwrap();
        let is_pref = |id: &String| prefs.providers().contains(id);
        let first_other = ranked.iter().position(|id| !is_pref(id)).unwrap_or(ranked.len());
        if ranked[first_other..].iter().any(is_pref) {
            violations += 1;
            continue;
        }
        let listed: Vec<&String> = prefs.providers().iter().filter(|p| ranked.contains(p)).collect();
        if ranked[..first_other].iter().collect::<Vec<_>>() != listed {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("{DOMINANCE_TRIALS} trials, {violations} violations"))
}

fn preemption_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut wrong_size, mut normal_victims, mut unsound, mut with_victims) = (0, 0, 0, 0);
    for _ in 0..VICTIM_CASES {
        let case = random_victim_case(&mut rng);
        let expected = brute_force_min_victims(&case);
        let got = select_victims(&case.request, &case.nodes, &case.running).ok();
        match (&got, expected) {
            (Some(v), Some(k)) if v.victims.len() == k => {}
            (None, None) => {}
            _ => wrong_size += 1,
        }
        let Some(v) = got else { continue };
        if !v.victims.is_empty() {
            with_victims += 1;
        }
        let mut room = case.nodes.iter().find(|(n, _)| *n == v.node).map(|(_, f)| *f).unwrap();
        for id in &v.victims {
            let inst = case.running.iter().find(|r| r.id() == id).unwrap();
            if inst.request.class == InstanceClass::Normal {
                normal_victims += 1;
            }
            if inst.node != v.node || !may_evict(&case.request.class, &inst.request.class) {
                unsound += 1;
            }
            room += inst.request.resources;
        }
        if !case.request.resources.fits(&room) {
            unsound += 1;
        }
    }
    outcome(
        wrong_size == 0 && normal_victims == 0 && unsound == 0 && with_victims > 0,
        format!(
            "{VICTIM_CASES} cases ({with_victims} needing victims): {wrong_size} non-minimal, {normal_victims} Normal victims, {unsound} unsound"
        ),
    )
}

fn fair_share() -> Outcome {
    let share = |w: [f64; 2]| {
        let cpu = fair_share_run(w, HALF_LIFE_S, HALF_LIVES);
        100.0 * cpu[0] / (cpu[0] + cpu[1])
    };
    let equal = share([1.0, 1.0]);
    let skewed = share([2.0, 1.0]);
    let target = 200.0 / 3.0;
    let pass = (equal - 50.0).abs() <= SHARE_TOLERANCE_POINTS && (skewed - target).abs() <= SHARE_TOLERANCE_POINTS;
    outcome(
        pass,
        format!(
            "1:1 -> {equal:.2}% / {:.2}%, 2:1 -> {skewed:.2}% / {:.2}% (targets 50/50 and 66.7/33.3, +/-{SHARE_TOLERANCE_POINTS} points)",
            100.0 - equal,
            100.0 - skewed
        ),
    )
}

fn conservation(reports: &[(String, RunReport)]) -> Outcome {
    let mut problems = Vec::new();
    let mut deletions = 0;
    for (n, r) in reports {
        let free: BTreeMap<_, _> = r.final_state.sites.iter().map(|(s, st)| (s.clone(), st.free)).collect();
        for v in replay_violations(&r.log, Some(&free)) {
            problems.push(format!("{n}: {v}"));
        }
        for (s, st) in &r.final_state.sites {
            let idle =
                r.metrics.deployments.iter().all(|d| d.state != DeploymentState::CreateComplete && !d.still_queued);
            if idle && st.free != st.capacity {
                problems.push(format!("{n}: {s} ends with every deployment gone but free != capacity"));
            }
        }
        deletions += r
            .log
            .iter()
            .filter(|l| matches!(l.event, LogEvent::StateChanged { to: DeploymentState::Deleted, .. }))
            .count();
    }
    let detail = match problems.first() {
        None => format!("{} scenarios, {deletions} deletions, 0 violations", reports.len()),
        Some(p) => format!("{} violations, first: {p}", problems.len()),
    };
    outcome(problems.is_empty() && deletions > 0, detail)
}

fn elasticity_liveness() -> Outcome {
    let r = run_scenario(load(&examples_dir().join("elastic-cluster.scn"))).expect("scenario runs");
    let h = r.metrics.horizon_s;
    let (mut stale_on, mut clusters, mut demand_covered) = (0, 0, true);
    let mut peak = 0u64;
    let mut running = BTreeMap::new();
    for l in &r.log {
        match &l.event {
            LogEvent::JobSubmitted { job, cpus, .. } => {
                running.insert(job.clone(), *cpus);
                peak = peak.max(running.values().sum());
            }
            LogEvent::JobCompleted { job, .. } | LogEvent::JobAborted { job, .. } => {
                running.remove(job);
            }
            _ => {}
        }
    }
    for c in r.final_state.clusters.values() {
        clusters += 1;
        if peak > c.worker_capacity.cpus * u64::from(c.max_nodes) {
            demand_covered = false;
        }
        let expired = c
            .workers
            .values()
            .filter(|w| w.power != Power::Off && w.idle_since.is_some_and(|s| h - s > c.t_idle_s))
            .count();
        stale_on += expired.saturating_sub(c.min_nodes as usize);
    }
    outcome(
        demand_covered && clusters > 0 && r.metrics.jobs.still_queued == 0 && stale_on == 0,
        format!(
            "peak demand {peak} cpus covered: {demand_covered}; {} jobs queued at horizon; {stale_on} idle workers beyond min_nodes still on",
            r.metrics.jobs.still_queued
        ),
    )
}

fn partition_consistency(reports: &[(String, RunReport)], random: &[(u64, RunReport)]) -> Outcome {
    let mut violations = Vec::new();
    let mut switches = 0;
    let logs =
        reports.iter().map(|(n, r)| (n.clone(), r)).chain(random.iter().map(|(s, r)| (format!("random seed {s}"), r)));
    let mut count = 0;
    for (n, r) in logs {
        count += 1;
        switches += r.log.iter().filter(|l| matches!(l.event, LogEvent::RoleSwitched { .. })).count();
        for v in replay_violations(&r.log, None) {
            violations.push(format!("{n}: {v}"));
        }
        if let Err(e) = fedorch::sim::audit_log(&r.log) {
            violations.push(format!("{n}: {e}"));
        }
    }
    let detail = match violations.first() {
        None => format!("{count} logs, {switches} pool switches, 0 violations"),
        Some(v) => format!("{} violations, first: {v}", violations.len()),
    };
    outcome(violations.is_empty() && switches > 0, detail)
}

fn state_machine(random: &mut Vec<(u64, RunReport)>) -> Outcome {
    let (mut illegal, mut not_prefix, mut failovers, mut errors) = (0, 0, 0, Vec::new());
    for seed in 0..FAILURE_SCENARIOS {
        let scenario = random_failure_scenario(seed);
        let horizon = scenario.horizon_s;
        let mut engine = match Engine::new(scenario) {
            Ok(e) => e,
            Err(e) => {
                errors.push(format!("seed {seed}: {e}"));
                continue;
            }
        };
        if let Err(e) = engine.run_until(horizon) {
            errors.push(format!("seed {seed}: {e}"));
            continue;
        }
        for rec in engine.orchestrator().list_deployments(None) {
            let mut prev = None;
            for tr in &rec.history {
                let ok = match (prev, tr.from) {
                    (None, None) => tr.to == DeploymentState::CreateInProgress,
                    (Some(p), Some(f)) => p == f && legal_edge(f, tr.to),
                    _ => false,
                };
                if !ok {
                    illegal += 1;
                }
                prev = Some(tr.to);
            }
            if prev != Some(rec.state) {
                illegal += 1;
            }
            let sites: Vec<&String> = rec.attempts.iter().map(|a| &a.provider_id).collect();
            if sites.len() > rec.ranked.len() || sites.iter().zip(&rec.ranked).any(|(a, b)| *a != b) {
                not_prefix += 1;
            }
            if rec.attempts.len() > 1 {
                failovers += 1;
            }
        }
        match engine.finish() {
            Ok(r) => random.push((seed, r)),
            Err(e) => errors.push(format!("seed {seed}: {e}")),
        }
    }
    let mut detail = format!(
        "{FAILURE_SCENARIOS} scenarios, {failovers} deployments failed over, {illegal} illegal transitions, {not_prefix} attempt lists off the ranked list"
    );
    if let Some(e) = errors.first() {
        detail.push_str(&format!(", {} runs aborted, first: {e}", errors.len()));
    }
    outcome(illegal == 0 && not_prefix == 0 && errors.is_empty() && failovers > 0, detail)
}

fn data_locality() -> Outcome {
    let base = load(&examples_dir().join("data-locality.scn"));
    let (mut runs, mut right) = (0, 0);
    for resident in ["site-a", "site-b"] {
        for seed in 0..LOCALITY_RUNS {
            let mut s = base.clone();
            s.seed = seed;
            for d in &mut s.datasets {
                d.provider_id = resident.into();
            }
            let equal_terms = s.config.ranker.w_data > 0.0
                && s.providers
                    .windows(2)
                    .all(|p| p[0].availability == p[1].availability && p[0].latency_ms == p[1].latency_ms)
                && s.slas.windows(2).all(|p| p[0].sla_rank == p[1].sla_rank);
            assert!(equal_terms, "data-locality scenario must differ only in data placement");
            let r = run_scenario(s).expect("scenario runs");
            for d in &r.metrics.deployments {
                runs += 1;
                if d.chosen_site.as_deref() == Some(resident) {
                    right += 1;
                }
            }
        }
    }
    outcome(runs > 0 && right == runs, format!("{right}/{runs} placements on the data-resident site"))
}

fn determinism(reports: &[(String, RunReport)], started: Instant) -> Outcome {
    let mut differing = Vec::new();
    for (n, first) in reports {
        let again = run_scenario(load(&examples_dir().join(n))).expect("scenario runs");
        if again.log_jsonl() != first.log_jsonl() || again.to_jsonl() != first.to_jsonl() {
            differing.push(n.clone());
        }
    }
    let took = started.elapsed();
    outcome(
        differing.is_empty() && took < SUITE_BUDGET,
        format!(
            "{} scenarios replayed, {} differ; suite {:.2} s (< {} s)",
            reports.len(),
            differing.len(),
            took.as_secs_f64(),
            SUITE_BUDGET.as_secs()
        ),
    )
}

fn main() -> ExitCode {
    let started = Instant::now();
    let shipped: Vec<(String, RunReport)> = shipped_scenarios()
        .iter()
        .map(|p| {
            let r = run_scenario(load(p)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            (name(p), r)
        })
        .collect();
    let mut random = Vec::new();

    let mut results = vec![
        ("ranker oracle equivalence", ranker_oracle()),
        ("preference dominance", preference_dominance()),
        ("preemption correctness", preemption_correctness()),
        ("fair-share convergence", fair_share()),
        ("conservation", conservation(&shipped)),
        ("elasticity liveness", elasticity_liveness()),
    ];
    let machine = state_machine(&mut random);
    results.push(("partition consistency", partition_consistency(&shipped, &random)));
    results.push(("state-machine legality and failover", machine));
    results.push(("data-locality placement", data_locality()));
    results.push(("determinism", determinism(&shipped, started)));

    let mut failed = 0;
    for (i, (title, o)) in results.iter().enumerate() {
        if !o.pass {
            failed += 1;
        }
        println!("{} {:>2} {title}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
