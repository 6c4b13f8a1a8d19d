use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn examples() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/examples")
}

fn fedorch(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedorch"))
        .args(args)
        .current_dir(dir)
        .env_remove("ORCH_CONFIG")
        .env_remove("ORCH_USER")
        .env_remove("ORCH_WORLD")
        .env_remove("ORCH_STATE")
        .output()
        .unwrap()
}

fn lines(o: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&o.stdout).lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn ex(name: &str) -> String {
    examples().join(name).display().to_string()
}

#[test]
fn validate_shipped_templates() {
    let dir = tempfile::tempdir().unwrap();
    for t in ["elastic-cluster.tpl", "repository.tpl"] {
        let o = fedorch(dir.path(), &["--machine", "validate", &ex(t)]);
        assert_eq!(o.status.code(), Some(0), "{t}");
        assert_eq!(lines(&o)[0]["violations"], Value::Array(vec![]));
    }
}

#[test]
fn invalid_template_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.tpl");
    std::fs::write(
        &p,
        "tosca_version: indigo_subset_1\nnodes:\n  a:\n    kind: Compute\n    resources: { cpus: 1, mem_mb: 1, disk_gb: 1 }\n    bid: 0.5\n",
    )
    .unwrap();
    let o = fedorch(dir.path(), &["--machine", "validate", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let recs = lines(&o);
    assert_eq!(recs[0]["violations"][0]["violation"], "BidWithoutPreemptible");
    assert_eq!(recs[1]["error"], "TemplateInvalid");
}

#[test]
fn rank_matches_a_hand_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("snap.txt");
    std::fs::write(
        &snap,
        "providers:\n  \
           x: { sla_rank: 0.2, availability: 0.90, latency_ms: 50, data_locality: 1 }\n  \
           y: { sla_rank: 0.8, availability: 0.99, latency_ms: 10, data_locality: 0 }\n  \
           z: { sla_rank: 0.5, availability: 0.95, latency_ms: 30, data_locality: 0.5 }\n",
    )
    .unwrap();
    let cfg = dir.path().join("w.cfg");
    std::fs::write(&cfg, "w_sla = 1\nw_avail = 2\nw_lat = 1\nw_data = 3\n").unwrap();
    let o = fedorch(
        dir.path(),
        &["--machine", "rank", "--config", cfg.to_str().unwrap(), "--snapshot", snap.to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    // sla norm: x 0, y 1, z 0.5; latency norm: x 1, y 0, z 0.5
    let oracle: [(&str, f64); 3] =
        [("x", 0.0 + 2.0 * 0.90 + 0.0 + 3.0), ("y", 1.0 + 2.0 * 0.99 + 1.0 + 0.0), ("z", 0.5 + 2.0 * 0.95 + 0.5 + 1.5)];
    let mut expected = oracle.to_vec();
    expected.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    let got = lines(&o);
    assert_eq!(got.len(), 3);
    for (rec, (id, score)) in got.iter().zip(&expected) {
        assert_eq!(rec["provider"], *id);
        assert!((rec["score"].as_f64().unwrap() - score).abs() < 1e-12);
    }
}

#[test]
fn rank_puts_preferences_first() {
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("snap.txt");
    std::fs::write(
        &snap,
        "providers:\n  a: { sla_rank: 1, availability: 1, latency_ms: 1 }\n  b: { sla_rank: 0, availability: 0, latency_ms: 9 }\nprefs: [b]\n",
    )
    .unwrap();
    let o = fedorch(dir.path(), &["--machine", "rank", "--snapshot", snap.to_str().unwrap()]);
    let got = lines(&o);
    assert_eq!(got[0]["provider"], "b");
    assert_eq!(got[0]["preferred"], true);
}

#[test]
fn deployment_lifecycle_through_the_journal() {
    let dir = tempfile::tempdir().unwrap();
    let world = ex("repository.scn");
    let base = ["--machine", "--world", world.as_str()];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = base.iter().chain(extra).copied().collect();
        fedorch(dir.path(), &args)
    };

    let o = run(&["depcreate", &ex("repository.tpl"), "--user", "carol"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rec = &lines(&o)[0];
    assert_eq!(rec["state"], "CREATE_COMPLETE");
    assert_eq!(rec["chosen_site"], "site-a");
    let uuid = rec["uuid"].as_str().unwrap().to_owned();

    let o = run(&["depcreate", &ex("vm2.tpl"), "--user", "dave", "--prefs", "site-b"]);
    assert_eq!(lines(&o)[0]["chosen_site"], "site-b");

    let o = run(&["deplist", "--user", "carol"]);
    assert_eq!(lines(&o).len(), 1);

    let o = run(&["depdel", &uuid, "--user", "dave"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(lines(&o)[0]["error"], "AuthError");

    let o = run(&["depdel", &uuid, "--user", "carol"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(lines(&o)[0]["state"], "DELETED");

    let o = run(&["depshow", &uuid]);
    assert_eq!(lines(&o)[0]["state"], "DELETED");
    assert_eq!(lines(&o)[0]["attempts"][0], "site-a:ok");
}

#[test]
fn unknown_uuid_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let world = ex("repository.scn");
    let o = fedorch(dir.path(), &["--machine", "--world", &world, "depshow", "6f1c2a9e-0000-4000-8000-000000000000"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(lines(&o)[0]["error"], "NotFound");
}

#[test]
fn usage_errors_exit_two_and_name_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = fedorch(dir.path(), &["deplist", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--frobnicate"));

    let o = fedorch(dir.path(), &["deplist"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--world"));

    let o = fedorch(dir.path(), &["rank"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--snapshot"));
}

#[test]
fn sim_run_writes_a_verifiable_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("out.jsonl");
    let o = fedorch(dir.path(), &["sim", "run", &ex("single-job.scn"), "--report", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("site-a") && text.contains("0.5000"), "{text}");

    let o = fedorch(dir.path(), &["--machine", "sim", "verify", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(lines(&o)[0]["verified"], true);

    let tampered = std::fs::read_to_string(&report).unwrap().replace("\"cpu_seconds\":20", "\"cpu_seconds\":21");
    std::fs::write(&report, tampered).unwrap();
    let o = fedorch(dir.path(), &["--machine", "sim", "verify", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(lines(&o)[0]["error"], "VerificationFailed");
}

#[test]
fn machine_sim_output_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let a = fedorch(dir.path(), &["--machine", "sim", "run", &ex("failover.scn")]);
    let b = fedorch(dir.path(), &["--machine", "sim", "run", &ex("failover.scn")]);
    assert_eq!(a.status.code(), Some(0));
    assert_eq!(a.stdout, b.stdout);
}
