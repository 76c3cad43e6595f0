use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn chaoskit(args: &[&str], store: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_chaoskit"));
    cmd.args(args).stdin(Stdio::null()).env_remove("CHAOS_STORE");
    if let Some(s) = store {
        cmd.env("CHAOS_STORE", s);
    }
    cmd.output().expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    let v: Value = serde_json::from_str(text.trim_end()).unwrap_or_else(|e| panic!("{e}: {text}"));
    // canonical: re-serialising the parsed value reproduces the bytes
    assert_eq!(serde_json::to_string(&v).unwrap(), text.trim_end());
    v
}

fn run_fixture(name: &str, store: &Path) -> (i32, Value) {
    let exp = fixture(&format!("{name}.json"));
    let topo = fixture("topology.json");
    let out = chaoskit(
        &["run", exp.to_str().unwrap(), "--driver", "sim", "--topology", topo.to_str().unwrap()],
        Some(store),
    );
    (out.status.code().unwrap(), stdout_json(&out))
}

#[test]
fn exit_codes_follow_status() {
    let dir = tempfile::tempdir().unwrap();
    for (name, code, status) in [
        ("held", 0, "hypothesis_held"),
        ("violated", 1, "hypothesis_violated"),
        ("aborted", 2, "aborted"),
        ("invalid", 3, "config_invalid"),
        ("driver-error", 4, "driver_failed"),
    ] {
        let (got, doc) = run_fixture(name, dir.path());
        assert_eq!(got, code, "{name}");
        assert_eq!(doc["status"], status);
        assert_eq!(doc["exit_code"], code);
    }
}

#[test]
fn run_writes_result_audit_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (code, doc) = run_fixture("held", dir.path());
    assert_eq!(code, 0);
    let id = doc["run_id"].as_str().unwrap();
    assert!(Path::new(doc["report"].as_str().unwrap()).exists());
    assert!(dir.path().join("runs").join(format!("{id}.json")).exists());
    let audit = dir.path().join("audit").join(format!("{id}.jsonl"));
    let out = chaoskit(&["audit", "verify", audit.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["head"], doc["audit_head"]);

    let md = chaoskit(&["report", id, "--format", "md"], Some(dir.path()));
    assert_eq!(md.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&md.stdout).contains("hypothesis_held"));
    let json = chaoskit(&["report", id, "--format", "json"], Some(dir.path()));
    assert_eq!(stdout_json(&json)["status"], "hypothesis_held");
}

#[test]
fn replay_reproduces_the_trace_digest() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["held", "violated", "aborted"] {
        let (_, doc) = run_fixture(name, dir.path());
        let out = chaoskit(&["replay", doc["run_id"].as_str().unwrap()], Some(dir.path()));
        assert_eq!(out.status.code(), Some(0), "{name}");
        let r = stdout_json(&out);
        assert_eq!(r["matches"], true);
        assert_eq!(r["replayed"], doc["trace_digest"]);
    }
}

#[test]
fn flipped_byte_is_reported_with_its_seq() {
    let dir = tempfile::tempdir().unwrap();
    let (_, doc) = run_fixture("aborted", dir.path());
    let id = doc["run_id"].as_str().unwrap();
    let audit = dir.path().join("audit").join(format!("{id}.jsonl"));
    let mut bytes = std::fs::read(&audit).unwrap();
    let third_line = bytes
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == b'\n')
        .nth(1)
        .map(|(i, _)| i + 1)
        .unwrap();
    let pos = bytes[third_line..].iter().position(|b| *b == b'"').unwrap() + third_line + 1;
    bytes[pos] ^= 0x01;
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, bytes).unwrap();
    let out = chaoskit(&["audit", "verify", bad.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(1));
    let v = stdout_json(&out);
    assert_eq!(v["status"], "tampered");
    assert!(v["first_bad_seq"].as_u64().unwrap() <= 2);
}

#[test]
fn usage_errors_exit_three_and_help_exits_zero() {
    assert_eq!(chaoskit(&["frobnicate"], None).status.code(), Some(3));
    assert_eq!(chaoskit(&["run"], None).status.code(), Some(3));
    let no_store = chaoskit(&["run", fixture("held.json").to_str().unwrap()], None);
    assert_eq!(no_store.status.code(), Some(3));
    assert!(!no_store.stderr.is_empty());
    let missing = chaoskit(&["validate", "/nonexistent/exp.json"], None);
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(chaoskit(&["--help"], None).status.code(), Some(0));
    assert_eq!(chaoskit(&["run", "--help"], None).status.code(), Some(0));
}

#[test]
fn validate_reports_findings() {
    let ok = chaoskit(&["validate", fixture("held.json").to_str().unwrap()], None);
    assert_eq!(ok.status.code(), Some(0));
    assert_eq!(stdout_json(&ok)["passed"], true);
    let bad = chaoskit(&["validate", fixture("invalid.json").to_str().unwrap()], None);
    assert_eq!(bad.status.code(), Some(3));
    assert_eq!(stdout_json(&bad)["passed"], false);
}

#[test]
fn catalog_new_feeds_validate() {
    let out = chaoskit(&["catalog", "list"], None);
    assert!(stdout_json(&out).as_array().unwrap().len() >= 6);
    let dir = tempfile::tempdir().unwrap();
    let exp = dir.path().join("exp.json");
    let out = chaoskit(
        &[
            "catalog",
            "new",
            "network-latency",
            "--param",
            "delay_us=50000",
            "--out",
            exp.to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(out.status.code(), Some(0));
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(&exp).unwrap()).unwrap();
    assert_eq!(doc["stages"][0]["fault"]["delay_us"], 50000);
    let v = chaoskit(&["validate", exp.to_str().unwrap(), "--driver", "proxy"], None);
    assert_eq!(v.status.code(), Some(0));
    let bad = chaoskit(&["catalog", "new", "packet-loss", "--param", "loss_bp=20000"], None);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("loss_bp"));
}

#[test]
fn backlog_is_ranked() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join(".backlog.json");
    std::fs::write(
        &file,
        r#"[{"id":"B","component":"cache","impact":3,"likelihood":2},
            {"id":"A","component":"db","impact":5,"likelihood":5}]"#,
    )
    .unwrap();
    let out = chaoskit(&["backlog", "prioritize", file.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v[0]["entry"]["id"], "A");
    assert_eq!(v[0]["score"], 25);
}

#[test]
fn maturity_reads_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let empty = chaoskit(&["maturity"], Some(dir.path()));
    assert_eq!(stdout_json(&empty)["phase"], "Discovery");
    run_fixture("held", dir.path());
    let v = stdout_json(&chaoskit(&["maturity", "--store", dir.path().to_str().unwrap()], None));
    assert_eq!(v["sophistication_level"], 2);
    assert_eq!(v["phase"], "Implementation");
}

#[test]
fn standalone_sim_writes_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let out_path = dir.path().join("trace.jsonl");
    let topo = fixture("topology.json");
    let args = [
        "sim",
        "run",
        "--topology",
        topo.to_str().unwrap(),
        "--duration-ms",
        "2000",
        "--seed",
        "7",
        "--out",
        out_path.to_str().unwrap(),
    ];
    let a = stdout_json(&chaoskit(&args, None));
    let b = stdout_json(&chaoskit(&args, None));
    assert_eq!(a["digest"], b["digest"]);
    let lines = std::fs::read_to_string(&out_path).unwrap();
    assert_eq!(lines.lines().count() as u64, a["events"].as_u64().unwrap());
}
