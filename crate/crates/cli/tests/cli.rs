use std::path::Path;
use std::process::{Command, Output};

fn railflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_railflow")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn gen_is_byte_identical_and_level_shaped() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    assert_eq!(code(&railflow(&["gen", "--level", "3", "--seed", "1", "--out", p(&a)])), 0);
    assert_eq!(code(&railflow(&["gen", "--level", "3", "--seed", "1", "--out", p(&b)])), 0);
    let (x, y) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(x, y);
    let sc: serde_json::Value = serde_json::from_slice(&x).unwrap();
    assert_eq!(sc["trains"].as_array().unwrap().len(), 50);
    assert_eq!(sc["grid"]["width"], 30);
    assert_eq!(sc["grid"]["height"], 35);
}

#[test]
fn run_then_replay_is_ok_and_tampering_diverges() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.jsonl");
    let o = railflow(&["run", "--level", "0", "--seed", "3", "--controller", "greedy", "--out", p(&t)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["n_trains"], 7);

    let o = railflow(&["replay", p(&t)]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("OK"));

    let text = std::fs::read_to_string(&t).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[3]).unwrap();
    let acts = rec["actions"].as_str().unwrap().to_string();
    let flipped: String = std::iter::once(if acts.starts_with('1') { '2' } else { '1' })
        .chain(acts.chars().skip(1))
        .collect();
    rec["actions"] = flipped.into();
    lines[3] = rec.to_string();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let o = railflow(&["replay", p(&bad)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("DIVERGED at tick 2"));

    let mut h: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    h["version"] = "railflow-trace-v0".into();
    lines[0] = h.to_string();
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let o = railflow(&["replay", p(&bad)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("version mismatch"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(code(&railflow(&["run"])), 2);
    assert_eq!(code(&railflow(&["run", "--level", "7"])), 2);
    assert_eq!(code(&railflow(&["run", "--level", "0", "--controller", "nope"])), 2);
    assert_eq!(code(&railflow(&["bench", "--seeds", "4..4"])), 2);
    assert_eq!(code(&railflow(&["frobnicate"])), 2);
}

#[test]
fn missing_scenario_file_is_a_domain_error() {
    assert_eq!(code(&railflow(&["run", "--scenario", "/nonexistent/s.json"])), 1);
}

#[test]
fn bench_writes_reports_per_controller() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    let o = railflow(&["bench", "--level", "0", "--controller", "pp,greedy", "--seeds", "0..2", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for c in ["pp", "greedy"] {
        for f in ["report.csv", "report.json", "concurrency.csv", "actions.csv"] {
            assert!(out.join(c).join(f).exists(), "{c}/{f}");
        }
    }
    let csv = std::fs::read_to_string(out.join("pp/report.csv")).unwrap();
    assert!(csv.contains("level0,pp,success_rate,1.000000"));
    let first = std::fs::read(out.join("greedy/report.json")).unwrap();
    railflow(&["bench", "--level", "0", "--controller", "pp,greedy", "--seeds", "0..2", "--out", p(&out)]);
    assert_eq!(first, std::fs::read(out.join("greedy/report.json")).unwrap());
}

#[test]
fn collect_reports_dropped_samples() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ds.jsonl");
    let o = railflow(&[
        "collect", "--level", "0", "--seeds", "0..2", "--controller", "greedy", "--filter-failed", "--out", p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(m["filter_failed"], true);
    assert!(m["dropped"].as_u64().is_some());
    assert!(dir.path().join("ds.manifest.json").exists());
    let n = std::fs::read_to_string(&out).unwrap().lines().count() as u64;
    assert_eq!(n, m["dispatch_samples"].as_u64().unwrap() + m["routing_samples"].as_u64().unwrap());
}
