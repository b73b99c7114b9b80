use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const BASE: &str = r#"
name = "tiny"
seeds = [4]

[regime]
mean_prompt_volume = 3000.0
prompt_volume_range = [200, 12000]
rounds_range = [1, 4]
arrival_rate = 1.0
request_count = 10
seed = 4

[engine]
kv_demand_fraction = 0.4
worker_slots = 8

[policy]
kind = "mars"
"#;

fn cosched(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cosched"))
        .args(args)
        .env("COSCHED_OUT", out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<csv::StringRecord>) {
    let first = std::fs::read_to_string(path).unwrap();
    assert!(first.starts_with("# config_hash="), "{}", path.display());
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).unwrap();
    let headers = rd.headers().unwrap().iter().map(String::from).collect();
    (headers, rd.records().map(|r| r.unwrap()).collect())
}

fn col(headers: &[String], name: &str) -> usize {
    headers.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn generate_is_reproducible_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let a = cosched(&["generate", "--config", cfg], &out);
    assert!(a.status.success(), "{}", stderr(&a));
    let trace = out.join("tiny/trace-seed-4.jsonl");
    let first = sha(&trace);
    let header = std::fs::read_to_string(&trace).unwrap();
    assert!(header.lines().next().unwrap().contains("config_hash"));
    let b = cosched(&["generate", "--config", cfg], &out);
    assert!(b.status.success());
    assert_eq!(first, sha(&trace));

    let broken = write_config(dir.path(), "broken.toml", &BASE.replace("[regime]", "[regimes]"));
    let c = cosched(&["generate", "--config", broken.to_str().unwrap()], &out);
    assert!(!c.status.success());
    assert!(stderr(&c).contains("regime"), "{}", stderr(&c));
}

#[test]
fn run_emits_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let cfg = cfg.to_str().unwrap();
    let (o1, o2) = (dir.path().join("a"), dir.path().join("b"));
    for o in [&o1, &o2] {
        let r = cosched(&["run", "--config", cfg], o);
        assert!(r.status.success(), "{}", stderr(&r));
    }
    let run = o1.join("tiny/rate-1/mars/seed-4");
    for f in [
        "events.jsonl",
        "decisions.jsonl",
        "telemetry.jsonl",
        "completions.csv",
        "metrics.csv",
        "ttft_per_round.csv",
        "eviction_series.csv",
        "goodput.csv",
        "audits.csv",
        "summary.json",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let events = std::fs::read_to_string(run.join("events.jsonl")).unwrap();
    assert!(events.lines().next().unwrap().contains("config_hash"));
    let (h, rows) = read_csv(&run.join("completions.csv"));
    assert_eq!(rows.len(), 10);
    assert!(h.contains(&"tau_s".to_string()));
    let (h, rows) = read_csv(&run.join("audits.csv"));
    assert!(rows.iter().all(|r| &r[col(&h, "passed")] == "true"));
    assert_eq!(
        sha(&run.join("events.jsonl")),
        sha(&o2.join("tiny/rate-1/mars/seed-4/events.jsonl"))
    );
}

#[test]
fn run_overrides_policy_seed_and_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let out = dir.path().join("o");
    let r = cosched(
        &["run", "--config", cfg.to_str().unwrap(), "--seed", "9", "--ablate", "coordinator"],
        &out,
    );
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(out.join("tiny/rate-1/mars+no-coordinator/seed-9/summary.json").is_file());
    let r = cosched(&["run", "--config", cfg.to_str().unwrap(), "--policy", "static_ttl"], &out);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(out.join("tiny/rate-1/static_ttl/seed-4/summary.json").is_file());
    let r = cosched(&["run", "--config", cfg.to_str().unwrap(), "--ablate", "turbo"], &out);
    assert!(!r.status.success());
}

#[test]
fn corrupted_budget_fails_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{BASE}\n[scheduler]\nmax_batched_tokens = 4096\n");
    let cfg = write_config(dir.path(), "c.toml", &text);
    let r = cosched(&["run", "--config", cfg.to_str().unwrap()], &dir.path().join("o"));
    assert!(!r.status.success());
    let err = stderr(&r);
    assert!(err.contains("budget_compliance") && err.contains("seq"), "{err}");
}

#[test]
fn compare_computes_ratios_and_refuses_mismatched_substrates() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", BASE);
    let out = dir.path().join("o");
    for p in ["mars", "fcfs"] {
        let r = cosched(&["run", "--config", cfg.to_str().unwrap(), "--policy", p], &out);
        assert!(r.status.success(), "{}", stderr(&r));
    }
    let cmp = dir.path().join("cmp");
    let r = cosched(&["compare", out.to_str().unwrap(), "--out", cmp.to_str().unwrap()], &out);
    assert!(r.status.success(), "{}", stderr(&r));
    let (h, rows) = read_csv(&cmp.join("comparison.csv"));
    assert_eq!(rows.len(), 2);
    let mean = |p: &str| -> f64 {
        let s: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out.join(format!("tiny/rate-1/{p}/seed-4/summary.json"))).unwrap(),
        )
        .unwrap();
        s["latency"]["mean"].as_f64().unwrap()
    };
    let mars = rows.iter().find(|r| &r[col(&h, "policy")] == "mars").unwrap();
    let speedup: f64 = mars[col(&h, "latency_speedup")].parse().unwrap();
    assert_eq!(&mars[col(&h, "best_latency_baseline")], "fcfs");
    assert_eq!(speedup, mean("fcfs") / mean("mars"));

    let other = write_config(dir.path(), "d.toml", &BASE.replace("worker_slots = 8", "worker_slots = 4"));
    let r = cosched(&["run", "--config", other.to_str().unwrap(), "--policy", "fcfs"], &dir.path().join("x"));
    assert!(r.status.success());
    std::fs::rename(
        dir.path().join("x/tiny/rate-1/fcfs"),
        out.join("tiny/rate-1/fcfs-other"),
    )
    .unwrap();
    let other_summary = out.join("tiny/rate-1/fcfs-other/seed-4/summary.json");
    let text = std::fs::read_to_string(&other_summary).unwrap().replace("\"label\": \"fcfs\"", "\"label\": \"fcfs-4\"");
    std::fs::write(&other_summary, text).unwrap();
    let r = cosched(&["compare", out.to_str().unwrap(), "--out", cmp.to_str().unwrap()], &out);
    assert!(!r.status.success());
    assert!(stderr(&r).contains("differ in trace or engine"), "{}", stderr(&r));
}

#[test]
fn sweep_table_matches_manual_assembly() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{BASE}\n[sweep]\narrival_rates = [0.5, 1.0, 2.0]\n");
    let cfg = write_config(dir.path(), "s.toml", &text);
    let out = dir.path().join("o");
    let r = cosched(&["compare", "--config", cfg.to_str().unwrap()], &out);
    assert!(r.status.success(), "{}", stderr(&r));
    let (h, rows) = read_csv(&out.join("comparison.csv"));
    assert_eq!(rows.len(), 15);
    for row in &rows {
        let rate: f64 = row[col(&h, "arrival_rate")].parse().unwrap();
        let policy = &row[col(&h, "policy")];
        let s: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out.join(format!("tiny/rate-{rate}/{policy}/seed-4/summary.json"))).unwrap(),
        )
        .unwrap();
        let mean: f64 = row[col(&h, "latency_mean_s")].parse().unwrap();
        assert_eq!(mean, s["latency"]["mean"].as_f64().unwrap());
        let best = &row[col(&h, "best_latency_baseline")];
        let b: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(out.join(format!("tiny/rate-{rate}/{best}/seed-4/summary.json"))).unwrap(),
        )
        .unwrap();
        let speedup: f64 = row[col(&h, "latency_speedup")].parse().unwrap();
        assert_eq!(speedup, b["latency"]["mean"].as_f64().unwrap() / mean);
    }

    let report = dir.path().join("r");
    let r = cosched(&["report", out.to_str().unwrap(), "--out", report.to_str().unwrap()], &out);
    assert!(r.status.success(), "{}", stderr(&r));
    let (h, rows) = read_csv(&report.join("report/metrics.csv"));
    assert!(h.contains(&"metric".to_string()));
    let mean_rows = rows
        .iter()
        .filter(|r| &r[col(&h, "metric")] == "latency_s" && &r[col(&h, "stat")] == "mean")
        .count();
    assert_eq!(mean_rows, 15);
    let (h, rows) = read_csv(&report.join("report/eviction_series.csv"));
    assert_eq!(rows.len(), 15 * 20);
    assert!(h.contains(&"policy".to_string()));
}
