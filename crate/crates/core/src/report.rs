//! On-disk artifacts of a run and cross-run comparison tables.
//!
//! Every CSV starts with a `# config_hash=<hex> substrate_hash=<hex>` line;
//! readers skip `#` lines.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiment::{RunResult, RunSummary};
use crate::log::write_jsonl;

pub const SUMMARY_FILE: &str = "summary.json";
pub const EVENTS_FILE: &str = "events.jsonl";

fn csv_writer(path: &Path, stamp: &str) -> Result<csv::Writer<fs::File>> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "# {stamp}").map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn stamp(s: &RunSummary) -> String {
    format!("config_hash={} substrate_hash={}", s.config_hash, s.substrate_hash)
}

fn finish(w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

/// Rows of the long-format metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub experiment: String,
    pub arrival_rate: Option<f64>,
    pub policy: String,
    pub seed: u64,
    pub metric: String,
    pub stat: String,
    pub value: f64,
}

pub fn metric_rows(s: &RunSummary) -> Vec<MetricRow> {
    let row = |metric: &str, stat: &str, value: f64| MetricRow {
        experiment: s.experiment.clone(),
        arrival_rate: s.arrival_rate,
        policy: s.label.clone(),
        seed: s.seed,
        metric: metric.into(),
        stat: stat.into(),
        value,
    };
    let l = &s.latency;
    vec![
        row("latency_s", "mean", l.mean),
        row("latency_s", "p50", l.p50),
        row("latency_s", "p90", l.p90),
        row("latency_s", "p95", l.p95),
        row("latency_s", "p99", l.p99),
        row("goodput_rps", "aggregate", s.goodput.aggregate),
        row("goodput_rps", "satisfied", s.goodput.satisfied as f64),
        row("makespan_s", "value", s.makespan_s),
        row("eviction", "front_share_30", s.eviction_front_share),
        row("resumes", "warm", s.stats.warm_resumes as f64),
        row("resumes", "cold", s.stats.cold_resumes as f64),
        row("preemptions", "count", s.stats.preemptions as f64),
    ]
}

/// Writes every artifact of one run into `dir`.
pub fn write_run(dir: &Path, run: &RunResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let s = &run.summary;
    let st = stamp(s);
    let header = serde_json::json!({
        "config_hash": s.config_hash,
        "substrate_hash": s.substrate_hash,
        "trace_hash": s.trace_hash,
        "policy": s.label,
        "seed": s.seed,
    });
    write_jsonl(&dir.join(EVENTS_FILE), Some(&header), &run.output.log)?;
    write_jsonl(&dir.join("decisions.jsonl"), Some(&header), &run.output.decisions)?;
    write_jsonl(&dir.join("telemetry.jsonl"), Some(&header), &run.output.snapshots)?;

    let path = dir.join("completions.csv");
    let mut w = csv_writer(&path, &st)?;
    w.write_record(["session_id", "arrival_s", "completion_s", "latency_s", "ideal_s", "tau_s", "slo_met", "ttft_s"])?;
    for r in &run.records {
        let ideal = r.ideal_time.unwrap_or(f64::NAN);
        let tau = r.tau.unwrap_or(f64::NAN);
        let ttft: Vec<String> = r.ttft.iter().map(|x| format!("{x}")).collect();
        w.write_record([
            r.session_id.to_string(),
            r.arrival_time.to_string(),
            r.completion_time.to_string(),
            r.latency.to_string(),
            ideal.to_string(),
            tau.to_string(),
            (r.latency <= tau).to_string(),
            ttft.join(";"),
        ])?;
    }
    finish(w, &path)?;

    let path = dir.join("metrics.csv");
    let mut w = csv_writer(&path, &st)?;
    for row in metric_rows(s) {
        w.serialize(row)?;
    }
    finish(w, &path)?;

    let path = dir.join("goodput.csv");
    let mut w = csv_writer(&path, &st)?;
    w.write_record(["window", "start_s", "end_s", "satisfied", "rate_rps"])?;
    let g = &s.goodput;
    for (k, (&c, &r)) in g.counts.iter().zip(&g.rates).enumerate() {
        w.write_record([
            k.to_string(),
            (k as f64 * g.window_s).to_string(),
            ((k + 1) as f64 * g.window_s).to_string(),
            c.to_string(),
            r.to_string(),
        ])?;
    }
    finish(w, &path)?;

    let path = dir.join("ttft_per_round.csv");
    let mut w = csv_writer(&path, &st)?;
    w.write_record(["round", "count", "mean_s", "p50_s", "p90_s", "p99_s"])?;
    for r in &run.ttft.per_round {
        let m = &r.summary;
        w.write_record([
            r.round.to_string(),
            m.count.to_string(),
            m.mean.to_string(),
            m.p50.to_string(),
            m.p90.to_string(),
            m.p99.to_string(),
        ])?;
    }
    finish(w, &path)?;

    let path = dir.join("eviction_series.csv");
    let mut w = csv_writer(&path, &st)?;
    w.write_record(["bin", "progress_lo", "progress_hi", "evicted_blocks"])?;
    let n = run.eviction.len() as f64;
    for (k, b) in run.eviction.iter().enumerate() {
        w.write_record([
            k.to_string(),
            (k as f64 / n).to_string(),
            ((k + 1) as f64 / n).to_string(),
            b.to_string(),
        ])?;
    }
    finish(w, &path)?;

    let path = dir.join("audits.csv");
    let mut w = csv_writer(&path, &st)?;
    w.write_record(["audit", "passed", "detail"])?;
    for a in &run.audits {
        w.write_record([a.name, if a.passed { "true" } else { "false" }, a.detail.as_str()])?;
    }
    finish(w, &path)?;

    let path = dir.join(SUMMARY_FILE);
    let text = serde_json::to_string_pretty(s)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// The subset of a summary needed to compare runs.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct StoredSummary {
    pub label: String,
    pub experiment: String,
    pub arrival_rate: Option<f64>,
    pub seed: u64,
    pub config_hash: String,
    pub substrate_hash: String,
    pub trace_hash: String,
    pub latency: StoredLatency,
    pub goodput: StoredGoodput,
    pub audits_passed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct StoredLatency {
    pub mean: f64,
    pub p90: f64,
    pub p95: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
pub struct StoredGoodput {
    pub aggregate: f64,
}

pub fn read_summary(dir: &Path) -> Result<StoredSummary> {
    let path = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Run directories below `root`: `root` itself if it holds a summary,
/// else every descendant that does.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        if d.join(SUMMARY_FILE).is_file() {
            out.push(d);
            continue;
        }
        let entries = fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
        for e in entries {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub experiment: String,
    pub arrival_rate: Option<f64>,
    pub seed: u64,
    pub policy: String,
    pub latency_mean_s: f64,
    pub latency_p95_s: f64,
    pub goodput_rps: f64,
    pub best_latency_baseline: String,
    /// Best baseline mean latency over this policy's; above 1 is a speedup.
    pub latency_speedup: f64,
    pub p95_speedup: f64,
    pub best_goodput_baseline: String,
    /// This policy's goodput over the best baseline's.
    pub goodput_ratio: f64,
}

fn is_baseline(label: &str) -> bool {
    !label.starts_with("mars")
}

fn rate_key(r: Option<f64>) -> String {
    r.map(|x| format!("{x}")).unwrap_or_default()
}

/// One row per run with ratios against the best baseline of its group
/// (experiment, arrival rate, seed). Every run of a group must share the
/// substrate hash.
pub fn compare(runs: &[StoredSummary]) -> Result<Vec<ComparisonRow>> {
    if runs.len() < 2 {
        return Err(Error::Incompatible(format!("need at least 2 runs, got {}", runs.len())));
    }
    let mut groups: BTreeMap<(String, String, u64), Vec<&StoredSummary>> = BTreeMap::new();
    for r in runs {
        groups
            .entry((r.experiment.clone(), rate_key(r.arrival_rate), r.seed))
            .or_default()
            .push(r);
    }
    let mut rows = Vec::new();
    for ((experiment, rate, seed), members) in groups {
        let mut substrates: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for r in &members {
            substrates.entry(r.substrate_hash.as_str()).or_default().push(r.label.as_str());
        }
        if substrates.len() > 1 {
            let diff: Vec<String> = substrates
                .iter()
                .map(|(h, labels)| format!("{} <- [{}]", &h[..h.len().min(12)], labels.join(", ")))
                .collect();
            return Err(Error::Incompatible(format!(
                "runs of `{experiment}` rate {rate} seed {seed} differ in trace or engine: {}",
                diff.join("; ")
            )));
        }
        let baselines: Vec<&StoredSummary> = members.iter().copied().filter(|r| is_baseline(&r.label)).collect();
        let Some(first) = baselines.first() else {
            return Err(Error::Incompatible(format!(
                "`{experiment}` rate {rate} seed {seed} has no baseline run"
            )));
        };
        let fastest = baselines
            .iter()
            .fold(*first, |b, r| if r.latency.mean < b.latency.mean { r } else { b });
        let fastest_p95 = baselines.iter().map(|r| r.latency.p95).fold(f64::INFINITY, f64::min);
        let best_goodput = baselines
            .iter()
            .fold(*first, |b, r| if r.goodput.aggregate > b.goodput.aggregate { r } else { b });
        for r in &members {
            rows.push(ComparisonRow {
                experiment: experiment.clone(),
                arrival_rate: r.arrival_rate,
                seed,
                policy: r.label.clone(),
                latency_mean_s: r.latency.mean,
                latency_p95_s: r.latency.p95,
                goodput_rps: r.goodput.aggregate,
                best_latency_baseline: fastest.label.clone(),
                latency_speedup: fastest.latency.mean / r.latency.mean,
                p95_speedup: fastest_p95 / r.latency.p95,
                best_goodput_baseline: best_goodput.label.clone(),
                goodput_ratio: r.goodput.aggregate / best_goodput.goodput.aggregate,
            });
        }
    }
    Ok(rows)
}

pub fn write_comparison(path: &Path, runs: &[StoredSummary], rows: &[ComparisonRow]) -> Result<()> {
    let mut hashes: Vec<&str> = runs.iter().map(|r| r.config_hash.as_str()).collect();
    hashes.dedup();
    let mut subs: Vec<&str> = runs.iter().map(|r| r.substrate_hash.as_str()).collect();
    subs.sort();
    subs.dedup();
    let mut w = csv_writer(path, &format!("config_hash={} substrate_hash={}", hashes.join(","), subs.join(",")))?;
    for r in rows {
        w.serialize(r)?;
    }
    finish(w, path)
}

/// Concatenates the per-run tables of several runs into one long table per
/// kind, adding the run label.
pub fn write_report(out: &Path, run_dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let summaries: Vec<StoredSummary> = run_dirs.iter().map(|d| read_summary(d)).collect::<Result<_>>()?;
    let mut hashes: Vec<&str> = summaries.iter().map(|s| s.config_hash.as_str()).collect();
    hashes.sort();
    hashes.dedup();
    let st = format!("config_hash={}", hashes.join(","));
    let mut written = Vec::new();
    for table in ["metrics.csv", "ttft_per_round.csv", "eviction_series.csv", "goodput.csv"] {
        let path = out.join(table);
        let mut w = csv_writer(&path, &st)?;
        let mut wrote_header = false;
        for (dir, s) in run_dirs.iter().zip(&summaries) {
            let src = dir.join(table);
            let mut rd = csv::ReaderBuilder::new()
                .comment(Some(b'#'))
                .from_path(&src)?;
            let headers = rd.headers()?.clone();
            let prefixed = table != "metrics.csv";
            if !wrote_header {
                if prefixed {
                    let mut h = vec!["experiment", "arrival_rate", "policy", "seed"];
                    h.extend(headers.iter());
                    w.write_record(&h)?;
                } else {
                    w.write_record(&headers)?;
                }
                wrote_header = true;
            }
            for rec in rd.records() {
                let rec = rec?;
                if prefixed {
                    let rate = s.arrival_rate.map(|x| x.to_string()).unwrap_or_default();
                    let seed = s.seed.to_string();
                    let mut row = vec![s.experiment.as_str(), rate.as_str(), s.label.as_str(), seed.as_str()];
                    row.extend(rec.iter());
                    w.write_record(&row)?;
                } else {
                    w.write_record(&rec)?;
                }
            }
        }
        finish(w, &path)?;
        written.push(path);
    }
    Ok(written)
}
