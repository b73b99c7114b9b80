//! Acceptance criteria 1-10. Each test prints one `criterion N: PASS|FAIL`
//! line straight to stderr so the verdicts show up even when the harness
//! captures output.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cosched::audit::audit_warm_cold;
use cosched::baselines::PolicyKind;
use cosched::control::{balance_and_admit, ControllerConfig, ControllerState, QueueEntry};
use cosched::engine::{Call, GpuModel, KvPool};
use cosched::experiment::{run_policy, RunResult, Workload};
use cosched::info_stream::{PressureConfig, Telemetry};
use cosched::log::to_jsonl;
use cosched::metrics::{compute_goodput, front_share, CompletionRecord, GoodputConfig};
use cosched::scheduler::{reclaim_for, try_fit, Candidate, MlfqConfig, VictimOrder};
use cosched::workload::{RoundSpec, SessionTrace};
use cosched::SimTime;

use common::{desk_config, goodput_oracle, try_fit_oracle, AimdReplay};

fn verdict(id: u32, passed: bool, detail: &str) {
    let line = format!(
        "criterion {id:>2}: {} | {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(passed, "criterion {id} failed: {detail}");
}

// ---------------------------------------------------------------- 1

fn random_records(rng: &mut ChaCha8Rng, dt: f64, horizon: f64) -> Vec<CompletionRecord> {
    let n = rng.random_range(0..120);
    (0..n)
        .map(|i| {
            let completion = match rng.random_range(0..6) {
                0 => rng.random_range(0..=(horizon / dt).ceil() as u64) as f64 * dt,
                1 => horizon,
                2 => horizon + rng.random_range(0.001..50.0),
                _ => rng.random_range(0.0..horizon),
            };
            let ideal = rng.random_range(0.5..40.0);
            let latency = match rng.random_range(0..4) {
                0 => 3.0 * ideal,
                1 => rng.random_range(ideal..3.0 * ideal),
                2 => rng.random_range(3.0 * ideal..6.0 * ideal),
                _ => ideal,
            };
            CompletionRecord {
                session_id: i,
                arrival_time: completion - latency,
                completion_time: completion,
                latency,
                ttft: vec![],
                ideal_time: Some(ideal),
                tau: Some(3.0 * ideal),
            }
        })
        .collect()
}

#[test]
fn criterion_01_goodput_matches_scan_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let dt = [1.0, 7.5, 10.0, 60.0, 0.1][rng.random_range(0..5)];
        let horizon = match rng.random_range(0..3) {
            0 => dt * rng.random_range(1..40) as f64,
            _ => rng.random_range(dt * 0.5..dt * 40.0),
        };
        let records = random_records(&mut rng, dt, horizon);
        let cfg = GoodputConfig {
            slo_slack_alpha: 3.0,
            window_s: dt,
        };
        let g = compute_goodput(&records, &cfg, horizon).unwrap();
        let (counts, total) = goodput_oracle(&records, 3.0, dt, horizon);
        let rates: Vec<f64> = counts.iter().map(|&c| c as f64 / dt).collect();
        if g.counts != counts || g.satisfied != total || g.rates != rates || g.aggregate != total as f64 / horizon {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        mismatches == 0 && elapsed < Duration::from_secs(10),
        &format!("1000 logs, {mismatches} mismatches, {:.2}s", elapsed.as_secs_f64()),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_aimd_matches_line_by_line_replay() {
    let cfg = ControllerConfig::default();
    let pressure = PressureConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let interval = (cfg.control_interval_s * 1e6) as u64;
    let traces = 100;
    let mut bad = Vec::new();
    for trace in 0..traces {
        let mut state = ControllerState::new(&cfg);
        let mut replay = AimdReplay::new(&cfg);
        let ema = rng.random_range(1.0..400.0);
        state.ema_blocks = Some(ema);
        let (mut floor, mut bind) = (0, [0usize; 3]);
        let mut now = 0u64;
        for step in 0..500 {
            now += [interval / 2, interval, interval, 3 * interval / 2][rng.random_range(0..4)];
            let mut t = Telemetry::new(20_000, 16, &pressure);
            t.active_sessions = rng.random_range(0..40);
            t.available_kv = rng.random_range(0..20_000);
            t.kv_usage_ratio = rng.random_range(0.0..1.0);
            t.queued_tools = rng.random_range(0..30);
            t.cpu_overloaded = rng.random_bool(0.3);
            t.kv_overloaded = rng.random_bool(0.2);
            match step {
                // Full intervals of overload drive the window onto its floor.
                0..=5 => {
                    now = (step as u64 + 1) * interval;
                    t.cpu_overloaded = true;
                }
                // Two growth steps, then each term of the clamp strictly
                // binding in turn.
                6..=8 => {
                    now = (step as u64 + 1) * interval;
                    t.cpu_overloaded = false;
                    t.kv_overloaded = false;
                    t.kv_usage_ratio = 0.1;
                    t.active_sessions = 0;
                    t.queued_tools = if step == 7 { 23 } else { 0 };
                    t.available_kv = if step == 8 { 0 } else { 20_000 };
                    state.ema_blocks = Some(if step == 8 { ema } else { 1.0 });
                }
                _ => {}
            }
            let ema_now = state.ema_blocks.unwrap();
            let mut queue: Vec<QueueEntry> = (0..rng.random_range(0..12))
                .map(|i| QueueEntry {
                    session_id: i,
                    req_blocks: rng.random_range(1..500),
                    is_long_session: false,
                    enqueue_time: SimTime(i),
                })
                .collect();
            let expect = replay.step(&t, now, ema_now, queue.len(), &cfg);
            let adm = balance_and_admit(&mut queue, &mut state, &t, SimTime(now), &cfg);
            if adm.decision.limit != expect.limit || adm.admitted.len() != expect.admitted || state.w_adm != replay.w {
                bad.push(format!(
                    "trace {trace} step {step}: limit {} vs {}, admitted {} vs {}, w {} vs {}",
                    adm.decision.limit,
                    expect.limit,
                    adm.admitted.len(),
                    expect.admitted,
                    state.w_adm,
                    replay.w
                ));
            }
            floor += expect.floor_hit as usize;
            bind[expect.binding] += 1;
        }
        if floor == 0 || bind.contains(&0) {
            bad.push(format!("trace {trace}: floor hits {floor}, binding counts {bind:?}"));
        }
    }
    verdict(
        2,
        bad.is_empty(),
        &format!(
            "{traces} traces x 500 steps, {} mismatches{}",
            bad.len(),
            bad.first().map(|b| format!(", first: {b}")).unwrap_or_default()
        ),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_kv_conservation_under_fuzz() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let total = 4096;
    let mut pool = KvPool::new(total, 16).unwrap();
    let mut violations = 0u64;
    let mut applied = 0u64;
    for _ in 0..100_000 {
        let sid = rng.random_range(0..64u64);
        match rng.random_range(0..5) {
            0 => {
                if pool.pinned_to(sid) == 0 && pool.allocate(sid, rng.random_range(1..200)).unwrap() {
                    applied += 1;
                }
            }
            1 => {
                if pool.free(sid) > 0 {
                    applied += 1;
                }
            }
            2 => {
                if pool.allocated_to(sid) > 0 {
                    pool.pin(sid).unwrap();
                    applied += 1;
                }
            }
            3 => {
                if pool.pinned_to(sid) > 0 {
                    pool.unpin(sid).unwrap();
                    applied += 1;
                }
            }
            _ => {
                let cand = |(&session, &blocks): (&u64, &u64)| Candidate {
                    session,
                    blocks,
                    level: (session % 4) as usize,
                    deadline: None,
                    rank: session as usize,
                };
                let pinned: Vec<Candidate> = pool.pinned().iter().map(cand).collect();
                let running: Vec<Candidate> = pool.allocated().iter().map(cand).collect();
                let need = rng.random_range(1..total);
                let order = if rng.random_bool(0.5) {
                    VictimOrder::PriorityAligned
                } else {
                    VictimOrder::EarliestDeadline
                };
                for e in reclaim_for(need, pool.free_blocks(), &pinned, &running, order, SimTime::ZERO) {
                    pool.free(e.session);
                    applied += 1;
                }
            }
        }
        let alloc: u64 = pool.allocated().values().sum();
        let pinned: u64 = pool.pinned().values().sum();
        if pool.free_blocks() + alloc + pinned != total || !pool.check_conservation() {
            violations += 1;
        }
    }
    verdict(
        3,
        violations == 0,
        &format!("100000 ops ({applied} state changes), {violations} violations"),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_try_fit_matches_descend_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = Vec::new();
    for case in 0..10_000 {
        let bs = [1, 4, 16, 32][rng.random_range(0..4)];
        let total = rng.random_range(1..600);
        let mut pool = KvPool::new(total, bs).unwrap();
        let held = rng.random_range(0..=total);
        let me = 1u64;
        if held > 0 {
            pool.allocate(me, held).unwrap();
        }
        let others = rng.random_range(0..=total - held);
        if others > 0 {
            pool.allocate(2, others).unwrap();
        }
        let mut call = Call::new(me, SimTime::ZERO, 1);
        call.kv_tokens = if held == 0 { 0 } else { rng.random_range((held - 1) * bs + 1..=held * bs) };
        let desired = rng.random_range(0..3000);
        let free = pool.free_blocks();
        let expect = try_fit_oracle(call.kv_tokens, held, free, bs, desired);
        let grant = try_fit(&call, desired, &mut pool).unwrap();
        let blocks_after = if grant == 0 {
            held
        } else {
            held.max((call.kv_tokens + grant).div_ceil(bs))
        };
        if grant != expect || pool.allocated_to(me) != blocks_after || !pool.check_conservation() {
            mismatches.push(format!(
                "case {case}: bs {bs} held {held} free {free} kv {} desired {desired}: got {grant}, oracle {expect}",
                call.kv_tokens
            ));
        }
    }
    verdict(
        4,
        mismatches.is_empty(),
        &format!(
            "10000 pool states, {} mismatches{}",
            mismatches.len(),
            mismatches.first().map(|m| format!(", first: {m}")).unwrap_or_default()
        ),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_light_call_not_starved() {
    let mut traces = Vec::new();
    for i in 0..150u64 {
        traces.push(SessionTrace {
            session_id: i,
            arrival_time: i as f64 * 2.0,
            rounds: vec![RoundSpec {
                new_prefill_tokens: 100_000,
                decode_tokens: 64,
                tool_duration: None,
            }],
        });
    }
    let light: Vec<u64> = vec![1000, 1001, 1002, 1003];
    for (k, &sid) in light.iter().enumerate() {
        traces.push(SessionTrace {
            session_id: sid,
            arrival_time: 20.0 + 60.0 * k as f64,
            rounds: vec![RoundSpec {
                new_prefill_tokens: 300,
                decode_tokens: 32,
                tool_duration: None,
            }],
        });
    }
    traces.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    let mut cfg = common::small_config(PolicyKind::Mars, 1, 1, 0.3);
    cfg.regime = None;
    cfg.engine.kv_demand_fraction = None;
    cfg.engine.total_blocks = Some(40_000);
    let workload = Workload::from_traces(&cfg, 1, traces).unwrap();
    let run = run_policy(&cfg, &workload).unwrap();
    let mlfq = MlfqConfig::default();
    let tick = GpuModel::default().tick_duration.as_secs_f64();
    let bound = mlfq.num_levels() as f64 * mlfq.promotion_wait.as_secs_f64() + tick;
    let mut worst: f64 = 0.0;
    for o in run.output.sessions.iter().filter(|o| light.contains(&o.session_id)) {
        worst = worst.max(o.completion_s - o.admitted_s);
    }
    let all_done = run.output.sessions.len() == 154;
    verdict(
        5,
        all_done && worst <= bound && run.audits_passed(),
        &format!("worst light call {worst:.3}s after admission, bound {bound:.3}s"),
    );
}

// ---------------------------------------------------------------- desk runs

struct DeskRuns {
    runs: BTreeMap<String, RunResult>,
    elapsed: Duration,
}

fn desk() -> &'static DeskRuns {
    static RUNS: OnceLock<DeskRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let start = Instant::now();
        let cfg = desk_config();
        let workload = Workload::prepare(&cfg, cfg.run_seeds()[0]).unwrap();
        let runs = cfg
            .expand()
            .unwrap()
            .iter()
            .map(|c| {
                let r = run_policy(c, &workload).unwrap();
                (r.summary.label.clone(), r)
            })
            .collect();
        DeskRuns {
            runs,
            elapsed: start.elapsed(),
        }
    })
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_warm_cold_accounting() {
    let desk = desk();
    let cfg = desk_config();
    let workload = Workload::prepare(&cfg, cfg.run_seeds()[0]).unwrap();
    let mut failures = Vec::new();
    let (mut warm, mut cold) = (0, 0);
    for (label, run) in &desk.runs {
        if let Err(e) = audit_warm_cold(&run.output.log, &workload.traces) {
            failures.push(format!("{label}: {e}"));
        }
        warm += run.summary.stats.warm_resumes;
        cold += run.summary.stats.cold_resumes;
    }
    for seed in 1..=4 {
        for (kind, ablation) in common::policy_grid() {
            let mut c = common::small_config(kind, 30, seed, 0.25);
            c.ablation = ablation;
            let w = Workload::prepare(&c, seed).unwrap();
            let run = run_policy(&c, &w).unwrap();
            if let Err(e) = audit_warm_cold(&run.output.log, &w.traces) {
                failures.push(format!("{} seed {seed}: {e}", run.summary.label));
            }
        }
    }
    verdict(
        6,
        failures.is_empty() && warm > 0 && cold > 0,
        &format!(
            "{} runs audited, {warm} warm / {cold} cold resumes, {} failures{}",
            desk.runs.len() + 36,
            failures.len(),
            failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
        ),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_byte_identical_logs() {
    let cfg = desk_config();
    let once = || {
        let w = Workload::prepare(&cfg, cfg.run_seeds()[0]).unwrap();
        let r = run_policy(&cfg, &w).unwrap();
        (
            to_jsonl(&r.output.log).unwrap(),
            to_jsonl(&r.output.decisions).unwrap(),
            to_jsonl(&r.output.snapshots).unwrap(),
        )
    };
    let (a, b) = (once(), once());
    verdict(
        7,
        a == b && !a.0.is_empty(),
        &format!("event log {} bytes, identical: {}", a.0.len(), a == b),
    );
}

// ---------------------------------------------------------------- 8-10

fn baseline_labels() -> [&'static str; 4] {
    ["fcfs", "program_priority", "static_ttl", "dynamic_ttl"]
}

#[test]
fn criterion_08_head_of_line_direction() {
    let desk = desk();
    let mars = &desk.runs["mars"].summary;
    let fcfs = &desk.runs["fcfs"].summary;
    let (best_label, best) = baseline_labels()
        .iter()
        .map(|l| (*l, desk.runs[*l].summary.goodput.aggregate))
        .fold(("", f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
    let latency_ratio = mars.latency.mean / fcfs.latency.mean;
    let goodput_ratio = mars.goodput.aggregate / best;
    let audits = desk.runs.values().all(|r| r.audits_passed());
    verdict(
        8,
        latency_ratio <= 0.8 && goodput_ratio >= 1.5 && audits && desk.elapsed < Duration::from_secs(300),
        &format!(
            "mars/fcfs mean latency {latency_ratio:.3} (<= 0.8), mars goodput / {best_label} {goodput_ratio:.3} (>= 1.5), \
             {} sessions, audits ok: {audits}, {:.1}s for {} runs",
            mars.sessions,
            desk.elapsed.as_secs_f64(),
            desk.runs.len()
        ),
    );
}

#[test]
fn criterion_09_eviction_shape() {
    let desk = desk();
    let share = |l: &str| front_share(&desk.runs[l].eviction, 0.3);
    let (mars, fcfs) = (share("mars"), share("fcfs"));
    verdict(
        9,
        mars >= 0.6 && fcfs < 0.5,
        &format!("evicted blocks in first 30% of progress: mars {mars:.3} (>= 0.6), fcfs {fcfs:.3} (< 0.5)"),
    );
}

#[test]
fn criterion_10_ablation_ordering() {
    let desk = desk();
    let full = desk.runs["mars"].summary.latency.mean;
    let ratios: Vec<(&str, f64)> = ["coordinator", "coscheduler", "control-plane"]
        .iter()
        .map(|m| (*m, desk.runs[&format!("mars/no-{m}")].summary.latency.mean / full))
        .collect();
    let all_worse = ratios.iter().all(|(_, r)| *r >= 1.0);
    let coordinator_largest = ratios.iter().all(|(_, r)| ratios[0].1 >= *r);
    let detail: Vec<String> = ratios.iter().map(|(m, r)| format!("no-{m} {r:.3}")).collect();
    verdict(
        10,
        all_worse && coordinator_largest,
        &format!(
            "mean latency over full mars: {} (all >= 1: {all_worse}, coordinator largest: {coordinator_largest})",
            detail.join(", ")
        ),
    );
}
