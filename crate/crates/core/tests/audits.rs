mod common;

use std::collections::BTreeMap;

use proptest::prelude::*;

use cosched::audit::{audit_budget, audit_warm_cold};
use cosched::baselines::PolicyKind;
use cosched::experiment::{run_policy, Workload};
use cosched::info_stream::{ema_update, record, PressureConfig, Signal, Telemetry};
use cosched::log::{EngineOp, LogBody, LogRecord};
use cosched::Error;

use common::{policy_grid, small_config};

fn tool_fifo(log: &[LogRecord]) -> Result<(), String> {
    let mut pending: Vec<u64> = Vec::new();
    for r in log {
        let (Some(sid), Some(sig)) = (r.session_id, r.signal()) else { continue };
        match sig {
            Signal::GpuEnd { final_round: false, .. } => pending.push(sid),
            Signal::ToolStart { .. } => {
                if pending.first() != Some(&sid) {
                    return Err(format!("tool of {sid} started at seq {} ahead of {:?}", r.seq, pending.first()));
                }
                pending.remove(0);
            }
            _ => {}
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn every_policy_passes_every_audit(seed in 0u64..10_000, fraction in 0.15f64..0.6) {
        let mut substrate = None;
        for (kind, ablation) in policy_grid() {
            let mut cfg = small_config(kind, 24, seed, fraction);
            cfg.ablation = ablation;
            let w = Workload::prepare(&cfg, seed).unwrap();
            let run = run_policy(&cfg, &w).unwrap();
            let label = run.summary.label.clone();
            prop_assert!(run.audits_passed(), "{label}: {:?}", run.first_failure());
            prop_assert_eq!(run.output.sessions.len(), 24);
            prop_assert!(run.records.iter().all(|r| r.latency + 1e-6 >= r.ideal_time.unwrap()));
            prop_assert!(tool_fifo(&run.output.log).is_ok(), "{label}: {:?}", tool_fifo(&run.output.log));
            let s = substrate.get_or_insert_with(|| run.summary.substrate_hash.clone());
            prop_assert_eq!(&*s, &run.summary.substrate_hash);
        }
    }
}

#[test]
fn corrupted_budget_aborts_with_invariant_and_seq() {
    let mut cfg = small_config(PolicyKind::Mars, 12, 3, 0.4);
    cfg.scheduler.max_batched_tokens = Some(2 * cfg.engine.token_budget_per_tick);
    let w = Workload::prepare(&cfg, 3).unwrap();
    match run_policy(&cfg, &w) {
        Err(Error::Invariant { invariant, seq, detail }) => {
            assert_eq!(invariant, "budget_compliance");
            assert!(seq > 0, "{detail}");
        }
        other => panic!("expected a budget violation, got {:?}", other.map(|r| r.summary.label)),
    }
}

#[test]
fn budget_audit_names_the_offending_record() {
    let cfg = small_config(PolicyKind::Fcfs, 12, 3, 0.4);
    let w = Workload::prepare(&cfg, 3).unwrap();
    let run = run_policy(&cfg, &w).unwrap();
    let log = &run.output.log;
    assert!(audit_budget(log, 512).is_ok());
    let first_big = log
        .iter()
        .find(|r| matches!(r.engine(), Some(EngineOp::Tick { prefill_tokens, decode_tokens, .. }) if prefill_tokens + decode_tokens > 100))
        .expect("a busy tick");
    match audit_budget(log, 100) {
        Err(Error::Invariant { invariant, seq, .. }) => {
            assert_eq!(invariant, "budget_compliance");
            assert_eq!(seq, first_big.seq);
        }
        other => panic!("{other:?}"),
    }
    let mut tampered = log.clone();
    let idx = tampered.iter().position(|r| r.seq == first_big.seq).unwrap();
    if let LogBody::Engine(EngineOp::Tick { prefill_tokens, .. }) = &mut tampered[idx].body {
        *prefill_tokens += 1;
    }
    assert!(matches!(audit_budget(&tampered, 512), Err(Error::Invariant { seq, .. }) if seq == first_big.seq));
}

#[test]
fn warm_flag_tampering_is_caught() {
    let cfg = small_config(PolicyKind::Mars, 30, 5, 0.5);
    let w = Workload::prepare(&cfg, 5).unwrap();
    let run = run_policy(&cfg, &w).unwrap();
    assert!(run.summary.stats.warm_resumes > 0);
    let mut log = run.output.log.clone();
    let idx = log
        .iter()
        .position(|r| matches!(r.signal(), Some(Signal::GpuSubmit { warm: true, .. })))
        .unwrap();
    let seq = log[idx].seq;
    if let LogBody::Signal(Signal::GpuSubmit { warm, .. }) = &mut log[idx].body {
        *warm = false;
    }
    match audit_warm_cold(&log, &w.traces) {
        Err(Error::Invariant { invariant, seq: at, .. }) => {
            assert_eq!(invariant, "warm_cold_accounting");
            assert!(at >= seq);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn telemetry_fold_matches_direct_counts() {
    let cfg = small_config(PolicyKind::Mars, 30, 8, 0.3);
    let w = Workload::prepare(&cfg, 8).unwrap();
    let run = run_policy(&cfg, &w).unwrap();
    let pc = PressureConfig::default();
    let mut t = Telemetry::new(run.summary.total_blocks, cfg.engine.worker_slots, &pc);
    let mut durations = Vec::new();
    let mut open: BTreeMap<u64, ()> = BTreeMap::new();
    let mut max_active = 0;
    for ev in run.output.log.iter().filter_map(|r| r.as_telemetry()) {
        record(&ev, &mut t, &pc).unwrap();
        match &ev.signal {
            Signal::GpuSubmit { cause, .. } if format!("{cause:?}") == "Admit" => {
                open.insert(ev.session_id.unwrap(), ());
            }
            Signal::GpuEnd { final_round: true, .. } => {
                open.remove(&ev.session_id.unwrap());
            }
            Signal::ToolEnd { duration_s } => durations.push(*duration_s),
            _ => {}
        }
        assert_eq!(t.active_sessions, open.len());
        max_active = max_active.max(open.len());
    }
    assert_eq!(t.active_sessions, 0);
    assert_eq!(t.active_tools, 0);
    assert!(max_active > 1);
    let mut ema = durations[0];
    for d in &durations[1..] {
        ema = ema_update(ema, *d, pc.ema_smoothing).unwrap();
    }
    assert_eq!(t.ema_tool_duration, ema);
    assert_eq!(t.tool_samples, durations.len() as u64);
}
