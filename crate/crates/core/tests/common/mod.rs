#![allow(dead_code)]

use std::path::PathBuf;

use cosched::baselines::{Ablation, PolicyKind};
use cosched::config::ExperimentConfig;
use cosched::control::ControllerConfig;
use cosched::info_stream::Telemetry;
use cosched::metrics::CompletionRecord;
use cosched::workload::{RegimeConfig, ToolDurationDist};

pub fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

pub fn desk_config() -> ExperimentConfig {
    ExperimentConfig::load(&repo_path("configs/desk.toml")).expect("desk config")
}

pub fn regime(n: usize, seed: u64, rate: f64, mean: f64) -> RegimeConfig {
    RegimeConfig {
        mean_prompt_volume: mean,
        prompt_volume_range: [200, 20_000],
        rounds_range: [1, 4],
        tool_duration: ToolDurationDist::default(),
        arrival_rate: rate,
        request_count: n,
        seed,
        decode_tokens_range: [8, 64],
        first_round_fraction: 0.6,
        context_limit: 262_144,
    }
}

/// A small config for `kind` on a generated workload.
pub fn small_config(kind: PolicyKind, n: usize, seed: u64, fraction: f64) -> ExperimentConfig {
    let text = format!(
        r#"
        name = "small"
        [regime]
        mean_prompt_volume = 3000.0
        prompt_volume_range = [200, 20000]
        rounds_range = [1, 4]
        arrival_rate = 2.0
        request_count = {n}
        seed = {seed}
        decode_tokens_range = [8, 64]
        [engine]
        kv_demand_fraction = {fraction}
        worker_slots = 8
        [policy]
        kind = "mars"
        "#
    );
    let mut cfg = ExperimentConfig::from_toml_str(&text).expect("small config");
    cfg.policy = kind;
    cfg
}

/// Every baseline, the full policy and its single-mechanism ablations.
pub fn policy_grid() -> Vec<(PolicyKind, Ablation)> {
    let mut out: Vec<(PolicyKind, Ablation)> =
        PolicyKind::all_defaults().into_iter().map(|k| (k, Ablation::default())).collect();
    for m in ["coordinator", "coscheduler", "retention", "control-plane"] {
        let mut a = Ablation::default();
        a.disable(m).unwrap();
        out.push((PolicyKind::Mars, a));
    }
    out
}

/// Windowed goodput by a scan over every (window, record) pair.
pub fn goodput_oracle(records: &[CompletionRecord], alpha: f64, dt: f64, horizon: f64) -> (Vec<u64>, u64) {
    let n = ((horizon / dt).ceil() as usize).max(1);
    let mut counts = vec![0u64; n];
    for (k, slot) in counts.iter_mut().enumerate() {
        let lo = k as f64 * dt;
        let hi = (k + 1) as f64 * dt;
        for r in records {
            let c = r.completion_time;
            let in_window = lo <= c && (c < hi || (k == n - 1 && c <= horizon));
            if in_window && c <= horizon && r.latency <= alpha * r.ideal_time.unwrap() {
                *slot += 1;
            }
        }
    }
    let total = counts.iter().sum();
    (counts, total)
}

/// Largest grant found by shrinking one block boundary at a time.
pub fn try_fit_oracle(kv_tokens: u64, held: u64, free: u64, bs: u64, desired: u64) -> u64 {
    let mut g = desired;
    loop {
        if g == 0 {
            return 0;
        }
        let need = (kv_tokens + g).div_ceil(bs);
        if need <= held + free {
            return g;
        }
        g = ((need - 1) * bs).saturating_sub(kv_tokens);
    }
}

/// Line-by-line AIMD step with the triple clamp.
pub struct AimdReplay {
    pub w: f64,
    pub last: u64,
}

pub struct ReplayStep {
    pub limit: usize,
    pub admitted: usize,
    pub floor_hit: bool,
    pub binding: usize,
}

impl AimdReplay {
    pub fn new(cfg: &ControllerConfig) -> Self {
        Self {
            w: cfg.initial_window,
            last: 0,
        }
    }

    pub fn step(&mut self, t: &Telemetry, now: u64, ema: f64, queue_len: usize, cfg: &ControllerConfig) -> ReplayStep {
        let interval = (cfg.control_interval_s * 1e6).round() as u64;
        let mut floor_hit = false;
        if now - self.last >= interval {
            if t.cpu_overloaded || t.kv_overloaded {
                let dec = self.w * cfg.aimd_decrease;
                if dec < cfg.w_min {
                    floor_hit = true;
                    self.w = cfg.w_min;
                } else {
                    self.w = dec;
                }
            } else if t.kv_usage_ratio < cfg.kv_slack_below {
                self.w += cfg.aimd_increase;
            }
            self.last = now;
        }
        let mut w_cpu = (t.worker_slots as f64 * cfg.cpu_oversubscription).floor() - t.queued_tools as f64;
        if w_cpu < cfg.w_min {
            w_cpu = cfg.w_min;
        }
        let per = if ema < 1.0 { 1.0 } else { ema };
        let mut w_kv = (t.available_kv as f64 * (1.0 - cfg.kv_reserve_fraction) / per).floor() + t.active_sessions as f64;
        if w_kv < cfg.w_min {
            w_kv = cfg.w_min;
        }
        let mut m = self.w;
        let mut binding = 0;
        if w_cpu < m {
            m = w_cpu;
            binding = 1;
        }
        if w_kv < m {
            m = w_kv;
            binding = 2;
        }
        let limit = m.floor() as usize;
        let free = limit.saturating_sub(t.active_sessions);
        ReplayStep {
            limit,
            admitted: free.min(queue_len),
            floor_hit,
            binding,
        }
    }
}
