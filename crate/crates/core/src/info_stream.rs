//! Boundary events shared by the control and data planes, and the telemetry
//! derived from them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::SimTime;
use crate::workload::SessionId;

/// Payload of a telemetry event, tagged by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Signal {
    GpuSubmit {
        round: usize,
        projected_blocks: u64,
        prefill_tokens: u64,
        warm: bool,
        cause: SubmitCause,
    },
    #[serde(rename = "gpu_1st_token")]
    GpuFirstToken { round: usize, launch_delay_s: f64 },
    GpuEnd {
        round: usize,
        freed_blocks: u64,
        footprint_blocks: u64,
        final_round: bool,
    },
    ToolNum { active: usize, queued: usize },
    ToolStart { duration_s: f64, waited_s: f64 },
    ToolEnd { duration_s: f64 },
    WindowUpdate {
        w_adm: f64,
        limit: usize,
        cpu_limit: f64,
        kv_limit: f64,
        active_sessions: usize,
        admitted: usize,
        cpu_overloaded: bool,
        kv_overloaded: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmitCause {
    Admit,
    Resume,
    Preempt,
}

impl Signal {
    pub fn kind(&self) -> &'static str {
        match self {
            Signal::GpuSubmit { .. } => "gpu_submit",
            Signal::GpuFirstToken { .. } => "gpu_1st_token",
            Signal::GpuEnd { .. } => "gpu_end",
            Signal::ToolNum { .. } => "tool_num",
            Signal::ToolStart { .. } => "tool_start",
            Signal::ToolEnd { .. } => "tool_end",
            Signal::WindowUpdate { .. } => "window_update",
        }
    }

    /// Whether events of this kind carry a session id.
    pub fn is_per_session(&self) -> bool {
        !matches!(self, Signal::ToolNum { .. } | Signal::WindowUpdate { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryEvent {
    pub time: SimTime,
    pub session_id: Option<SessionId>,
    pub signal: Signal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PressureConfig {
    pub ema_smoothing: f64,
    /// Initial EMA value; `None` seeds the EMA with the first sample.
    pub ema_seed: Option<f64>,
    /// Tool-duration estimate used before any sample arrives.
    pub tool_prior_s: f64,
    pub hysteresis_window: u32,
    pub kv_high: f64,
    pub kv_low: f64,
    pub cpu_high: f64,
    pub cpu_low: f64,
}

impl Default for PressureConfig {
    fn default() -> Self {
        Self {
            ema_smoothing: 0.3,
            ema_seed: None,
            tool_prior_s: 5.0,
            hysteresis_window: 3,
            kv_high: 0.90,
            kv_low: 0.70,
            cpu_high: 0.90,
            cpu_low: 0.70,
        }
    }
}

impl PressureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_smoothing > 0.0 && self.ema_smoothing <= 1.0) {
            return Err(Error::config("pressure.ema_smoothing", "must be in (0, 1]"));
        }
        if self.hysteresis_window == 0 {
            return Err(Error::config("pressure.hysteresis_window", "must be >= 1"));
        }
        if !(self.kv_low < self.kv_high) {
            return Err(Error::config("pressure.kv_low", "must be below kv_high"));
        }
        if !(self.cpu_low < self.cpu_high) {
            return Err(Error::config("pressure.cpu_low", "must be below cpu_high"));
        }
        if !(self.tool_prior_s >= 0.0) {
            return Err(Error::config("pressure.tool_prior_s", "must be >= 0"));
        }
        if let Some(seed) = self.ema_seed {
            if !(seed >= 0.0) {
                return Err(Error::config("pressure.ema_seed", "must be >= 0"));
            }
        }
        Ok(())
    }
}

/// Two-threshold flag: raised after `window` consecutive refreshes with the
/// raise condition, cleared after `window` consecutive refreshes with the
/// clear condition.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Hysteresis {
    pub flag: bool,
    streak: u32,
}

impl Hysteresis {
    pub fn update(&mut self, raise: bool, clear: bool, window: u32) -> bool {
        let toward = if self.flag { clear } else { raise };
        if toward {
            self.streak += 1;
            if self.streak >= window {
                self.flag = !self.flag;
                self.streak = 0;
            }
        } else {
            self.streak = 0;
        }
        self.flag
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Telemetry {
    pub available_kv: u64,
    pub total_kv: u64,
    pub kv_usage_ratio: f64,
    pub active_tools: usize,
    pub queued_tools: usize,
    pub worker_slots: usize,
    pub ema_tool_duration: f64,
    pub tool_samples: u64,
    pub active_sessions: usize,
    pub cpu_overloaded: bool,
    pub kv_overloaded: bool,
    pub last_window_update: f64,
    #[serde(skip)]
    cpu_hysteresis: Hysteresis,
    #[serde(skip)]
    kv_hysteresis: Hysteresis,
}

impl Telemetry {
    pub fn new(total_kv: u64, worker_slots: usize, config: &PressureConfig) -> Self {
        Self {
            available_kv: total_kv,
            total_kv,
            kv_usage_ratio: 0.0,
            active_tools: 0,
            queued_tools: 0,
            worker_slots,
            ema_tool_duration: config.ema_seed.unwrap_or(0.0),
            tool_samples: 0,
            active_sessions: 0,
            cpu_overloaded: false,
            kv_overloaded: false,
            last_window_update: 0.0,
            cpu_hysteresis: Hysteresis::default(),
            kv_hysteresis: Hysteresis::default(),
        }
    }

    /// Current tool-duration estimate, falling back to the prior until the
    /// EMA has a sample or an explicit seed.
    pub fn tool_estimate(&self, config: &PressureConfig) -> f64 {
        if self.tool_samples == 0 && config.ema_seed.is_none() {
            config.tool_prior_s
        } else {
            self.ema_tool_duration
        }
    }

    /// Overwrites the KV counters with a direct reading of the allocator.
    pub fn sync_kv(&mut self, free_blocks: u64) {
        self.available_kv = free_blocks.min(self.total_kv);
        self.kv_usage_ratio = 1.0 - self.available_kv as f64 / self.total_kv.max(1) as f64;
    }
}

pub fn ema_update(current: f64, sample: f64, smoothing: f64) -> Result<f64> {
    if !(smoothing > 0.0 && smoothing <= 1.0) {
        return Err(Error::contract(format!("ema smoothing {smoothing} outside (0, 1]")));
    }
    Ok(smoothing * sample + (1.0 - smoothing) * current)
}

fn check_duration(name: &str, d: f64) -> Result<()> {
    if d.is_finite() && d >= 0.0 {
        Ok(())
    } else {
        Err(Error::contract(format!("{name} must be a finite non-negative duration, got {d}")))
    }
}

/// Folds one event into the telemetry counters in constant time.
///
/// `gpu_submit` with cause `admit` opens a session and a final `gpu_end`
/// closes it; `gpu_end` credits its freed blocks to `available_kv`.
pub fn record(event: &TelemetryEvent, state: &mut Telemetry, config: &PressureConfig) -> Result<()> {
    if event.signal.is_per_session() != event.session_id.is_some() {
        return Err(Error::contract(format!(
            "{} event with session id {:?}",
            event.signal.kind(),
            event.session_id
        )));
    }
    match &event.signal {
        Signal::GpuSubmit { cause, .. } => {
            if *cause == SubmitCause::Admit {
                state.active_sessions += 1;
            }
        }
        Signal::GpuFirstToken { launch_delay_s, .. } => check_duration("launch_delay_s", *launch_delay_s)?,
        Signal::GpuEnd {
            freed_blocks,
            final_round,
            ..
        } => {
            state.available_kv = (state.available_kv + freed_blocks).min(state.total_kv);
            state.kv_usage_ratio = 1.0 - state.available_kv as f64 / state.total_kv.max(1) as f64;
            if *final_round {
                if state.active_sessions == 0 {
                    return Err(Error::contract("final gpu_end with no active session"));
                }
                state.active_sessions -= 1;
            }
        }
        Signal::ToolNum { active, queued } => {
            state.active_tools = *active;
            state.queued_tools = *queued;
        }
        Signal::ToolStart { duration_s, waited_s } => {
            check_duration("duration_s", *duration_s)?;
            check_duration("waited_s", *waited_s)?;
            state.active_tools += 1;
        }
        Signal::ToolEnd { duration_s } => {
            check_duration("duration_s", *duration_s)?;
            if state.active_tools == 0 {
                return Err(Error::contract("tool_end with no active tool"));
            }
            state.active_tools -= 1;
            state.ema_tool_duration = if state.tool_samples == 0 && config.ema_seed.is_none() {
                *duration_s
            } else {
                ema_update(state.ema_tool_duration, *duration_s, config.ema_smoothing)?
            };
            state.tool_samples += 1;
        }
        Signal::WindowUpdate { .. } => state.last_window_update = event.time.as_secs_f64(),
    }
    Ok(())
}

/// Advances both overload flags by one refresh.
pub fn refresh_pressure(state: &mut Telemetry, config: &PressureConfig) {
    let slots = state.worker_slots as f64;
    let active = state.active_tools as f64;
    let cpu_raise = active >= config.cpu_high * slots || state.queued_tools > 0;
    let cpu_clear = active < config.cpu_low * slots && state.queued_tools == 0;
    state.cpu_overloaded = state
        .cpu_hysteresis
        .update(cpu_raise, cpu_clear, config.hysteresis_window);
    let u = state.kv_usage_ratio;
    state.kv_overloaded = state
        .kv_hysteresis
        .update(u >= config.kv_high, u < config.kv_low, config.hysteresis_window);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(session: Option<SessionId>, signal: Signal) -> TelemetryEvent {
        TelemetryEvent {
            time: SimTime::ZERO,
            session_id: session,
            signal,
        }
    }

    #[test]
    fn ema_from_zero_seed() {
        let cfg = PressureConfig {
            ema_seed: Some(0.0),
            ..PressureConfig::default()
        };
        let mut t = Telemetry::new(100, 4, &cfg);
        record(&ev(Some(1), Signal::ToolStart { duration_s: 4.0, waited_s: 0.0 }), &mut t, &cfg).unwrap();
        record(&ev(Some(1), Signal::ToolEnd { duration_s: 4.0 }), &mut t, &cfg).unwrap();
        assert!((t.ema_tool_duration - 1.2).abs() < 1e-12);
        assert_eq!(t.active_tools, 0);
    }

    #[test]
    fn ema_seeded_at_first_sample() {
        let cfg = PressureConfig::default();
        let mut t = Telemetry::new(100, 4, &cfg);
        assert_eq!(t.tool_estimate(&cfg), 5.0);
        record(&ev(Some(1), Signal::ToolStart { duration_s: 4.0, waited_s: 0.0 }), &mut t, &cfg).unwrap();
        record(&ev(Some(1), Signal::ToolEnd { duration_s: 4.0 }), &mut t, &cfg).unwrap();
        assert_eq!(t.ema_tool_duration, 4.0);
    }

    #[test]
    fn gpu_end_credits_blocks() {
        let cfg = PressureConfig::default();
        let mut t = Telemetry::new(100, 4, &cfg);
        t.sync_kv(50);
        let signal = Signal::GpuEnd {
            round: 0,
            freed_blocks: 12,
            footprint_blocks: 12,
            final_round: false,
        };
        record(&ev(Some(3), signal), &mut t, &cfg).unwrap();
        assert_eq!(t.available_kv, 62);
    }

    #[test]
    fn malformed_events_rejected() {
        let cfg = PressureConfig::default();
        let mut t = Telemetry::new(100, 4, &cfg);
        assert!(record(&ev(None, Signal::ToolEnd { duration_s: 1.0 }), &mut t, &cfg).is_err());
        assert!(record(&ev(Some(1), Signal::ToolEnd { duration_s: 1.0 }), &mut t, &cfg).is_err());
        let neg = Signal::ToolStart { duration_s: -1.0, waited_s: 0.0 };
        assert!(record(&ev(Some(1), neg), &mut t, &cfg).is_err());
    }

    #[test]
    fn ema_update_cases() {
        assert_eq!(ema_update(10.0, 10.0, 0.7).unwrap(), 10.0);
        assert_eq!(ema_update(0.0, 8.0, 0.5).unwrap(), 4.0);
        assert!(ema_update(1.0, 1.0, 0.0).is_err());
        assert!(ema_update(1.0, 1.0, 1.5).is_err());
        let mut x = 0.0;
        for _ in 0..60 {
            x = ema_update(x, 7.0, 0.3).unwrap();
        }
        assert!((x - 7.0).abs() < 1e-6);
    }

    #[test]
    fn single_spike_does_not_raise() {
        let cfg = PressureConfig::default();
        let mut t = Telemetry::new(100, 4, &cfg);
        for u in [0.95, 0.5, 0.5] {
            t.kv_usage_ratio = u;
            refresh_pressure(&mut t, &cfg);
            assert!(!t.kv_overloaded);
        }
        for _ in 0..3 {
            t.kv_usage_ratio = 0.92;
            refresh_pressure(&mut t, &cfg);
        }
        assert!(t.kv_overloaded);
    }

    #[test]
    fn queued_tool_raises_cpu_flag() {
        let cfg = PressureConfig::default();
        let mut t = Telemetry::new(100, 10, &cfg);
        t.queued_tools = 1;
        for _ in 0..3 {
            refresh_pressure(&mut t, &cfg);
        }
        assert!(t.cpu_overloaded);
        t.queued_tools = 0;
        t.active_tools = 8;
        for _ in 0..5 {
            refresh_pressure(&mut t, &cfg);
        }
        assert!(t.cpu_overloaded, "0.8 of slots is between the watermarks");
        t.active_tools = 6;
        for _ in 0..3 {
            refresh_pressure(&mut t, &cfg);
        }
        assert!(!t.cpu_overloaded);
    }
}
