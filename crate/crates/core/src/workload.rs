//! Multi-turn agentic session traces: generation, persistence and validation.
//!
//! A trace is a length/duration skeleton only. Each [`SessionTrace`] lists
//! its generation rounds; every round but the last is followed by a tool
//! phase of known duration.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type SessionId = u64;

/// One generation round and the tool phase that follows it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundSpec {
    pub new_prefill_tokens: u64,
    pub decode_tokens: u64,
    #[serde(rename = "tool_duration_s")]
    pub tool_duration: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionTrace {
    pub session_id: SessionId,
    #[serde(rename = "arrival_time_s")]
    pub arrival_time: f64,
    pub rounds: Vec<RoundSpec>,
}

impl SessionTrace {
    /// Sum of newly appended prompt tokens over all rounds.
    pub fn prompt_volume(&self) -> u64 {
        self.rounds.iter().map(|r| r.new_prefill_tokens).sum()
    }

    pub fn cumulative_context(&self) -> u64 {
        self.rounds
            .iter()
            .map(|r| r.new_prefill_tokens + r.decode_tokens)
            .sum()
    }

    /// Context length accumulated before `round` starts.
    pub fn context_before(&self, round: usize) -> u64 {
        self.rounds[..round]
            .iter()
            .map(|r| r.new_prefill_tokens + r.decode_tokens)
            .sum()
    }

    pub fn total_tool_time(&self) -> f64 {
        self.rounds.iter().filter_map(|r| r.tool_duration).sum()
    }

    /// KV blocks held at the end of the final round.
    pub fn peak_blocks(&self, block_size: u64) -> u64 {
        self.cumulative_context().div_ceil(block_size)
    }
}

/// Parametric tool-duration distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum ToolDurationDist {
    LogNormal { median_s: f64, sigma: f64 },
    Exponential { mean_s: f64 },
    Uniform { min_s: f64, max_s: f64 },
    Constant { seconds: f64 },
}

impl Default for ToolDurationDist {
    fn default() -> Self {
        ToolDurationDist::LogNormal {
            median_s: 5.0,
            sigma: 1.0,
        }
    }
}

impl ToolDurationDist {
    fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::config(format!("tool_duration.{field}"), reason));
        match *self {
            ToolDurationDist::LogNormal { median_s, sigma } => {
                if !(median_s > 0.0 && median_s.is_finite()) {
                    return bad("median_s", "must be positive and finite");
                }
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return bad("sigma", "must be non-negative and finite");
                }
            }
            ToolDurationDist::Exponential { mean_s } => {
                if !(mean_s > 0.0 && mean_s.is_finite()) {
                    return bad("mean_s", "must be positive and finite");
                }
            }
            ToolDurationDist::Uniform { min_s, max_s } => {
                if !(min_s >= 0.0 && min_s <= max_s && max_s.is_finite()) {
                    return bad("min_s", "range must satisfy 0 <= min_s <= max_s");
                }
            }
            ToolDurationDist::Constant { seconds } => {
                if !(seconds >= 0.0 && seconds.is_finite()) {
                    return bad("seconds", "must be non-negative and finite");
                }
            }
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            ToolDurationDist::LogNormal { median_s, sigma } => {
                // sigma validated non-negative, so construction cannot fail
                LogNormal::new(median_s.ln(), sigma)
                    .expect("validated lognormal parameters")
                    .sample(rng)
            }
            ToolDurationDist::Exponential { mean_s } => Exp::new(1.0 / mean_s)
                .expect("validated exponential rate")
                .sample(rng),
            ToolDurationDist::Uniform { min_s, max_s } => {
                if min_s == max_s {
                    min_s
                } else {
                    rng.random_range(min_s..max_s)
                }
            }
            ToolDurationDist::Constant { seconds } => seconds,
        }
    }
}

fn default_decode_range() -> [u64; 2] {
    [32, 256]
}

fn default_first_round_fraction() -> f64 {
    0.6
}

fn default_context_limit() -> u64 {
    262_144
}

/// Input-length regime: the knobs of one synthetic workload family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeConfig {
    /// Target mean of the per-session prompt volume (sum of new prefill tokens).
    pub mean_prompt_volume: f64,
    pub prompt_volume_range: [u64; 2],
    pub rounds_range: [u32; 2],
    #[serde(default)]
    pub tool_duration: ToolDurationDist,
    /// Requests per simulated second.
    pub arrival_rate: f64,
    pub request_count: usize,
    pub seed: u64,
    #[serde(default = "default_decode_range")]
    pub decode_tokens_range: [u64; 2],
    /// Share of the prompt volume carried by round 0.
    #[serde(default = "default_first_round_fraction")]
    pub first_round_fraction: f64,
    #[serde(default = "default_context_limit")]
    pub context_limit: u64,
}

impl RegimeConfig {
    pub fn validate(&self) -> Result<()> {
        let [vmin, vmax] = self.prompt_volume_range;
        if vmin == 0 || vmin > vmax {
            return Err(Error::config(
                "prompt_volume_range",
                format!("need 1 <= min <= max, got [{vmin}, {vmax}]"),
            ));
        }
        let mean = self.mean_prompt_volume;
        let mean_ok = if vmin == vmax {
            mean == vmin as f64
        } else {
            mean > vmin as f64 && mean < vmax as f64
        };
        if !mean_ok {
            return Err(Error::config(
                "mean_prompt_volume",
                format!("{mean} must lie strictly inside prompt_volume_range [{vmin}, {vmax}]"),
            ));
        }
        let [rmin, rmax] = self.rounds_range;
        if rmin == 0 || rmin > rmax {
            return Err(Error::config(
                "rounds_range",
                format!("need 1 <= min <= max, got [{rmin}, {rmax}]"),
            ));
        }
        if vmin < rmax as u64 {
            return Err(Error::config(
                "prompt_volume_range",
                "minimum volume must cover at least one token per round",
            ));
        }
        let [dmin, dmax] = self.decode_tokens_range;
        if dmin == 0 || dmin > dmax {
            return Err(Error::config(
                "decode_tokens_range",
                format!("need 1 <= min <= max, got [{dmin}, {dmax}]"),
            ));
        }
        if !(self.arrival_rate > 0.0 && self.arrival_rate.is_finite()) {
            return Err(Error::config("arrival_rate", "must be positive and finite"));
        }
        if self.request_count == 0 {
            return Err(Error::config("request_count", "must be at least 1"));
        }
        if !(self.first_round_fraction > 0.0 && self.first_round_fraction <= 1.0) {
            return Err(Error::config("first_round_fraction", "must lie in (0, 1]"));
        }
        if self.context_limit < vmin + rmax as u64 * dmax {
            return Err(Error::config(
                "context_limit",
                "too small for the minimum volume plus maximum decode lengths",
            ));
        }
        self.tool_duration.validate()
    }
}

/// Mean of `min * ratio^(U^k)` for `U ~ Uniform(0,1)`, by composite Simpson.
fn tilted_log_uniform_mean(min: f64, ratio: f64, k: f64) -> f64 {
    const N: usize = 20_000;
    let h = 1.0 / N as f64;
    let f = |u: f64| ratio.powf(u.powf(k));
    let mut acc = f(0.0) + f(1.0);
    for i in 1..N {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(i as f64 * h);
    }
    min * acc * h / 3.0
}

/// Exponent `k` such that the tilted log-uniform over `[min, max]` has the
/// requested mean. `k = 1` is the plain log-uniform.
fn solve_tilt(min: f64, max: f64, target: f64) -> f64 {
    let ratio = max / min;
    let (mut lo, mut hi) = ((1e-3f64).ln(), (1e3f64).ln());
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        // mean decreases as k grows
        if tilted_log_uniform_mean(min, ratio, mid.exp()) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi)).exp()
}

fn split_volume(volume: u64, rounds: usize, first_fraction: f64) -> Vec<u64> {
    if rounds == 1 {
        return vec![volume];
    }
    let later = (rounds - 1) as u64;
    let first = ((volume as f64 * first_fraction).round() as u64).clamp(1, volume - later);
    let rest = volume - first;
    let (base, extra) = (rest / later, rest % later);
    let mut out = Vec::with_capacity(rounds);
    out.push(first);
    out.extend((0..later).map(|i| base + u64::from(i < extra)));
    out
}

/// Generates `request_count` sessions with Poisson arrivals. Pure in `config`.
pub fn generate_workload(config: &RegimeConfig) -> Result<Vec<SessionTrace>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gaps = Exp::new(config.arrival_rate).map_err(|e| Error::config("arrival_rate", e.to_string()))?;
    let [vmin, vmax] = config.prompt_volume_range;
    let (vmin_f, vmax_f) = (vmin as f64, vmax as f64);
    let tilt = (vmin != vmax).then(|| solve_tilt(vmin_f, vmax_f, config.mean_prompt_volume));

    let mut now = 0.0f64;
    let mut out = Vec::with_capacity(config.request_count);
    for i in 0..config.request_count {
        now += gaps.sample(&mut rng);
        let u: f64 = rng.random();
        let rounds = rng.random_range(config.rounds_range[0]..=config.rounds_range[1]) as usize;
        let decodes: Vec<u64> = (0..rounds)
            .map(|_| rng.random_range(config.decode_tokens_range[0]..=config.decode_tokens_range[1]))
            .collect();
        let tools: Vec<f64> = (0..rounds.saturating_sub(1))
            .map(|_| config.tool_duration.sample(&mut rng))
            .collect();

        let raw = match tilt {
            Some(k) => vmin_f * (vmax_f / vmin_f).powf(u.powf(k)),
            None => vmin_f,
        };
        let decode_total: u64 = decodes.iter().sum();
        let cap = config.context_limit.saturating_sub(decode_total);
        let volume = (raw.round() as u64).clamp(rounds as u64, cap.max(rounds as u64));

        let prefills = split_volume(volume, rounds, config.first_round_fraction);
        let rounds = prefills
            .into_iter()
            .zip(decodes)
            .enumerate()
            .map(|(r, (new_prefill_tokens, decode_tokens))| RoundSpec {
                new_prefill_tokens,
                decode_tokens,
                tool_duration: tools.get(r).copied(),
            })
            .collect();
        out.push(SessionTrace {
            session_id: i as SessionId,
            arrival_time: now,
            rounds,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub session_id: Option<SessionId>,
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.session_id {
            Some(id) => write!(f, "session {id}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        let msg = self
            .violations
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("; ");
        Err(Error::InvalidTrace(msg))
    }
}

/// Checks every trace invariant and lists each violation. Never fails.
pub fn validate_trace(traces: &[SessionTrace], context_limit: u64) -> ValidationReport {
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    let mut push = |id: SessionId, field: &str, message: String| {
        violations.push(Violation {
            session_id: Some(id),
            field: field.to_string(),
            message,
        })
    };
    for t in traces {
        let id = t.session_id;
        if !seen.insert(id) {
            push(id, "session_id", "duplicate session id".into());
        }
        if !(t.arrival_time >= 0.0 && t.arrival_time.is_finite()) {
            push(id, "arrival_time_s", format!("must be finite and >= 0, got {}", t.arrival_time));
        }
        if t.rounds.is_empty() {
            push(id, "rounds", "must be non-empty".into());
            continue;
        }
        let last = t.rounds.len() - 1;
        for (r, round) in t.rounds.iter().enumerate() {
            if round.new_prefill_tokens == 0 {
                push(id, "new_prefill_tokens", format!("round {r}: must be >= 1"));
            }
            if round.decode_tokens == 0 {
                push(id, "decode_tokens", format!("round {r}: must be >= 1"));
            }
            match round.tool_duration {
                Some(_) if r == last => {
                    push(id, "tool_duration_s", format!("round {r}: final round must not have a tool phase"))
                }
                Some(d) if !(d >= 0.0 && d.is_finite()) => {
                    push(id, "tool_duration_s", format!("round {r}: must be finite and >= 0, got {d}"))
                }
                None if r != last => {
                    push(id, "tool_duration_s", format!("round {r}: non-final round needs a tool duration"))
                }
                _ => {}
            }
        }
        let ctx = t.cumulative_context();
        if ctx > context_limit {
            push(
                id,
                "rounds",
                format!("cumulative context {ctx} exceeds context limit {context_limit}"),
            );
        }
    }
    ValidationReport { violations }
}

/// SHA-256 over the canonical JSONL encoding of the sessions.
pub fn trace_hash(traces: &[SessionTrace]) -> String {
    let mut h = Sha256::new();
    for t in traces {
        h.update(serde_json::to_vec(t).expect("trace serializes"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

/// Writes one session per line, optionally preceded by a `{"header": ...}` line.
pub fn save_trace(path: &Path, traces: &[SessionTrace], header: Option<&serde_json::Value>) -> Result<()> {
    let mut buf = Vec::new();
    if let Some(h) = header {
        serde_json::to_writer(&mut buf, &serde_json::json!({ "header": h }))?;
        buf.push(b'\n');
    }
    for t in traces {
        serde_json::to_writer(&mut buf, t)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn is_header_line(line: &str) -> bool {
    matches!(
        serde_json::from_str::<serde_json::Value>(line),
        Ok(serde_json::Value::Object(ref m)) if m.len() == 1 && m.contains_key("header")
    )
}

/// Reads a JSONL trace. Round order is preserved; every structural invariant
/// is checked (the context limit is the caller's business, see
/// [`validate_trace`]).
pub fn load_trace(path: &Path) -> Result<Vec<SessionTrace>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut traces = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || (i == 0 && is_header_line(trimmed)) {
            continue;
        }
        let t: SessionTrace = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        traces.push(t);
    }
    validate_trace(&traces, u64::MAX).into_result()?;
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn ilr1() -> RegimeConfig {
        RegimeConfig {
            mean_prompt_volume: 125_000.0,
            prompt_volume_range: [8_192, 240_000],
            rounds_range: [2, 8],
            tool_duration: ToolDurationDist::default(),
            arrival_rate: 0.2,
            request_count: 10_000,
            seed: 7,
            decode_tokens_range: [32, 256],
            first_round_fraction: 0.6,
            context_limit: 262_144,
        }
    }

    #[test]
    fn ilr1_mean_within_five_percent() {
        let traces = generate_workload(&ilr1()).unwrap();
        assert_eq!(traces.len(), 10_000);
        let mean = traces.iter().map(|t| t.prompt_volume() as f64).sum::<f64>() / traces.len() as f64;
        assert!((mean - 125_000.0).abs() / 125_000.0 < 0.05, "mean {mean}");
        assert!(validate_trace(&traces, 262_144).is_empty());
    }

    #[test]
    fn single_round_has_no_tool() {
        let cfg = RegimeConfig {
            request_count: 1,
            rounds_range: [1, 1],
            ..ilr1()
        };
        let traces = generate_workload(&cfg).unwrap();
        assert_eq!(traces.len(), 1);
        assert_eq!(traces[0].rounds.len(), 1);
        assert_eq!(traces[0].rounds[0].tool_duration, None);
    }

    #[test]
    fn poisson_gap_mean() {
        let cfg = RegimeConfig {
            arrival_rate: 0.5,
            request_count: 1000,
            ..ilr1()
        };
        let traces = generate_workload(&cfg).unwrap();
        let gaps: Vec<f64> = traces.windows(2).map(|w| w[1].arrival_time - w[0].arrival_time).collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.10, "mean gap {mean}");
        assert!(gaps.iter().all(|g| *g >= 0.0));
    }

    #[test]
    fn invalid_config_names_field() {
        let cfg = RegimeConfig {
            arrival_rate: 0.0,
            ..ilr1()
        };
        match generate_workload(&cfg) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "arrival_rate"),
            other => panic!("unexpected {other:?}"),
        }
        let cfg = RegimeConfig {
            rounds_range: [3, 2],
            ..ilr1()
        };
        match generate_workload(&cfg) {
            Err(Error::InvalidConfig { field, .. }) => assert_eq!(field, "rounds_range"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn plain_log_uniform_has_unit_tilt() {
        let (a, b) = (1_000.0f64, 64_000.0f64);
        let lu_mean = (b - a) / (b / a).ln();
        let k = solve_tilt(a, b, lu_mean);
        assert!((k - 1.0).abs() < 1e-3, "k = {k}");
    }

    #[test]
    fn split_keeps_volume_and_fraction() {
        let s = split_volume(1000, 4, 0.6);
        assert_eq!(s.iter().sum::<u64>(), 1000);
        assert_eq!(s[0], 600);
        assert_eq!(&s[1..], &[134, 133, 133]);
        assert_eq!(split_volume(4, 4, 0.6), vec![1, 1, 1, 1]);
    }

    #[test]
    fn context_limit_violation_listed() {
        let t = SessionTrace {
            session_id: 9,
            arrival_time: 0.0,
            rounds: vec![RoundSpec {
                new_prefill_tokens: 299_000,
                decode_tokens: 1_000,
                tool_duration: None,
            }],
        };
        let report = validate_trace(&[t], 262_144);
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].session_id, Some(9));
        assert!(validate_trace(&[], 262_144).is_empty());
    }
}
