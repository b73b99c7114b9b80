//! JSONL event log: telemetry signals interleaved with engine operations.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::info_stream::{Signal, TelemetryEvent};
use crate::time::SimTime;
use crate::workload::SessionId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreeReason {
    ToolBoundary,
    PinExpired,
    Reclaim,
    Preempt,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EngineOp {
    Tick {
        end_t: f64,
        prefill_tokens: u64,
        decode_tokens: u64,
        /// `[session_id, tokens]` pairs.
        grants: Vec<[u64; 2]>,
        decodes: Vec<SessionId>,
    },
    Alloc { blocks: u64 },
    Free { blocks: u64, reason: FreeReason },
    Pin { blocks: u64 },
    Unpin { blocks: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LogBody {
    Signal(Signal),
    Engine(EngineOp),
}

impl LogBody {
    pub fn kind(&self) -> &'static str {
        match self {
            LogBody::Signal(s) => s.kind(),
            LogBody::Engine(EngineOp::Tick { .. }) => "tick",
            LogBody::Engine(EngineOp::Alloc { .. }) => "alloc",
            LogBody::Engine(EngineOp::Free { .. }) => "free",
            LogBody::Engine(EngineOp::Pin { .. }) => "pin",
            LogBody::Engine(EngineOp::Unpin { .. }) => "unpin",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: f64,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<SessionId>,
    #[serde(flatten)]
    pub body: LogBody,
}

impl LogRecord {
    pub fn time(&self) -> SimTime {
        SimTime::from_secs_f64(self.t)
    }

    pub fn signal(&self) -> Option<&Signal> {
        match &self.body {
            LogBody::Signal(s) => Some(s),
            LogBody::Engine(_) => None,
        }
    }

    pub fn engine(&self) -> Option<&EngineOp> {
        match &self.body {
            LogBody::Engine(e) => Some(e),
            LogBody::Signal(_) => None,
        }
    }

    pub fn as_telemetry(&self) -> Option<TelemetryEvent> {
        self.signal().map(|s| TelemetryEvent {
            time: self.time(),
            session_id: self.session_id,
            signal: s.clone(),
        })
    }
}

/// Append-only, sequence-numbered log.
#[derive(Debug, Clone, Default)]
pub struct EventLog {
    records: Vec<LogRecord>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_seq(&self) -> u64 {
        self.records.len() as u64
    }

    pub fn push(&mut self, time: SimTime, session_id: Option<SessionId>, body: LogBody) -> u64 {
        let seq = self.next_seq();
        self.records.push(LogRecord {
            t: time.as_secs_f64(),
            seq,
            session_id,
            body,
        });
        seq
    }

    pub fn signal(&mut self, time: SimTime, session_id: Option<SessionId>, signal: Signal) -> u64 {
        self.push(time, session_id, LogBody::Signal(signal))
    }

    pub fn engine(&mut self, time: SimTime, session_id: Option<SessionId>, op: EngineOp) -> u64 {
        self.push(time, session_id, LogBody::Engine(op))
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<LogRecord> {
        self.records
    }
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, header: Option<&serde_json::Value>, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut put = |line: String| writeln!(w, "{line}").map_err(|e| Error::io(path, e));
    if let Some(h) = header {
        put(serde_json::json!({ "header": h }).to_string())?;
    }
    for item in items {
        put(serde_json::to_string(item)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an event log, skipping an optional leading header line.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log(&text, &path.display().to_string())
}

pub fn parse_log(text: &str, origin: &str) -> Result<Vec<LogRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (i == 0 && line.starts_with("{\"header\"")) {
            continue;
        }
        let rec = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
