//! Deterministic co-scheduling simulator for multi-round agentic LLM
//! sessions: a token-budgeted GPU, a paged KV pool and a CPU tool plane,
//! driven by pluggable scheduling policies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod baselines;
pub mod config;
pub mod control;
pub mod engine;
pub mod experiment;
pub mod error;
pub mod info_stream;
pub mod log;
pub mod metrics;
pub mod report;
pub mod scheduler;
pub mod sim;
pub mod time;
pub mod workload;

pub use error::{Error, Result};
pub use time::SimTime;
