//! Deterministic execution substrate shared by every policy: a token-budgeted
//! GPU, a block-granular KV pool, and a slot-limited tool plane.

pub mod call;
pub mod clock;
pub mod gpu;
pub mod kv;
pub mod tools;

pub use call::{resume_cost, Call, Phase};
pub use clock::SimClock;
pub use gpu::{step_gpu, BatchItem, GpuModel, TickReport};
pub use kv::{KvPool, PoolOp};
pub use tools::{ToolPlane, ToolStart, ToolUpdate};
