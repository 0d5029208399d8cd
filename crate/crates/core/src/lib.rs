//! Core building blocks for passive BitSwap monitoring.
//!
//! The crate is organised bottom-up:
//!
//! - [`types`]: node identifiers, content identifiers and trace records.
//! - [`trace`]: the CSV trace and connection-event file formats.
//! - [`pipeline`]: unification of per-monitor traces and duplicate /
//!   re-broadcast flagging.
//! - [`estimators`]: network-size estimators built on monitor peer sets and
//!   DHT XOR distances.
//! - [`analytics`]: request popularity, power-law fitting and the
//!   descriptive share / rate reports.

pub mod analytics;
pub mod estimators;
pub mod pipeline;
pub mod stats;
pub mod trace;
pub mod types;

pub use types::{Cid, Codec, ConnEvent, ConnKind, Flags, NodeId, RequestType, TraceRecord};

/// Nanoseconds per second, the unit of every timestamp in a trace.
pub const NANOS_PER_SEC: u64 = 1_000_000_000;

/// Converts fractional seconds to trace nanoseconds, saturating at zero.
pub fn secs_to_nanos(secs: f64) -> u64 {
    if secs <= 0.0 {
        0
    } else {
        (secs * NANOS_PER_SEC as f64).round() as u64
    }
}
