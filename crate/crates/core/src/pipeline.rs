//! Unification of per-monitor traces and flagging of duplicate observations.
//!
//! A peer connected to several monitors broadcasts each want-list entry to
//! all of them, and unresolved entries are re-broadcast periodically. Both
//! effects are marked rather than dropped:
//!
//! - bit 0 ([`Flags::INTER_MONITOR_DUP`]): the entry was already observed by
//!   a different monitor at most `window_dup` earlier. The earliest
//!   observation of a duplicate group stays unflagged, and later records are
//!   only ever compared against such unflagged group heads.
//! - bit 1 ([`Flags::REBROADCAST`]): the same monitor saw the same entry at
//!   most `window_rebroadcast` before. Chains extend through flagged records,
//!   so a periodic re-broadcast sequence has every record but the first
//!   flagged.
//!
//! Entries match on `(peer, request_type, cid)`; the address is ignored.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

use thiserror::Error;

use crate::types::{Cid, Flags, NodeId, RequestType, TraceRecord};
use crate::{secs_to_nanos, NANOS_PER_SEC};

pub const DEFAULT_DUP_WINDOW_S: f64 = 5.0;
pub const DEFAULT_REBROADCAST_WINDOW_S: f64 = 31.0;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("trace of monitor {monitor:?} is not sorted by timestamp at offset {offset}")]
    Unsorted { monitor: String, offset: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Windows {
    pub dup_ns: u64,
    pub rebroadcast_ns: u64,
}

impl Windows {
    pub fn from_secs(dup_s: f64, rebroadcast_s: f64) -> Self {
        Windows {
            dup_ns: secs_to_nanos(dup_s),
            rebroadcast_ns: secs_to_nanos(rebroadcast_s),
        }
    }
}

impl Default for Windows {
    fn default() -> Self {
        Windows {
            dup_ns: 5 * NANOS_PER_SEC,
            rebroadcast_ns: 31 * NANOS_PER_SEC,
        }
    }
}

/// Globally time-ordered trace of several monitors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnifiedTrace {
    pub records: Vec<TraceRecord>,
    /// Sorted, deduplicated monitor names that contributed records.
    pub provenance: Vec<String>,
    pub windows: Windows,
}

impl UnifiedTrace {
    /// Wraps records that are already in unified order.
    pub fn from_sorted(records: Vec<TraceRecord>, windows: Windows) -> Self {
        let mut provenance: Vec<String> = records.iter().map(|r| r.monitor.clone()).collect();
        provenance.sort();
        provenance.dedup();
        UnifiedTrace {
            records,
            provenance,
            windows,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Merges per-monitor traces with the default windows.
pub fn unify(traces: Vec<Vec<TraceRecord>>) -> Result<UnifiedTrace, PipelineError> {
    unify_with(traces, Windows::default())
}

/// k-way merge of per-monitor traces ordered by `(timestamp, monitor, offset)`.
pub fn unify_with(
    traces: Vec<Vec<TraceRecord>>,
    windows: Windows,
) -> Result<UnifiedTrace, PipelineError> {
    for trace in &traces {
        if let Some(offset) = trace
            .windows(2)
            .position(|w| w[1].timestamp_ns < w[0].timestamp_ns)
        {
            return Err(PipelineError::Unsorted {
                monitor: trace[offset + 1].monitor.clone(),
                offset: offset + 1,
            });
        }
    }

    let total = traces.iter().map(Vec::len).sum();
    let mut cursors: Vec<std::vec::IntoIter<TraceRecord>> =
        traces.into_iter().map(Vec::into_iter).collect();
    let mut heads: Vec<Option<TraceRecord>> = cursors.iter_mut().map(Iterator::next).collect();
    let mut offsets = vec![0usize; cursors.len()];

    let mut heap = BinaryHeap::new();
    for (i, head) in heads.iter().enumerate() {
        if let Some(r) = head {
            heap.push(Reverse((r.timestamp_ns, r.monitor.clone(), 0usize, i)));
        }
    }

    let mut records = Vec::with_capacity(total);
    while let Some(Reverse((_, _, _, i))) = heap.pop() {
        let rec = heads[i].take().expect("heap entry without head");
        records.push(rec);
        offsets[i] += 1;
        if let Some(next) = cursors[i].next() {
            heap.push(Reverse((
                next.timestamp_ns,
                next.monitor.clone(),
                offsets[i],
                i,
            )));
            heads[i] = Some(next);
        }
    }
    Ok(UnifiedTrace::from_sorted(records, windows))
}

type MatchKey = (NodeId, RequestType, Cid);

fn monitor_ids(records: &[TraceRecord]) -> Vec<u32> {
    let mut ids: HashMap<&str, u32> = HashMap::new();
    records
        .iter()
        .map(|r| {
            let next = ids.len() as u32;
            *ids.entry(r.monitor.as_str()).or_insert(next)
        })
        .collect()
}

/// Sets bit 0 on records already seen by another monitor within the
/// duplicate window. Any previous bit-0 state is recomputed.
pub fn mark_inter_monitor_duplicates(mut trace: UnifiedTrace) -> UnifiedTrace {
    let window = trace.windows.dup_ns;
    let monitors = monitor_ids(&trace.records);
    // Per entry: latest unflagged (group head) timestamp per monitor.
    let mut heads: HashMap<MatchKey, Vec<(u32, u64)>> = HashMap::new();

    for (rec, &mon) in trace.records.iter_mut().zip(&monitors) {
        let ts = rec.timestamp_ns;
        let seen = heads.entry(rec.match_key()).or_default();
        let dup = seen
            .iter()
            .any(|&(m, head_ts)| m != mon && ts.saturating_sub(head_ts) <= window);
        rec.flags.set(Flags::INTER_MONITOR_DUP, dup);
        if !dup {
            match seen.iter_mut().find(|(m, _)| *m == mon) {
                Some(slot) => slot.1 = ts,
                None => seen.push((mon, ts)),
            }
        }
    }
    trace
}

/// Sets bit 1 on records whose previous same-monitor match lies within the
/// re-broadcast window. Any previous bit-1 state is recomputed.
pub fn mark_rebroadcasts(mut trace: UnifiedTrace) -> UnifiedTrace {
    let window = trace.windows.rebroadcast_ns;
    let monitors = monitor_ids(&trace.records);
    let mut last: HashMap<(u32, MatchKey), u64> = HashMap::new();

    for (rec, &mon) in trace.records.iter_mut().zip(&monitors) {
        let ts = rec.timestamp_ns;
        let prev = last.insert((mon, rec.match_key()), ts);
        let chained = prev.is_some_and(|p| ts.saturating_sub(p) <= window);
        rec.flags.set(Flags::REBROADCAST, chained);
    }
    trace
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FilterOptions {
    pub drop_dups: bool,
    pub drop_rebroadcasts: bool,
    pub drop_cancels: bool,
}

impl FilterOptions {
    /// Drops everything the analyses treat as noise.
    pub fn all() -> Self {
        FilterOptions {
            drop_dups: true,
            drop_rebroadcasts: true,
            drop_cancels: true,
        }
    }

    pub fn keeps(&self, r: &TraceRecord) -> bool {
        !(self.drop_dups && r.flags.is_dup()
            || self.drop_rebroadcasts && r.flags.is_rebroadcast()
            || self.drop_cancels && r.request_type == RequestType::Cancel)
    }
}

pub fn filter(mut trace: UnifiedTrace, opts: FilterOptions) -> UnifiedTrace {
    trace.records.retain(|r| opts.keeps(r));
    trace
}

/// Unify, then mark duplicates, then mark re-broadcasts.
pub fn process(
    traces: Vec<Vec<TraceRecord>>,
    windows: Windows,
) -> Result<UnifiedTrace, PipelineError> {
    let unified = unify_with(traces, windows)?;
    Ok(mark_rebroadcasts(mark_inter_monitor_duplicates(unified)))
}
