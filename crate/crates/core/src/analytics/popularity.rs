use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::AnalyticsError;
use crate::types::{Cid, NodeId, TraceRecord};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Popularity {
    /// Raw request popularity: number of want records.
    pub rrp: u64,
    /// Unique request popularity: number of distinct requesting peers.
    pub urp: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PopularityTable {
    pub entries: BTreeMap<Cid, Popularity>,
    /// First and last timestamp covered, if any record was counted.
    pub window: Option<(u64, u64)>,
}

impl PopularityTable {
    pub fn rrp_scores(&self) -> Vec<u64> {
        self.entries.values().map(|p| p.rrp).collect()
    }

    pub fn urp_scores(&self) -> Vec<u64> {
        self.entries.values().map(|p| p.urp).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Per-CID request counts. Cancels never count; flagged records are skipped
/// when `drop_flags` is set.
pub fn popularity(records: &[TraceRecord], drop_flags: bool) -> PopularityTable {
    let mut counts: BTreeMap<Cid, (u64, BTreeSet<NodeId>)> = BTreeMap::new();
    let mut window: Option<(u64, u64)> = None;
    for r in records {
        if !r.request_type.is_want() || (drop_flags && !r.flags.is_clear()) {
            continue;
        }
        let slot = counts.entry(r.cid).or_default();
        slot.0 += 1;
        slot.1.insert(r.peer);
        window = Some(match window {
            None => (r.timestamp_ns, r.timestamp_ns),
            Some((lo, hi)) => (lo.min(r.timestamp_ns), hi.max(r.timestamp_ns)),
        });
    }
    PopularityTable {
        entries: counts
            .into_iter()
            .map(|(cid, (rrp, peers))| {
                (
                    cid,
                    Popularity {
                        rrp,
                        urp: peers.len() as u64,
                    },
                )
            })
            .collect(),
        window,
    }
}

/// Right-continuous empirical CDF: one `(value, P[X <= value])` point per
/// distinct value.
pub fn ecdf(scores: &[u64]) -> Result<Vec<(u64, f64)>, AnalyticsError> {
    if scores.is_empty() {
        return Err(AnalyticsError::Empty);
    }
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    for &s in scores {
        *counts.entry(s).or_default() += 1;
    }
    let n = scores.len() as u64;
    let mut cum = 0;
    Ok(counts
        .into_iter()
        .map(|(v, c)| {
            cum += c;
            // Exact 1.0 at the last point.
            (v, if cum == n { 1.0 } else { cum as f64 / n as f64 })
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Codec, Flags, RequestType};

    fn want(peer: u8, cid: u8, kind: RequestType, flags: u8) -> TraceRecord {
        TraceRecord {
            timestamp_ns: 0,
            monitor: "m".into(),
            peer: NodeId([peer; 32]),
            address: String::new(),
            request_type: kind,
            cid: Cid::new(Codec::Raw, [cid; 32]),
            flags: Flags(flags),
        }
    }

    #[test]
    fn empty_trace_empty_table() {
        assert!(popularity(&[], true).is_empty());
    }

    #[test]
    fn rrp_and_urp_by_definition() {
        let mut records = vec![want(1, 9, RequestType::WantHave, 0); 3];
        records.push(want(2, 9, RequestType::WantBlock, 0));
        records.push(want(2, 9, RequestType::Cancel, 0));
        records.push(want(3, 9, RequestType::WantHave, 1));
        let t = popularity(&records, true);
        let p = t.entries[&Cid::new(Codec::Raw, [9; 32])];
        assert_eq!((p.rrp, p.urp), (4, 2));
        let raw = popularity(&records, false);
        assert_eq!(raw.entries[&Cid::new(Codec::Raw, [9; 32])].rrp, 5);
    }

    #[test]
    fn ecdf_examples() {
        assert_eq!(ecdf(&[1, 1, 1]).unwrap(), vec![(1, 1.0)]);
        assert_eq!(
            ecdf(&[4, 1, 2]).unwrap(),
            vec![(1, 1.0 / 3.0), (2, 2.0 / 3.0), (4, 1.0)]
        );
        assert_eq!(ecdf(&[]).unwrap_err(), AnalyticsError::Empty);
    }
}
