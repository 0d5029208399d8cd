//! Privacy attacks on want-list traces and the bait-CID gateway probe.
//!
//! `idw` and `tnw` only read a flagged trace. `tpi` and the gateway probes
//! drive a live [`Network`].

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wantscope_core::pipeline::UnifiedTrace;
use wantscope_core::{Cid, Codec, NodeId, RequestType, TraceRecord};

use crate::network::{GatewayOutcome, Network, RetrievalOutcome};
use crate::SimError;

/// Simulated seconds to wait for wants after each gateway request.
pub const PROBE_WINDOW_S: f64 = 30.0;
/// Consecutive probes without a new node id before giving up.
pub const SATURATION_K: usize = 5;
/// Hard cap on probes per gateway in saturation mode.
pub const MAX_PROBES: usize = 5000;
pub const PROBE_BLOCK_BYTES: usize = 1024;

/// Peers that asked for `cid`, with the time each was first seen.
/// Flagged records are ignored.
pub fn idw(trace: &UnifiedTrace, cid: &Cid) -> BTreeMap<NodeId, u64> {
    let mut seen = BTreeMap::new();
    for r in &trace.records {
        if r.cid == *cid && r.request_type.is_want() && r.flags.is_clear() {
            seen.entry(r.peer)
                .and_modify(|t: &mut u64| *t = (*t).min(r.timestamp_ns))
                .or_insert(r.timestamp_ns);
        }
    }
    seen
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TnwEntry {
    pub timestamp_ns: u64,
    pub request_type: RequestType,
    pub cid: Cid,
}

/// Everything `target` asked for or cancelled, in time order.
pub fn tnw(trace: &UnifiedTrace, target: &NodeId) -> Vec<TnwEntry> {
    let mut out: Vec<TnwEntry> = trace
        .records
        .iter()
        .filter(|r| r.peer == *target && r.flags.is_clear())
        .map(|r| TnwEntry {
            timestamp_ns: r.timestamp_ns,
            request_type: r.request_type,
            cid: r.cid,
        })
        .collect();
    // Unified traces are already sorted; this only matters for hand-built ones.
    out.sort_by_key(|e| e.timestamp_ns);
    out
}

/// Asks `target` whether it holds `cid`. True only on a HAVE answer;
/// DONT_HAVE and silence both count as no.
pub fn tpi(net: &mut Network, prober: NodeId, target: NodeId, cid: Cid) -> Result<bool, SimError> {
    net.probe_have(prober, target, cid)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct GatewayProbeResult {
    pub dns_name: String,
    pub discovered_node_ids: BTreeSet<NodeId>,
    pub probes_sent: usize,
    pub http_succeeded: Vec<bool>,
    /// Bait CID of each probe.
    pub probe_cids: Vec<Cid>,
}

impl GatewayProbeResult {
    fn new(dns_name: &str) -> Self {
        GatewayProbeResult {
            dns_name: dns_name.to_string(),
            discovered_node_ids: BTreeSet::new(),
            probes_sent: 0,
            http_succeeded: Vec::new(),
            probe_cids: Vec::new(),
        }
    }

    /// A gateway that never served a probe over HTTP and never showed up
    /// on the overlay.
    pub fn non_functional(&self) -> bool {
        self.discovered_node_ids.is_empty() && !self.http_succeeded.iter().any(|&ok| ok)
    }
}

/// The bait block of probe number `index` against `dns_name`. Mixing in
/// the name keeps two gateways probed with one seed from sharing bait.
pub fn bait_block(seed: u64, dns_name: &str, index: u64) -> Vec<u8> {
    let name = Cid::hash_content(dns_name.as_bytes(), Codec::Raw).digest;
    let salt = u64::from_le_bytes(name[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index);
    let mut block = vec![0u8; PROBE_BLOCK_BYTES];
    rng.fill(block.as_mut_slice());
    block
}

fn monitor_names(net: &Network, monitors: &[NodeId]) -> Result<Vec<String>, SimError> {
    if monitors.is_empty() {
        return Err(SimError::NoMonitors);
    }
    monitors
        .iter()
        .map(|&m| {
            net.monitor_name(m)
                .map(str::to_string)
                .ok_or(SimError::NotAMonitor(m))
        })
        .collect()
}

/// Returns how many new node ids the probe found, or `None` when the HTTP
/// cache answered and nothing reached the overlay.
fn probe_once(
    net: &mut Network,
    dns_name: &str,
    monitors: &[NodeId],
    names: &[String],
    block: &[u8],
    result: &mut GatewayProbeResult,
) -> Result<Option<usize>, SimError> {
    let cid = Cid::hash_content(block, Codec::Raw);
    let marks: Vec<usize> = names
        .iter()
        .map(|n| net.trace(n).map_or(0, <[TraceRecord]>::len))
        .collect();
    for &m in monitors {
        net.insert_block(m, cid)?;
        net.dht_provide(m, cid)?;
    }
    let outcome = net.gateway_http_request(dns_name, cid)?;
    result.probes_sent += 1;
    result.probe_cids.push(cid);
    let request_id = match outcome {
        GatewayOutcome::CacheHit => {
            result.http_succeeded.push(true);
            return Ok(None);
        }
        GatewayOutcome::Forwarded { request_id, .. } => request_id,
    };
    net.advance_secs(PROBE_WINDOW_S);

    let before = result.discovered_node_ids.len();
    for (name, mark) in names.iter().zip(marks) {
        let trace = net.trace(name).unwrap_or_default();
        for r in &trace[mark..] {
            if r.cid == cid && r.request_type == RequestType::WantHave {
                result.discovered_node_ids.insert(r.peer);
            }
        }
    }
    let ok = matches!(net.request_outcome(request_id), Some(RetrievalOutcome::Fetched(_)))
        && net.gateway_http_functional(dns_name)?;
    result.http_succeeded.push(ok);
    Ok(Some(result.discovered_node_ids.len() - before))
}

/// One bait-CID probe: the monitors provide a fresh random block, the
/// gateway is asked for it over HTTP and every node that then asks a
/// monitor for it within the probe window is attributed to the gateway.
pub fn probe_gateway(
    net: &mut Network,
    dns_name: &str,
    monitors: &[NodeId],
    seed: u64,
) -> Result<GatewayProbeResult, SimError> {
    let names = monitor_names(net, monitors)?;
    net.gateway_http_functional(dns_name)?;
    let mut result = GatewayProbeResult::new(dns_name);
    probe_once(net, dns_name, monitors, &names, &bait_block(seed, dns_name, 0), &mut result)?;
    Ok(result)
}

/// Repeats the probe with fresh bait until [`SATURATION_K`] probes in a
/// row find nobody new, or [`MAX_PROBES`] is reached. Probes answered by
/// the HTTP cache tell nothing and do not count towards saturation.
pub fn probe_gateway_saturated(
    net: &mut Network,
    dns_name: &str,
    monitors: &[NodeId],
    seed: u64,
) -> Result<GatewayProbeResult, SimError> {
    let names = monitor_names(net, monitors)?;
    net.gateway_http_functional(dns_name)?;
    let mut result = GatewayProbeResult::new(dns_name);
    let mut quiet = 0;
    for i in 0..MAX_PROBES as u64 {
        match probe_once(net, dns_name, monitors, &names, &bait_block(seed, dns_name, i), &mut result)? {
            None => continue,
            Some(0) => quiet += 1,
            Some(_) => quiet = 0,
        }
        if quiet >= SATURATION_K {
            break;
        }
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CrossRefRow {
    pub node: NodeId,
    pub addresses: BTreeSet<String>,
    pub dns_names: BTreeSet<String>,
    /// The node was seen at more than one address.
    pub multi_address: bool,
    /// One of its addresses was also used by another node id.
    pub shared_address: bool,
}

/// Joins discovered gateway nodes with the addresses they used in the
/// trace. One row per node, ordered by node id.
pub fn cross_reference(results: &[GatewayProbeResult], records: &[TraceRecord]) -> Vec<CrossRefRow> {
    let mut addresses: BTreeMap<NodeId, BTreeSet<String>> = BTreeMap::new();
    let mut users: BTreeMap<&str, BTreeSet<NodeId>> = BTreeMap::new();
    for r in records {
        addresses.entry(r.peer).or_default().insert(r.address.clone());
        users.entry(&r.address).or_default().insert(r.peer);
    }
    let mut rows: BTreeMap<NodeId, CrossRefRow> = BTreeMap::new();
    for res in results {
        for &node in &res.discovered_node_ids {
            let row = rows.entry(node).or_insert_with(|| {
                let addrs = addresses.get(&node).cloned().unwrap_or_default();
                let shared = addrs
                    .iter()
                    .any(|a| users.get(a.as_str()).is_some_and(|u| u.len() > 1));
                CrossRefRow {
                    node,
                    multi_address: addrs.len() > 1,
                    shared_address: shared,
                    addresses: addrs,
                    dns_names: BTreeSet::new(),
                }
            });
            row.dns_names.insert(res.dns_name.clone());
        }
    }
    rows.into_values().collect()
}
