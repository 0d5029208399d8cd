use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use wantscope_core::{Cid, NodeId};

/// Who asked for a block.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestOrigin {
    /// The node's own user.
    User,
    /// An HTTP request through the named gateway.
    Gateway(String),
    /// Issued by a test or probe script.
    Script,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IssuedRequest {
    pub id: u64,
    pub time_ns: u64,
    pub node: NodeId,
    pub cid: Cid,
    pub origin: RequestOrigin,
    /// Whether the node had a live link to at least one monitor.
    pub monitor_connected: bool,
}

/// Where a monitor-observed record came from: the request and which
/// broadcast round (0 for the first one) carried it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordOrigin {
    pub request_id: u64,
    pub round: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: u64,
    pub local_hits: u64,
    pub fetched: u64,
    pub pending_at_end: u64,
    pub rebroadcast_rounds: u64,
    pub gateway_http_requests: u64,
    pub gateway_cache_hits: u64,
    pub messages_delivered: u64,
    pub trace_records: BTreeMap<String, u64>,
    pub conn_events: BTreeMap<String, u64>,
}

/// `[start, end)` in ns; `end` is `None` while still stored.
type Span = (u64, Option<u64>);

/// Per (node, cid) list of `[start, end)` intervals during which the block
/// was stored. An open interval has `end = None`.
#[derive(Clone, Debug, Default)]
pub struct CacheLog {
    spans: HashMap<(NodeId, Cid), Vec<Span>>,
}

impl CacheLog {
    pub(crate) fn stored(&mut self, node: NodeId, cid: Cid, t: u64) {
        let spans = self.spans.entry((node, cid)).or_default();
        if spans.last().is_none_or(|s| s.1.is_some()) {
            spans.push((t, None));
        }
    }

    pub(crate) fn dropped(&mut self, node: NodeId, cid: Cid, t: u64) {
        if let Some(last) = self.spans.get_mut(&(node, cid)).and_then(|s| s.last_mut()) {
            if last.1.is_none() {
                last.1 = Some(t);
            }
        }
    }

    /// Whether `node` held `cid` at time `t`.
    pub fn cached(&self, node: NodeId, cid: Cid, t: u64) -> bool {
        self.spans.get(&(node, cid)).is_some_and(|spans| {
            spans
                .iter()
                .any(|&(start, end)| start <= t && end.is_none_or(|e| t < e))
        })
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Servers, clients and gateway nodes; monitors are not counted.
    pub true_n: usize,
    pub requests_issued: Vec<IssuedRequest>,
    pub gateway_map: BTreeMap<String, Vec<NodeId>>,
    pub summary: Summary,
    /// Per monitor, one origin per trace record, in trace order.
    #[serde(skip)]
    pub record_origins: BTreeMap<String, Vec<RecordOrigin>>,
    #[serde(skip)]
    pub cache_log: CacheLog,
}

impl GroundTruth {
    pub fn cached(&self, node: NodeId, cid: Cid, t: u64) -> bool {
        self.cache_log.cached(node, cid, t)
    }

    /// Gateway NodeId to DNS name.
    pub fn gateway_origin_map(&self) -> HashMap<NodeId, String> {
        self.gateway_map
            .iter()
            .flat_map(|(name, ids)| ids.iter().map(move |id| (*id, name.clone())))
            .collect()
    }
}
