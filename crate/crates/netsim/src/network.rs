use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Serialize;
use wantscope_core::{
    secs_to_nanos, Cid, ConnEvent, ConnKind, Flags, NodeId, RequestType, TraceRecord,
};

use crate::cache::BlockStore;
use crate::config::SimConfig;
use crate::truth::{GroundTruth, IssuedRequest, RecordOrigin, RequestOrigin};
use crate::workload::{assign_countries, monitor_address, node_address, Catalog};
use crate::SimError;

type Idx = u32;

const MS: u64 = 1_000_000;
const LATENCY_RANGE_NS: (u64, u64) = (10 * MS, 200 * MS);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum NodeKind {
    DhtServer,
    DhtClient,
    Gateway,
    Monitor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum MsgKind {
    WantHave,
    WantBlock,
    Have,
    DontHave,
    Block,
    Cancel,
}

impl MsgKind {
    fn request_type(self) -> Option<RequestType> {
        match self {
            MsgKind::WantHave => Some(RequestType::WantHave),
            MsgKind::WantBlock => Some(RequestType::WantBlock),
            MsgKind::Cancel => Some(RequestType::Cancel),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Msg {
    kind: MsgKind,
    cid: Cid,
    origin: Option<RecordOrigin>,
}

/// A delivered message, kept when `record_messages` is set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MessageLogEntry {
    pub sent_ns: u64,
    pub recv_ns: u64,
    pub from: NodeId,
    pub to: NodeId,
    pub kind: MsgKind,
    pub cid: Cid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RetrievalOutcome {
    LocalHit,
    Fetched(NodeId),
    /// Still unresolved; the node keeps re-broadcasting.
    Pending,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatewayOutcome {
    /// Served from the HTTP cache; nothing reaches the network.
    CacheHit,
    /// Handed to a backing node.
    Forwarded { node: NodeId, request_id: u64 },
}

/// What to drop in [`Network::purge_cache`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Purge {
    One(Cid),
    All,
}

#[derive(Clone, Debug, Default)]
struct Session {
    request_id: u64,
    round: u32,
    /// Every peer that was sent a want, for the final CANCEL.
    asked: BTreeSet<Idx>,
    /// Peers asked with WANT_HAVE this round that have not answered.
    awaiting: BTreeSet<Idx>,
    /// HAVE senders in arrival order.
    have_peers: Vec<Idx>,
    tried: BTreeSet<Idx>,
    in_flight: Option<Idx>,
    block_seq: u64,
    searched_round: Option<u32>,
    joined: Vec<u64>,
}

struct Node {
    id: NodeId,
    kind: NodeKind,
    address: String,
    online: bool,
    /// Peer -> one-way latency.
    peers: BTreeMap<Idx, u64>,
    store: BlockStore,
    /// Wants received from peers, kept until CANCEL or disconnect.
    want_entries: HashMap<Cid, BTreeMap<Idx, MsgKind>>,
    sessions: BTreeMap<Cid, Session>,
    /// Position in the monitor list.
    monitor: Option<usize>,
}

#[derive(Clone, Debug)]
enum Event {
    UserRequest { node: Idx },
    GatewayHttp { gateway: usize },
    Deliver { from: Idx, to: Idx, sent: u64, msg: Msg },
    WantTimeout { node: Idx, cid: Cid, request_id: u64, round: u32 },
    BlockTimeout { node: Idx, cid: Cid, request_id: u64, seq: u64 },
    Rebroadcast { node: Idx, cid: Cid, request_id: u64 },
    Churn { node: Idx },
}

struct Scheduled {
    time: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

struct Gateway {
    dns: String,
    backing: Vec<Idx>,
    next: usize,
    http_functional: bool,
}

struct Monitor {
    name: String,
    node: Idx,
    trace: Vec<TraceRecord>,
    conn_events: Vec<ConnEvent>,
    origins: Vec<RecordOrigin>,
}

/// Traces, connection events and ground truth of a finished run.
pub struct SimOutput {
    pub monitors: Vec<MonitorOutput>,
    pub ground_truth: GroundTruth,
    pub messages: Vec<MessageLogEntry>,
}

pub struct MonitorOutput {
    pub name: String,
    pub id: NodeId,
    pub trace: Vec<TraceRecord>,
    pub conn_events: Vec<ConnEvent>,
}

pub struct Network {
    cfg: SimConfig,
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    nodes: Vec<Node>,
    index: HashMap<NodeId, Idx>,
    monitors: Vec<Monitor>,
    gateways: Vec<Gateway>,
    providers: HashMap<Cid, BTreeSet<Idx>>,
    catalog: Catalog,
    truth: GroundTruth,
    outcomes: HashMap<u64, RetrievalOutcome>,
    /// (prober, target, cid) -> answer once it arrives.
    tpi_pending: HashMap<(Idx, Idx, Cid), Option<bool>>,
    messages: Vec<MessageLogEntry>,
    want_timeout_ns: u64,
    rebroadcast_ns: u64,
}

/// Builds the network described by `cfg`: nodes, the connection graph,
/// monitor links, the catalog with its providers and the initial workload
/// events.
pub fn build_network(cfg: SimConfig) -> Result<Network, SimError> {
    Network::build(cfg)
}

impl Network {
    pub fn build(cfg: SimConfig) -> Result<Network, SimError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let catalog = Catalog::generate(&cfg, &mut rng);
        let mut net = Network {
            want_timeout_ns: secs_to_nanos(cfg.want_timeout_s).max(1),
            rebroadcast_ns: secs_to_nanos(cfg.rebroadcast_interval).max(1),
            rng,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes: Vec::new(),
            index: HashMap::new(),
            monitors: Vec::new(),
            gateways: Vec::new(),
            providers: HashMap::new(),
            catalog,
            truth: GroundTruth::default(),
            outcomes: HashMap::new(),
            tpi_pending: HashMap::new(),
            messages: Vec::new(),
            cfg,
        };
        net.populate()?;
        Ok(net)
    }

    fn populate(&mut self) -> Result<(), SimError> {
        let n_regular = self.cfg.regular_nodes();
        let countries = assign_countries(n_regular, &self.cfg.address_plan, &mut self.rng);
        let mut kinds = Vec::with_capacity(n_regular);
        kinds.extend(std::iter::repeat_n(NodeKind::DhtServer, self.cfg.n_dht_servers));
        kinds.extend(std::iter::repeat_n(NodeKind::DhtClient, self.cfg.n_clients));
        kinds.extend(std::iter::repeat_n(
            NodeKind::Gateway,
            self.cfg.n_gateways * self.cfg.nodes_per_gateway,
        ));
        for (serial, (kind, country)) in kinds.into_iter().zip(countries).enumerate() {
            self.push_node(kind, node_address(country, serial));
        }
        for g in 0..self.cfg.n_gateways {
            let start = self.cfg.n_dht_servers + self.cfg.n_clients + g * self.cfg.nodes_per_gateway;
            let backing: Vec<Idx> = (start..start + self.cfg.nodes_per_gateway)
                .map(|i| i as Idx)
                .collect();
            self.register_gateway(format!("gw{g}.example"), backing);
        }
        for i in 0..self.cfg.n_monitors {
            self.push_node(NodeKind::Monitor, monitor_address(i));
        }
        self.truth.true_n = n_regular;

        self.build_graph(n_regular);
        let monitor_nodes: Vec<Idx> = self.monitors.iter().map(|m| m.node).collect();
        for v in 0..n_regular as Idx {
            for &m in &monitor_nodes {
                if self.rng.random_bool(self.cfg.monitor_connect_fraction) {
                    self.link(v, m);
                }
            }
        }

        // One pinned provider per resolvable item, preferring servers and
        // clients over gateway nodes.
        let hosts = match self.cfg.n_dht_servers + self.cfg.n_clients {
            0 => n_regular,
            k => k,
        };
        if hosts > 0 {
            for i in 0..self.catalog.items.len() {
                if self.catalog.resolvable[i] {
                    let p = self.rng.random_range(0..hosts) as Idx;
                    let cid = self.catalog.items[i];
                    self.nodes[p as usize].store.pin(cid);
                    self.truth.cache_log.stored(self.nodes[p as usize].id, cid, 0);
                    self.providers.entry(cid).or_default().insert(p);
                }
            }
        }

        if self.cfg.request_rate_per_node > 0.0 && !self.catalog.is_empty() {
            let exp = Exp::new(self.cfg.request_rate_per_node).expect("positive rate");
            for v in 0..(self.cfg.n_dht_servers + self.cfg.n_clients) as Idx {
                let t = secs_to_nanos(exp.sample(&mut self.rng));
                self.schedule_at(t, Event::UserRequest { node: v });
            }
        }
        if self.cfg.gateway_http_rate_per_s > 0.0 && !self.catalog.is_empty() {
            let exp = Exp::new(self.cfg.gateway_http_rate_per_s).expect("positive rate");
            for g in 0..self.gateways.len() {
                let t = secs_to_nanos(exp.sample(&mut self.rng));
                self.schedule_at(t, Event::GatewayHttp { gateway: g });
            }
        }
        if let Some(churn) = self.cfg.churn {
            let exp = Exp::new(1.0 / churn.mean_session_s).expect("positive session");
            for v in 0..n_regular as Idx {
                let t = secs_to_nanos(exp.sample(&mut self.rng));
                self.schedule_at(t, Event::Churn { node: v });
            }
        }
        Ok(())
    }

    /// Connects regular nodes towards a per-node target degree drawn from
    /// `degree_range`. Pairs are drawn at random among nodes still below
    /// target; the remainder is matched exhaustively.
    fn build_graph(&mut self, n: usize) {
        if n < 2 {
            return;
        }
        let [lo, hi] = self.cfg.degree_range;
        let hi = hi.min(n - 1);
        let target: Vec<usize> = (0..n).map(|_| self.rng.random_range(lo.min(hi)..=hi)).collect();
        let mut degree = vec![0usize; n];
        let mut open: Vec<Idx> = (0..n as Idx).filter(|&i| target[i as usize] > 0).collect();
        let mut failures = 0usize;
        while open.len() >= 2 && failures < 64 + 4 * open.len() {
            let ia = self.rng.random_range(0..open.len());
            let ib = self.rng.random_range(0..open.len());
            let (a, b) = (open[ia], open[ib]);
            if a == b || self.nodes[a as usize].peers.contains_key(&b) {
                failures += 1;
                continue;
            }
            failures = 0;
            self.link(a, b);
            degree[a as usize] += 1;
            degree[b as usize] += 1;
            let (first, second) = if ia > ib { (ia, ib) } else { (ib, ia) };
            for i in [first, second] {
                if degree[open[i] as usize] >= target[open[i] as usize] {
                    open.swap_remove(i);
                }
            }
        }
        open.sort_unstable();
        for x in 0..open.len() {
            for y in x + 1..open.len() {
                let (a, b) = (open[x], open[y]);
                if degree[a as usize] < target[a as usize]
                    && degree[b as usize] < target[b as usize]
                    && !self.nodes[a as usize].peers.contains_key(&b)
                {
                    self.link(a, b);
                    degree[a as usize] += 1;
                    degree[b as usize] += 1;
                }
            }
        }
    }

    fn push_node(&mut self, kind: NodeKind, address: String) -> Idx {
        let id = loop {
            let id = NodeId::random(&mut self.rng);
            if !self.index.contains_key(&id) {
                break id;
            }
        };
        self.insert_node(id, kind, address)
    }

    fn insert_node(&mut self, id: NodeId, kind: NodeKind, address: String) -> Idx {
        let idx = self.nodes.len() as Idx;
        let monitor = (kind == NodeKind::Monitor).then(|| {
            self.monitors.push(Monitor {
                name: format!("mon{}", self.monitors.len()),
                node: idx,
                trace: Vec::new(),
                conn_events: Vec::new(),
                origins: Vec::new(),
            });
            self.monitors.len() - 1
        });
        self.nodes.push(Node {
            id,
            kind,
            address,
            online: true,
            peers: BTreeMap::new(),
            store: BlockStore::new(self.cfg.cache_capacity_blocks),
            want_entries: HashMap::new(),
            sessions: BTreeMap::new(),
            monitor,
        });
        self.index.insert(id, idx);
        idx
    }

    fn register_gateway(&mut self, dns: String, backing: Vec<Idx>) {
        self.truth.gateway_map.insert(
            dns.clone(),
            backing.iter().map(|&i| self.nodes[i as usize].id).collect(),
        );
        self.gateways.push(Gateway {
            dns,
            backing,
            next: 0,
            http_functional: true,
        });
    }

    // ---- links and connection events ----

    fn link(&mut self, a: Idx, b: Idx) {
        if a == b || self.nodes[a as usize].peers.contains_key(&b) {
            return;
        }
        let latency = self.rng.random_range(LATENCY_RANGE_NS.0..=LATENCY_RANGE_NS.1);
        self.nodes[a as usize].peers.insert(b, latency);
        self.nodes[b as usize].peers.insert(a, latency);
        if self.both_online(a, b) {
            self.conn_event(a, b, ConnKind::Connect);
        }
    }

    fn both_online(&self, a: Idx, b: Idx) -> bool {
        self.nodes[a as usize].online && self.nodes[b as usize].online
    }

    /// Records a connection event if either side is a monitor.
    fn conn_event(&mut self, a: Idx, b: Idx, kind: ConnKind) {
        for (m, peer) in [(a, b), (b, a)] {
            if let Some(mi) = self.nodes[m as usize].monitor {
                let peer_id = self.nodes[peer as usize].id;
                let mon = &mut self.monitors[mi];
                mon.conn_events.push(ConnEvent {
                    timestamp_ns: self.now,
                    monitor: mon.name.clone(),
                    peer: peer_id,
                    kind,
                });
            }
        }
    }

    fn is_monitor_connected(&self, v: Idx) -> bool {
        let node = &self.nodes[v as usize];
        node.online
            && node
                .peers
                .keys()
                .any(|&p| self.nodes[p as usize].monitor.is_some() && self.nodes[p as usize].online)
    }

    // ---- event queue ----

    fn schedule_at(&mut self, time: u64, event: Event) {
        self.seq += 1;
        self.queue.push(Reverse(Scheduled {
            time,
            seq: self.seq,
            event,
        }));
    }

    fn send(&mut self, from: Idx, to: Idx, kind: MsgKind, cid: Cid, origin: Option<RecordOrigin>) {
        let Some(&latency) = self.nodes[from as usize].peers.get(&to) else {
            return;
        };
        if !self.both_online(from, to) {
            return;
        }
        let msg = Msg { kind, cid, origin };
        let sent = self.now;
        self.schedule_at(self.now + latency, Event::Deliver { from, to, sent, msg });
    }

    pub fn now_ns(&self) -> u64 {
        self.now
    }

    /// Processes every event up to and including `t`, then sets the clock
    /// to `t`.
    pub fn run_until(&mut self, t: u64) {
        while self.queue.peek().is_some_and(|Reverse(s)| s.time <= t) {
            let Reverse(s) = self.queue.pop().expect("peeked");
            self.now = s.time;
            self.dispatch(s.event);
        }
        self.now = self.now.max(t);
    }

    /// Runs to the configured duration.
    pub fn run(&mut self) {
        let end = secs_to_nanos(self.cfg.duration_s);
        if end > 0 {
            self.run_until(end);
        }
    }

    pub fn advance_secs(&mut self, secs: f64) {
        self.run_until(self.now + secs_to_nanos(secs));
    }

    fn dispatch(&mut self, event: Event) {
        match event {
            Event::UserRequest { node } => {
                if self.nodes[node as usize].online {
                    if let Some(i) = self.catalog.sample(&mut self.rng) {
                        let cid = self.catalog.items[i];
                        self.issue(node, cid, RequestOrigin::User);
                    }
                }
                let exp = Exp::new(self.cfg.request_rate_per_node).expect("positive rate");
                let t = self.now + secs_to_nanos(exp.sample(&mut self.rng)).max(1);
                self.schedule_at(t, Event::UserRequest { node });
            }
            Event::GatewayHttp { gateway } => {
                if let Some(i) = self.catalog.sample(&mut self.rng) {
                    let cid = self.catalog.items[i];
                    self.http_request(gateway, cid);
                }
                let exp = Exp::new(self.cfg.gateway_http_rate_per_s).expect("positive rate");
                let t = self.now + secs_to_nanos(exp.sample(&mut self.rng)).max(1);
                self.schedule_at(t, Event::GatewayHttp { gateway });
            }
            Event::Deliver { from, to, sent, msg } => self.deliver(from, to, sent, msg),
            Event::WantTimeout {
                node,
                cid,
                request_id,
                round,
            } => {
                let fire = self.nodes[node as usize].sessions.get(&cid).is_some_and(|s| {
                    s.request_id == request_id
                        && s.round == round
                        && s.have_peers.is_empty()
                        && s.searched_round != Some(round)
                });
                if fire {
                    self.dht_search(node, cid);
                }
            }
            Event::BlockTimeout {
                node,
                cid,
                request_id,
                seq,
            } => {
                let fire = self.nodes[node as usize].sessions.get_mut(&cid).is_some_and(|s| {
                    let live = s.request_id == request_id && s.block_seq == seq && s.in_flight.is_some();
                    if live {
                        s.in_flight = None;
                    }
                    live
                });
                if fire {
                    self.want_block(node, cid);
                }
            }
            Event::Rebroadcast {
                node,
                cid,
                request_id,
            } => {
                let live = self.nodes[node as usize]
                    .sessions
                    .get(&cid)
                    .is_some_and(|s| s.request_id == request_id);
                if live {
                    self.rebroadcast(node, cid);
                }
            }
            Event::Churn { node } => self.toggle_online(node),
        }
    }

    // ---- retrieval protocol ----

    fn new_request_id(&self) -> u64 {
        self.truth.requests_issued.len() as u64
    }

    fn issue(&mut self, v: Idx, cid: Cid, origin: RequestOrigin) -> (u64, RetrievalOutcome) {
        let id = self.new_request_id();
        let monitor_connected = self.is_monitor_connected(v);
        self.truth.requests_issued.push(IssuedRequest {
            id,
            time_ns: self.now,
            node: self.nodes[v as usize].id,
            cid,
            origin,
            monitor_connected,
        });
        self.truth.summary.requests += 1;

        let node = &mut self.nodes[v as usize];
        if node.store.contains(&cid) {
            node.store.touch(&cid);
            self.truth.summary.local_hits += 1;
            self.outcomes.insert(id, RetrievalOutcome::LocalHit);
            return (id, RetrievalOutcome::LocalHit);
        }
        self.outcomes.insert(id, RetrievalOutcome::Pending);
        if let Some(s) = node.sessions.get_mut(&cid) {
            s.joined.push(id);
            return (id, RetrievalOutcome::Pending);
        }
        node.sessions.insert(
            cid,
            Session {
                request_id: id,
                ..Session::default()
            },
        );
        self.broadcast_want_have(v, cid);
        self.schedule_at(
            self.now + self.want_timeout_ns,
            Event::WantTimeout {
                node: v,
                cid,
                request_id: id,
                round: 0,
            },
        );
        self.schedule_at(
            self.now + self.rebroadcast_ns,
            Event::Rebroadcast {
                node: v,
                cid,
                request_id: id,
            },
        );
        if self.nodes[v as usize].sessions[&cid].awaiting.is_empty() {
            // Nobody to ask: go straight to the DHT.
            self.dht_search(v, cid);
        }
        (id, RetrievalOutcome::Pending)
    }

    fn origin_of(&self, v: Idx, cid: &Cid) -> Option<RecordOrigin> {
        self.nodes[v as usize].sessions.get(cid).map(|s| RecordOrigin {
            request_id: s.request_id,
            round: s.round,
        })
    }

    fn online_peers(&self, v: Idx) -> Vec<Idx> {
        self.nodes[v as usize]
            .peers
            .keys()
            .copied()
            .filter(|&p| self.nodes[p as usize].online)
            .collect()
    }

    fn broadcast_want_have(&mut self, v: Idx, cid: Cid) {
        let origin = self.origin_of(v, &cid);
        let peers = self.online_peers(v);
        {
            let s = self.nodes[v as usize].sessions.get_mut(&cid).expect("session");
            s.awaiting = peers.iter().copied().collect();
            s.asked.extend(peers.iter().copied());
        }
        for p in peers {
            self.send(v, p, MsgKind::WantHave, cid, origin);
        }
    }

    fn rebroadcast(&mut self, v: Idx, cid: Cid) {
        let request_id = {
            let s = self.nodes[v as usize].sessions.get_mut(&cid).expect("session");
            s.round += 1;
            if s.in_flight.is_none() {
                s.have_peers.clear();
                s.tried.clear();
            }
            s.request_id
        };
        self.truth.summary.rebroadcast_rounds += 1;
        self.broadcast_want_have(v, cid);
        self.dht_search(v, cid);
        self.schedule_at(
            self.now + self.rebroadcast_ns,
            Event::Rebroadcast {
                node: v,
                cid,
                request_id,
            },
        );
    }

    /// Looks up providers, connects to them and asks them directly.
    fn dht_search(&mut self, v: Idx, cid: Cid) {
        let providers: Vec<Idx> = self
            .providers
            .get(&cid)
            .map(|set| {
                set.iter()
                    .copied()
                    .filter(|&p| p != v && self.nodes[p as usize].online)
                    .collect()
            })
            .unwrap_or_default();
        let (round, origin) = {
            let s = self.nodes[v as usize].sessions.get_mut(&cid).expect("session");
            s.searched_round = Some(s.round);
            (
                s.round,
                RecordOrigin {
                    request_id: s.request_id,
                    round: s.round,
                },
            )
        };
        let _ = round;
        for p in providers {
            self.link(v, p);
            let fresh = {
                let s = self.nodes[v as usize].sessions.get_mut(&cid).expect("session");
                let fresh = !s.awaiting.contains(&p) && !s.have_peers.contains(&p);
                if fresh {
                    s.awaiting.insert(p);
                    s.asked.insert(p);
                }
                fresh
            };
            if fresh {
                self.send(v, p, MsgKind::WantHave, cid, Some(origin));
            }
        }
    }

    /// Sends WANT_BLOCK to the earliest HAVE sender not yet tried.
    fn want_block(&mut self, v: Idx, cid: Cid) {
        let online: Vec<bool> = self.nodes.iter().map(|n| n.online).collect();
        let node = &mut self.nodes[v as usize];
        let Some(s) = node.sessions.get_mut(&cid) else {
            return;
        };
        if s.in_flight.is_some() {
            return;
        }
        let next = s
            .have_peers
            .iter()
            .copied()
            .find(|p| !s.tried.contains(p) && node.peers.contains_key(p) && online[*p as usize]);
        let Some(p) = next else {
            return;
        };
        s.in_flight = Some(p);
        s.tried.insert(p);
        s.asked.insert(p);
        s.block_seq += 1;
        let (seq, request_id, origin) = (
            s.block_seq,
            s.request_id,
            RecordOrigin {
                request_id: s.request_id,
                round: s.round,
            },
        );
        self.send(v, p, MsgKind::WantBlock, cid, Some(origin));
        self.schedule_at(
            self.now + self.want_timeout_ns,
            Event::BlockTimeout {
                node: v,
                cid,
                request_id,
                seq,
            },
        );
    }

    fn complete(&mut self, v: Idx, cid: Cid, provider: Idx) {
        let Some(s) = self.nodes[v as usize].sessions.remove(&cid) else {
            return;
        };
        let outcome = RetrievalOutcome::Fetched(self.nodes[provider as usize].id);
        self.outcomes.insert(s.request_id, outcome);
        for id in &s.joined {
            self.outcomes.insert(*id, outcome);
        }
        self.truth.summary.fetched += 1;
        self.store_block(v, cid);
        let origin = RecordOrigin {
            request_id: s.request_id,
            round: s.round,
        };
        for p in s.asked {
            self.send(v, p, MsgKind::Cancel, cid, Some(origin));
        }
        self.serve_waiting(v, cid);
    }

    /// Answers wants that peers left with `v` before it had the block.
    fn serve_waiting(&mut self, v: Idx, cid: Cid) {
        let Some(entries) = self.nodes[v as usize].want_entries.get(&cid).cloned() else {
            return;
        };
        for (p, kind) in entries {
            match kind {
                MsgKind::WantHave => self.send(v, p, MsgKind::Have, cid, None),
                MsgKind::WantBlock => {
                    self.send(v, p, MsgKind::Block, cid, None);
                    self.remove_want_entry(v, p, &cid);
                }
                _ => {}
            }
        }
    }

    fn store_block(&mut self, v: Idx, cid: Cid) {
        let id = self.nodes[v as usize].id;
        let evicted = self.nodes[v as usize].store.insert(cid);
        if self.nodes[v as usize].store.contains(&cid) {
            self.truth.cache_log.stored(id, cid, self.now);
            self.providers.entry(cid).or_default().insert(v);
        }
        for e in evicted {
            self.truth.cache_log.dropped(id, e, self.now);
            self.unprovide(v, &e);
        }
    }

    fn unprovide(&mut self, v: Idx, cid: &Cid) {
        if let Some(set) = self.providers.get_mut(cid) {
            set.remove(&v);
            if set.is_empty() {
                self.providers.remove(cid);
            }
        }
    }

    fn remove_want_entry(&mut self, v: Idx, peer: Idx, cid: &Cid) {
        let wants = &mut self.nodes[v as usize].want_entries;
        if let Some(m) = wants.get_mut(cid) {
            m.remove(&peer);
            if m.is_empty() {
                wants.remove(cid);
            }
        }
    }

    fn deliver(&mut self, from: Idx, to: Idx, sent: u64, msg: Msg) {
        if !self.both_online(from, to) || !self.nodes[to as usize].peers.contains_key(&from) {
            return;
        }
        self.truth.summary.messages_delivered += 1;
        if self.cfg.record_messages {
            self.messages.push(MessageLogEntry {
                sent_ns: sent,
                recv_ns: self.now,
                from: self.nodes[from as usize].id,
                to: self.nodes[to as usize].id,
                kind: msg.kind,
                cid: msg.cid,
            });
        }
        let cid = msg.cid;
        if let Some(mi) = self.nodes[to as usize].monitor {
            self.monitor_receive(mi, to, from, msg);
            return;
        }
        match msg.kind {
            MsgKind::WantHave | MsgKind::WantBlock => {
                self.nodes[to as usize]
                    .want_entries
                    .entry(cid)
                    .or_default()
                    .insert(from, msg.kind);
                let has = self.nodes[to as usize].store.contains(&cid);
                if has {
                    self.nodes[to as usize].store.touch(&cid);
                }
                match (msg.kind, has) {
                    (MsgKind::WantHave, true) => self.send(to, from, MsgKind::Have, cid, None),
                    (MsgKind::WantHave, false) => self.send(to, from, MsgKind::DontHave, cid, None),
                    (MsgKind::WantBlock, true) => {
                        self.send(to, from, MsgKind::Block, cid, None);
                        self.remove_want_entry(to, from, &cid);
                    }
                    _ => {}
                }
            }
            MsgKind::Cancel => self.remove_want_entry(to, from, &cid),
            MsgKind::Have | MsgKind::DontHave => {
                let have = msg.kind == MsgKind::Have;
                if let Some(slot) = self.tpi_pending.get_mut(&(to, from, cid)) {
                    if slot.is_none() {
                        *slot = Some(have);
                    }
                    return;
                }
                let search = {
                    let Some(s) = self.nodes[to as usize].sessions.get_mut(&cid) else {
                        return;
                    };
                    s.awaiting.remove(&from);
                    if have && !s.have_peers.contains(&from) {
                        s.have_peers.push(from);
                    }
                    !have
                        && s.awaiting.is_empty()
                        && s.have_peers.is_empty()
                        && s.in_flight.is_none()
                        && s.searched_round != Some(s.round)
                };
                if have {
                    self.want_block(to, cid);
                } else if search {
                    self.dht_search(to, cid);
                }
            }
            MsgKind::Block => self.complete(to, cid, from),
        }
    }

    /// Monitors log every want-list entry and otherwise stay silent, except
    /// that they serve blocks they hold themselves.
    fn monitor_receive(&mut self, mi: usize, me: Idx, from: Idx, msg: Msg) {
        if let Some(request_type) = msg.kind.request_type() {
            let sender = &self.nodes[from as usize];
            let record = TraceRecord {
                timestamp_ns: self.now,
                monitor: self.monitors[mi].name.clone(),
                peer: sender.id,
                address: sender.address.clone(),
                request_type,
                cid: msg.cid,
                flags: Flags::default(),
            };
            let origin = msg.origin.unwrap_or(RecordOrigin {
                request_id: u64::MAX,
                round: 0,
            });
            self.monitors[mi].trace.push(record);
            self.monitors[mi].origins.push(origin);
        }
        if self.nodes[me as usize].store.contains(&msg.cid) {
            match msg.kind {
                MsgKind::WantHave => self.send(me, from, MsgKind::Have, msg.cid, None),
                MsgKind::WantBlock => self.send(me, from, MsgKind::Block, msg.cid, None),
                _ => {}
            }
        }
    }

    fn toggle_online(&mut self, v: Idx) {
        let Some(churn) = self.cfg.churn else {
            return;
        };
        let going_online = !self.nodes[v as usize].online;
        self.set_online_inner(v, going_online);
        let mean = if going_online {
            churn.mean_session_s
        } else {
            churn.mean_offline_s
        };
        let exp = Exp::new(1.0 / mean).expect("positive mean");
        let t = self.now + secs_to_nanos(exp.sample(&mut self.rng)).max(1);
        self.schedule_at(t, Event::Churn { node: v });
    }

    fn set_online_inner(&mut self, v: Idx, online: bool) {
        if self.nodes[v as usize].online == online {
            return;
        }
        let peers: Vec<Idx> = self.nodes[v as usize]
            .peers
            .keys()
            .copied()
            .filter(|&p| self.nodes[p as usize].online)
            .collect();
        if online {
            self.nodes[v as usize].online = true;
            for p in peers {
                self.conn_event(v, p, ConnKind::Connect);
            }
        } else {
            for &p in &peers {
                self.conn_event(v, p, ConnKind::Disconnect);
                // Peers forget our wants when the connection drops.
                let wants = &mut self.nodes[p as usize].want_entries;
                wants.retain(|_, m| {
                    m.remove(&v);
                    !m.is_empty()
                });
            }
            let node = &mut self.nodes[v as usize];
            node.online = false;
            node.want_entries.clear();
            // A restarted node has lost its running sessions.
            node.sessions.clear();
        }
    }

    fn http_request(&mut self, g: usize, cid: Cid) -> GatewayOutcome {
        self.truth.summary.gateway_http_requests += 1;
        if self.rng.random_bool(self.cfg.gateway_cache_hit_ratio) {
            self.truth.summary.gateway_cache_hits += 1;
            return GatewayOutcome::CacheHit;
        }
        let gw = &mut self.gateways[g];
        let node = gw.backing[gw.next % gw.backing.len()];
        gw.next = (gw.next + 1) % gw.backing.len();
        let origin = RequestOrigin::Gateway(gw.dns.clone());
        let (request_id, _) = self.issue(node, cid, origin);
        GatewayOutcome::Forwarded {
            node: self.nodes[node as usize].id,
            request_id,
        }
    }

    // ---- public scripting API ----

    fn idx(&self, id: NodeId) -> Result<Idx, SimError> {
        self.index.get(&id).copied().ok_or(SimError::UnknownNode(id))
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    /// Adds a node with a fresh random id.
    pub fn add_node(&mut self, kind: NodeKind, address: &str) -> NodeId {
        let idx = self.push_node(kind, address.to_string());
        if kind != NodeKind::Monitor {
            self.truth.true_n += 1;
        }
        self.nodes[idx as usize].id
    }

    /// Adds a node with a chosen id.
    pub fn add_node_with_id(
        &mut self,
        id: NodeId,
        kind: NodeKind,
        address: &str,
    ) -> Result<NodeId, SimError> {
        if self.index.contains_key(&id) {
            return Err(SimError::DuplicateNode(id));
        }
        self.insert_node(id, kind, address.to_string());
        if kind != NodeKind::Monitor {
            self.truth.true_n += 1;
        }
        Ok(id)
    }

    /// Registers a gateway DNS name served by the given nodes.
    pub fn add_gateway(&mut self, dns: &str, backing: &[NodeId]) -> Result<(), SimError> {
        if backing.is_empty() {
            return Err(SimError::Config {
                field: "gateway".into(),
                msg: "needs at least one backing node".into(),
            });
        }
        let backing = backing
            .iter()
            .map(|&id| self.idx(id))
            .collect::<Result<Vec<_>, _>>()?;
        self.register_gateway(dns.to_string(), backing);
        Ok(())
    }

    pub fn set_gateway_http_functional(&mut self, dns: &str, functional: bool) -> Result<(), SimError> {
        let g = self.gateway_index(dns)?;
        self.gateways[g].http_functional = functional;
        Ok(())
    }

    pub fn gateway_http_functional(&self, dns: &str) -> Result<bool, SimError> {
        Ok(self.gateways[self.gateway_index(dns)?].http_functional)
    }

    fn gateway_index(&self, dns: &str) -> Result<usize, SimError> {
        self.gateways
            .iter()
            .position(|g| g.dns == dns)
            .ok_or_else(|| SimError::UnknownGateway(dns.to_string()))
    }

    pub fn gateway_names(&self) -> Vec<String> {
        self.gateways.iter().map(|g| g.dns.clone()).collect()
    }

    pub fn connect(&mut self, a: NodeId, b: NodeId) -> Result<(), SimError> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.link(a, b);
        Ok(())
    }

    pub fn is_connected(&self, a: NodeId, b: NodeId) -> bool {
        match (self.index.get(&a), self.index.get(&b)) {
            (Some(&a), Some(b)) => self.nodes[a as usize].peers.contains_key(b),
            _ => false,
        }
    }

    /// Number of non-monitor peers.
    pub fn degree(&self, id: NodeId) -> Result<usize, SimError> {
        let v = self.idx(id)?;
        Ok(self.nodes[v as usize]
            .peers
            .keys()
            .filter(|&&p| self.nodes[p as usize].monitor.is_none())
            .count())
    }

    pub fn kind(&self, id: NodeId) -> Result<NodeKind, SimError> {
        Ok(self.nodes[self.idx(id)? as usize].kind)
    }

    pub fn address(&self, id: NodeId) -> Result<&str, SimError> {
        Ok(&self.nodes[self.idx(id)? as usize].address)
    }

    /// Changes a node's endpoint, as after a re-dial from a new IP.
    pub fn set_address(&mut self, id: NodeId, address: &str) -> Result<(), SimError> {
        let v = self.idx(id)?;
        self.nodes[v as usize].address = address.to_string();
        Ok(())
    }

    pub fn is_online(&self, id: NodeId) -> Result<bool, SimError> {
        Ok(self.nodes[self.idx(id)? as usize].online)
    }

    /// Takes a node offline or brings it back, with the same side effects
    /// as churn.
    pub fn set_online(&mut self, id: NodeId, online: bool) -> Result<(), SimError> {
        let v = self.idx(id)?;
        if self.nodes[v as usize].kind == NodeKind::Monitor {
            return Err(SimError::MonitorAction(id));
        }
        self.set_online_inner(v, online);
        Ok(())
    }

    pub fn node_ids(&self, kind: NodeKind) -> Vec<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.kind == kind)
            .map(|n| n.id)
            .collect()
    }

    pub fn monitor_ids(&self) -> Vec<NodeId> {
        self.monitors.iter().map(|m| self.nodes[m.node as usize].id).collect()
    }

    pub fn monitor_name(&self, id: NodeId) -> Option<&str> {
        let v = *self.index.get(&id)?;
        self.nodes[v as usize]
            .monitor
            .map(|mi| self.monitors[mi].name.as_str())
    }

    /// Stores a block at a node, pinned.
    pub fn insert_block(&mut self, id: NodeId, cid: Cid) -> Result<(), SimError> {
        let v = self.idx(id)?;
        self.nodes[v as usize].store.pin(cid);
        self.truth.cache_log.stored(id, cid, self.now);
        Ok(())
    }

    pub fn dht_provide(&mut self, id: NodeId, cid: Cid) -> Result<(), SimError> {
        let v = self.idx(id)?;
        self.providers.entry(cid).or_default().insert(v);
        Ok(())
    }

    /// Nodes that announced `cid` and are online now.
    pub fn dht_find_providers(&self, cid: &Cid) -> BTreeSet<NodeId> {
        self.providers
            .get(cid)
            .into_iter()
            .flatten()
            .filter(|&&p| self.nodes[p as usize].online)
            .map(|&p| self.nodes[p as usize].id)
            .collect()
    }

    /// Normalised XOR distance from `target` to the closest online DHT
    /// server.
    pub fn sample_min_distance(&self, target: NodeId) -> Result<f64, SimError> {
        self.nodes
            .iter()
            .filter(|n| n.online && matches!(n.kind, NodeKind::DhtServer | NodeKind::Gateway))
            .map(|n| (n.id ^ target).position())
            .min_by(f64::total_cmp)
            .ok_or(SimError::NoDhtServers)
    }

    pub fn cached(&self, id: NodeId, cid: &Cid) -> bool {
        self.index
            .get(&id)
            .is_some_and(|&v| self.nodes[v as usize].store.contains(cid))
    }

    pub fn cached_blocks(&self, id: NodeId) -> Result<usize, SimError> {
        Ok(self.nodes[self.idx(id)? as usize].store.cached_len())
    }

    pub fn purge_cache(&mut self, id: NodeId, what: Purge) -> Result<(), SimError> {
        let v = self.idx(id)?;
        let cids = match what {
            Purge::One(cid) => vec![cid],
            Purge::All => self.nodes[v as usize].store.all(),
        };
        for cid in cids {
            if self.nodes[v as usize].store.remove(&cid) {
                self.truth.cache_log.dropped(id, cid, self.now);
                self.unprovide(v, &cid);
            }
        }
        Ok(())
    }

    /// Starts a retrieval without advancing the clock.
    pub fn issue_request(
        &mut self,
        id: NodeId,
        cid: Cid,
        origin: RequestOrigin,
    ) -> Result<(u64, RetrievalOutcome), SimError> {
        let v = self.idx(id)?;
        if self.nodes[v as usize].kind == NodeKind::Monitor {
            return Err(SimError::MonitorAction(id));
        }
        if !self.nodes[v as usize].online {
            return Err(SimError::Offline(id));
        }
        Ok(self.issue(v, cid, origin))
    }

    /// Retrieves `cid` at `node`, advancing the simulation until the block
    /// arrives or the node falls into its re-broadcast loop.
    pub fn node_request(&mut self, id: NodeId, cid: Cid) -> Result<RetrievalOutcome, SimError> {
        let (request_id, outcome) = self.issue_request(id, cid, RequestOrigin::Script)?;
        if outcome == RetrievalOutcome::LocalHit {
            return Ok(outcome);
        }
        let deadline = self.now + self.rebroadcast_ns - 1;
        while self.outcomes[&request_id] == RetrievalOutcome::Pending {
            match self.queue.peek() {
                Some(Reverse(s)) if s.time <= deadline => {
                    let Reverse(s) = self.queue.pop().expect("peeked");
                    self.now = s.time;
                    self.dispatch(s.event);
                }
                _ => break,
            }
        }
        Ok(self.outcomes[&request_id])
    }

    pub fn request_outcome(&self, request_id: u64) -> Option<RetrievalOutcome> {
        self.outcomes.get(&request_id).copied()
    }

    /// An HTTP request for `cid` at the named gateway.
    pub fn gateway_http_request(&mut self, dns: &str, cid: Cid) -> Result<GatewayOutcome, SimError> {
        let g = self.gateway_index(dns)?;
        Ok(self.http_request(g, cid))
    }

    /// Sends WANT_HAVE for `cid` from `prober` to `target` and reports
    /// whether the target answered HAVE within the want timeout.
    pub(crate) fn probe_have(&mut self, prober: NodeId, target: NodeId, cid: Cid) -> Result<bool, SimError> {
        let (p, t) = (self.idx(prober)?, self.idx(target)?);
        if self.nodes[p as usize].kind == NodeKind::Monitor {
            return Err(SimError::MonitorAction(prober));
        }
        if !self.nodes[p as usize].online {
            return Err(SimError::Offline(prober));
        }
        if !self.nodes[t as usize].online {
            return Err(SimError::ProbeUnreachable(target));
        }
        self.link(p, t);
        let request_id = self.new_request_id();
        self.truth.requests_issued.push(IssuedRequest {
            id: request_id,
            time_ns: self.now,
            node: prober,
            cid,
            origin: RequestOrigin::Script,
            monitor_connected: self.is_monitor_connected(p),
        });
        let origin = Some(RecordOrigin {
            request_id,
            round: 0,
        });
        self.tpi_pending.insert((p, t, cid), None);
        self.send(p, t, MsgKind::WantHave, cid, origin);
        let deadline = self.now + self.want_timeout_ns;
        while self.tpi_pending[&(p, t, cid)].is_none() {
            match self.queue.peek() {
                Some(Reverse(s)) if s.time <= deadline => {
                    let Reverse(s) = self.queue.pop().expect("peeked");
                    self.now = s.time;
                    self.dispatch(s.event);
                }
                _ => break,
            }
        }
        let answer = self.tpi_pending.remove(&(p, t, cid)).flatten().unwrap_or(false);
        self.send(p, t, MsgKind::Cancel, cid, origin);
        Ok(answer)
    }

    /// Trace records collected so far by the named monitor.
    pub fn trace(&self, monitor: &str) -> Option<&[TraceRecord]> {
        self.monitors
            .iter()
            .find(|m| m.name == monitor)
            .map(|m| m.trace.as_slice())
    }

    /// Trace records of every monitor, in monitor order.
    pub fn traces(&self) -> Vec<(&str, &[TraceRecord])> {
        self.monitors
            .iter()
            .map(|m| (m.name.as_str(), m.trace.as_slice()))
            .collect()
    }

    pub fn conn_events(&self, monitor: &str) -> Option<&[ConnEvent]> {
        self.monitors
            .iter()
            .find(|m| m.name == monitor)
            .map(|m| m.conn_events.as_slice())
    }

    pub fn ground_truth(&self) -> &GroundTruth {
        &self.truth
    }

    pub fn messages(&self) -> &[MessageLogEntry] {
        &self.messages
    }

    pub fn catalog_items(&self) -> &[Cid] {
        &self.catalog.items
    }

    pub fn catalog_resolvable(&self) -> &[bool] {
        &self.catalog.resolvable
    }

    /// Random bytes from the network's own generator.
    pub fn random_block(&mut self, len: usize) -> Vec<u8> {
        let mut v = vec![0u8; len];
        self.rng.fill(v.as_mut_slice());
        v
    }

    /// A shuffled copy, drawn from the network's generator.
    pub fn shuffled<T: Clone>(&mut self, items: &[T]) -> Vec<T> {
        let mut v = items.to_vec();
        v.shuffle(&mut self.rng);
        v
    }

    /// Stops the run and hands out traces and ground truth.
    pub fn finish(mut self) -> SimOutput {
        let pending: usize = self.nodes.iter().map(|n| n.sessions.len()).sum();
        self.truth.summary.pending_at_end = pending as u64;
        let mut monitors = Vec::with_capacity(self.monitors.len());
        for m in self.monitors {
            self.truth
                .summary
                .trace_records
                .insert(m.name.clone(), m.trace.len() as u64);
            self.truth
                .summary
                .conn_events
                .insert(m.name.clone(), m.conn_events.len() as u64);
            self.truth.record_origins.insert(m.name.clone(), m.origins);
            monitors.push(MonitorOutput {
                name: m.name,
                id: self.nodes[m.node as usize].id,
                trace: m.trace,
                conn_events: m.conn_events,
            });
        }
        SimOutput {
            monitors,
            ground_truth: self.truth,
            messages: self.messages,
        }
    }
}

/// Builds, runs for the configured duration and finishes.
pub fn run(cfg: SimConfig) -> Result<SimOutput, SimError> {
    let mut net = Network::build(cfg)?;
    net.run();
    Ok(net.finish())
}
