//! Scripted topologies checked against hand-computed message schedules.

use wantscope_core::{secs_to_nanos, Cid, Codec, NodeId, RequestType, NANOS_PER_SEC};
use wantscope_netsim::{
    MsgKind, Network, NodeKind, RequestOrigin, RetrievalOutcome, SimConfig,
};

fn scripted() -> Network {
    Network::build(SimConfig {
        record_messages: true,
        ..SimConfig::default()
    })
    .unwrap()
}

fn node(net: &mut Network, kind: NodeKind, i: u8) -> NodeId {
    net.add_node(kind, &format!("/ip4/20.0.0.{i}/tcp/4001"))
}

fn block(i: u8) -> Cid {
    Cid::hash_content(&[i; 16], Codec::Raw)
}

/// Messages between `a` and `b` (either direction) in delivery order,
/// without DONT_HAVE.
fn exchange(net: &Network, a: NodeId, b: NodeId) -> Vec<MsgKind> {
    net.messages()
        .iter()
        .filter(|m| (m.from == a && m.to == b) || (m.from == b && m.to == a))
        .filter(|m| m.kind != MsgKind::DontHave)
        .map(|m| m.kind)
        .collect()
}

#[test]
fn single_provider_exchange_matches_the_four_party_shape() {
    let mut net = scripted();
    let r = node(&mut net, NodeKind::DhtServer, 1);
    let p = node(&mut net, NodeKind::DhtServer, 2);
    let q = node(&mut net, NodeKind::DhtServer, 3);
    let m = node(&mut net, NodeKind::Monitor, 4);
    for other in [p, q, m] {
        net.connect(r, other).unwrap();
    }
    let c = block(1);
    net.insert_block(p, c).unwrap();

    assert_eq!(net.node_request(r, c).unwrap(), RetrievalOutcome::Fetched(p));
    net.advance_secs(1.0);

    use MsgKind::*;
    assert_eq!(exchange(&net, r, p), vec![WantHave, Have, WantBlock, Block, Cancel]);
    assert_eq!(exchange(&net, r, q), vec![WantHave, Cancel]);
    let kinds: Vec<RequestType> = net.trace("mon0").unwrap().iter().map(|t| t.request_type).collect();
    assert_eq!(kinds, vec![RequestType::WantHave, RequestType::Cancel]);
    assert!(net.cached(r, &c));
    assert!(net.ground_truth().cached(r, c, net.now_ns()));
}

#[test]
fn local_hit_sends_nothing() {
    let mut net = scripted();
    let r = node(&mut net, NodeKind::DhtClient, 1);
    let p = node(&mut net, NodeKind::DhtServer, 2);
    net.connect(r, p).unwrap();
    let c = block(2);
    net.insert_block(r, c).unwrap();
    assert_eq!(net.node_request(r, c).unwrap(), RetrievalOutcome::LocalHit);
    net.advance_secs(60.0);
    assert!(net.messages().is_empty());
}

#[test]
fn provider_found_through_the_dht() {
    let mut net = scripted();
    let r = node(&mut net, NodeKind::DhtServer, 1);
    let q = node(&mut net, NodeKind::DhtServer, 2);
    let p = node(&mut net, NodeKind::DhtServer, 3);
    net.connect(r, q).unwrap();
    let c = block(3);
    net.insert_block(p, c).unwrap();
    net.dht_provide(p, c).unwrap();
    assert!(!net.is_connected(r, p));

    assert_eq!(net.node_request(r, c).unwrap(), RetrievalOutcome::Fetched(p));
    assert!(net.is_connected(r, p));
    let log = net.messages();
    let dont_have = log
        .iter()
        .position(|m| m.from == q && m.kind == MsgKind::DontHave)
        .unwrap();
    let second_want = log
        .iter()
        .position(|m| m.from == r && m.to == p && m.kind == MsgKind::WantHave)
        .unwrap();
    assert!(dont_have < second_want);
}

#[test]
fn silent_peers_trigger_the_timeout_fallback() {
    // A monitor never answers, so only the 1 s timeout gets us to the DHT.
    let mut net = scripted();
    let r = node(&mut net, NodeKind::DhtServer, 1);
    let m = node(&mut net, NodeKind::Monitor, 2);
    let p = node(&mut net, NodeKind::DhtServer, 3);
    net.connect(r, m).unwrap();
    let c = block(4);
    net.insert_block(p, c).unwrap();
    net.dht_provide(p, c).unwrap();
    assert_eq!(net.node_request(r, c).unwrap(), RetrievalOutcome::Fetched(p));
    let asked_p = net
        .messages()
        .iter()
        .find(|m| m.from == r && m.to == p && m.kind == MsgKind::WantHave)
        .unwrap();
    assert!(asked_p.sent_ns >= NANOS_PER_SEC);
}

#[test]
fn unresolvable_request_rebroadcasts_every_interval() {
    let mut net = scripted();
    let r = node(&mut net, NodeKind::DhtServer, 1);
    let m = node(&mut net, NodeKind::Monitor, 2);
    net.connect(r, m).unwrap();
    let c = block(5);
    let (_, outcome) = net.issue_request(r, c, RequestOrigin::Script).unwrap();
    assert_eq!(outcome, RetrievalOutcome::Pending);
    net.run_until(secs_to_nanos(95.0));

    let trace = net.trace("mon0").unwrap();
    assert_eq!(trace.len(), 4);
    assert!(trace.iter().all(|t| t.request_type == RequestType::WantHave && t.peer == r));
    for w in trace.windows(2) {
        let gap = w[1].timestamp_ns - w[0].timestamp_ns;
        assert_eq!(gap, secs_to_nanos(30.0));
    }
    let origins = &net.finish().ground_truth;
    assert_eq!(origins.summary.pending_at_end, 1);
}

#[test]
fn node_request_returns_pending_for_unresolvable() {
    let mut net = scripted();
    let r = node(&mut net, NodeKind::DhtServer, 1);
    let q = node(&mut net, NodeKind::DhtServer, 2);
    net.connect(r, q).unwrap();
    assert_eq!(net.node_request(r, block(6)).unwrap(), RetrievalOutcome::Pending);
    assert!(net.now_ns() < secs_to_nanos(30.0));
}

#[test]
fn two_monitors_see_the_request_within_link_skew() {
    let mut net = scripted();
    let r = node(&mut net, NodeKind::DhtServer, 1);
    let m0 = node(&mut net, NodeKind::Monitor, 2);
    let m1 = node(&mut net, NodeKind::Monitor, 3);
    net.connect(r, m0).unwrap();
    net.connect(r, m1).unwrap();
    net.issue_request(r, block(7), RequestOrigin::Script).unwrap();
    net.advance_secs(1.0);
    let t0 = net.trace("mon0").unwrap()[0].timestamp_ns;
    let t1 = net.trace("mon1").unwrap()[0].timestamp_ns;
    let skew = t0.abs_diff(t1);
    assert!(skew <= secs_to_nanos(0.19), "skew {skew}");
}

#[test]
fn monitors_cannot_request() {
    let mut net = scripted();
    let m = node(&mut net, NodeKind::Monitor, 1);
    assert!(net.node_request(m, block(8)).is_err());
}

#[test]
fn want_entries_persist_until_the_block_arrives() {
    // r asks p, which lacks the block. Later p fetches it from s and,
    // remembering r's want, tells r it now has it.
    let mut net = scripted();
    let r = node(&mut net, NodeKind::DhtServer, 1);
    let p = node(&mut net, NodeKind::DhtServer, 2);
    let s = node(&mut net, NodeKind::DhtServer, 3);
    net.connect(r, p).unwrap();
    net.connect(p, s).unwrap();
    let c = block(9);
    net.insert_block(s, c).unwrap();

    assert_eq!(net.node_request(r, c).unwrap(), RetrievalOutcome::Pending);
    let (rid, _) = net.issue_request(p, c, RequestOrigin::Script).unwrap();
    net.advance_secs(2.0);
    assert_eq!(net.request_outcome(rid), Some(RetrievalOutcome::Fetched(s)));
    assert!(net.cached(r, &c), "r should have been served by p");
    let first_r = net.ground_truth().requests_issued[0].id;
    assert_eq!(net.request_outcome(first_r), Some(RetrievalOutcome::Fetched(p)));
}

#[test]
fn cancel_removes_want_entries() {
    // After r's request completes its want is gone, so a later fetch by p
    // must not push anything to r.
    let mut net = scripted();
    let r = node(&mut net, NodeKind::DhtServer, 1);
    let p = node(&mut net, NodeKind::DhtServer, 2);
    let s = node(&mut net, NodeKind::DhtServer, 3);
    net.connect(r, p).unwrap();
    net.connect(r, s).unwrap();
    net.connect(p, s).unwrap();
    let c = block(10);
    net.insert_block(s, c).unwrap();
    assert_eq!(net.node_request(r, c).unwrap(), RetrievalOutcome::Fetched(s));
    net.advance_secs(1.0);
    let before = net.messages().len();
    assert!(matches!(net.node_request(p, c).unwrap(), RetrievalOutcome::Fetched(_)));
    net.advance_secs(1.0);
    assert!(!net.messages()[before..]
        .iter()
        .any(|m| m.from == p && m.to == r && matches!(m.kind, MsgKind::Have | MsgKind::Block)));
}
