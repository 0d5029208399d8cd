use std::collections::BTreeSet;

use wantscope_core::pipeline::{process, Windows};
use wantscope_core::{Cid, Codec, NodeId, RequestType};
use wantscope_netsim::probes::{
    cross_reference, idw, probe_gateway, probe_gateway_saturated, tnw, tpi, SATURATION_K,
};
use wantscope_netsim::{Network, NodeKind, Purge, RequestOrigin, RetrievalOutcome, SimConfig, SimError};

fn block(i: u32) -> Cid {
    Cid::hash_content(&i.to_le_bytes(), Codec::DagProtobuf)
}

fn addr(i: usize) -> String {
    format!("/ip4/20.0.{}.{}/tcp/4001", i / 256, i % 256)
}

#[test]
fn tpi_follows_the_cache_lifecycle() {
    let mut net = Network::build(SimConfig::default()).unwrap();
    let prober = net.add_node(NodeKind::DhtClient, &addr(1));
    let target = net.add_node(NodeKind::DhtServer, &addr(2));
    let source = net.add_node(NodeKind::DhtServer, &addr(3));
    net.connect(target, source).unwrap();
    let c = block(1);
    net.insert_block(source, c).unwrap();

    let check = |net: &mut Network, expect: bool| {
        let t = net.now_ns();
        let oracle = net.ground_truth().cached(target, c, t);
        let got = tpi(net, prober, target, c).unwrap();
        assert_eq!(got, oracle);
        assert_eq!(got, expect);
    };
    check(&mut net, false);
    assert!(matches!(net.node_request(target, c).unwrap(), RetrievalOutcome::Fetched(_)));
    check(&mut net, true);
    net.purge_cache(target, Purge::One(c)).unwrap();
    check(&mut net, false);
    assert!(matches!(net.node_request(target, c).unwrap(), RetrievalOutcome::Fetched(_)));
    check(&mut net, true);
    net.purge_cache(target, Purge::All).unwrap();
    check(&mut net, false);
}

#[test]
fn tpi_on_offline_target_is_unreachable() {
    let mut net = Network::build(SimConfig::default()).unwrap();
    let prober = net.add_node(NodeKind::DhtClient, &addr(1));
    let target = net.add_node(NodeKind::DhtServer, &addr(2));
    net.set_online(target, false).unwrap();
    assert_eq!(
        tpi(&mut net, prober, target, block(1)),
        Err(SimError::ProbeUnreachable(target))
    );
}

fn gateway_net(backing: usize, monitors: usize, seed: u64) -> (Network, Vec<NodeId>, Vec<NodeId>) {
    let mut net = Network::build(SimConfig {
        seed,
        ..SimConfig::default()
    })
    .unwrap();
    let mons: Vec<NodeId> = (0..monitors)
        .map(|i| net.add_node(NodeKind::Monitor, &format!("/ip4/192.0.2.{i}/tcp/4001")))
        .collect();
    let others: Vec<NodeId> = (0..20)
        .map(|i| net.add_node(NodeKind::DhtServer, &addr(100 + i)))
        .collect();
    let nodes: Vec<NodeId> = (0..backing)
        .map(|i| net.add_node(NodeKind::Gateway, &addr(i)))
        .collect();
    for &g in &nodes {
        for &o in &others {
            net.connect(g, o).unwrap();
        }
    }
    (net, nodes, mons)
}

#[test]
fn single_node_gateway_is_found() {
    let (mut net, nodes, mons) = gateway_net(1, 2, 1);
    net.add_gateway("gw0.example", &nodes).unwrap();
    let res = probe_gateway(&mut net, "gw0.example", &mons, 7).unwrap();
    assert_eq!(res.discovered_node_ids, nodes.iter().copied().collect::<BTreeSet<_>>());
    assert_eq!(res.http_succeeded, vec![true]);
    assert_eq!(res.probes_sent, 1);
}

#[test]
fn thirteen_node_gateway_saturates() {
    let (mut net, nodes, mons) = gateway_net(13, 1, 2);
    net.add_gateway("big.example", &nodes).unwrap();
    let res = probe_gateway_saturated(&mut net, "big.example", &mons, 3).unwrap();
    assert_eq!(res.discovered_node_ids.len(), 13);
    assert_eq!(res.discovered_node_ids, nodes.iter().copied().collect::<BTreeSet<_>>());
    assert_eq!(res.probes_sent, 13 + SATURATION_K);
    let distinct: BTreeSet<Cid> = res.probe_cids.iter().copied().collect();
    assert_eq!(distinct.len(), res.probes_sent);
}

#[test]
fn two_gateways_no_cross_attribution() {
    let (mut net, nodes, mons) = gateway_net(4, 2, 3);
    net.add_gateway("a.example", &nodes[..2]).unwrap();
    net.add_gateway("b.example", &nodes[2..]).unwrap();
    let a = probe_gateway_saturated(&mut net, "a.example", &mons, 10).unwrap();
    let b = probe_gateway_saturated(&mut net, "b.example", &mons, 11).unwrap();
    let truth = net.ground_truth().gateway_map.clone();
    let expect = |name: &str| truth[name].iter().copied().collect::<BTreeSet<_>>();
    assert_eq!(a.discovered_node_ids, expect("a.example"));
    assert_eq!(b.discovered_node_ids, expect("b.example"));
    let cids_a: BTreeSet<Cid> = a.probe_cids.iter().copied().collect();
    assert!(b.probe_cids.iter().all(|c| !cids_a.contains(c)));

    let rows = cross_reference(&[a, b], net.trace("mon0").unwrap());
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.dns_names.len() == 1 && !r.multi_address && !r.shared_address));
}

#[test]
fn dead_gateway_is_non_functional() {
    let (mut net, nodes, mons) = gateway_net(1, 1, 4);
    net.add_gateway("dead.example", &nodes).unwrap();
    net.set_online(nodes[0], false).unwrap();
    let res = probe_gateway(&mut net, "dead.example", &mons, 1).unwrap();
    assert!(res.discovered_node_ids.is_empty());
    assert_eq!(res.http_succeeded, vec![false]);
    assert!(res.non_functional());
}

#[test]
fn broken_http_side_still_reveals_nodes() {
    let (mut net, nodes, mons) = gateway_net(1, 1, 5);
    net.add_gateway("half.example", &nodes).unwrap();
    net.set_gateway_http_functional("half.example", false).unwrap();
    let res = probe_gateway(&mut net, "half.example", &mons, 1).unwrap();
    assert_eq!(res.discovered_node_ids.len(), 1);
    assert_eq!(res.http_succeeded, vec![false]);
    assert!(!res.non_functional());
}

#[test]
fn probe_argument_errors() {
    let (mut net, nodes, mons) = gateway_net(1, 1, 6);
    net.add_gateway("gw.example", &nodes).unwrap();
    assert_eq!(probe_gateway(&mut net, "gw.example", &[], 1), Err(SimError::NoMonitors));
    assert_eq!(
        probe_gateway(&mut net, "gw.example", &nodes, 1),
        Err(SimError::NotAMonitor(nodes[0]))
    );
    assert!(matches!(
        probe_gateway(&mut net, "other.example", &mons, 1),
        Err(SimError::UnknownGateway(_))
    ));
}

#[test]
fn cross_reference_sees_address_changes() {
    let (mut net, nodes, mons) = gateway_net(2, 1, 7);
    net.add_gateway("gw.example", &nodes).unwrap();
    let first = probe_gateway_saturated(&mut net, "gw.example", &mons, 1).unwrap();
    net.set_address(nodes[0], "/ip4/20.9.9.9/tcp/4001").unwrap();
    // The second node moves onto an address some other peer already uses.
    net.set_address(nodes[1], &addr(100)).unwrap();
    let other = net.node_ids(NodeKind::DhtServer)[0];
    net.connect(other, mons[0]).unwrap();
    net.node_request(other, block(77)).unwrap();
    let second = probe_gateway_saturated(&mut net, "gw.example", &mons, 2).unwrap();
    let rows = cross_reference(&[first, second], net.trace("mon0").unwrap());
    assert_eq!(rows.len(), 2);
    let row = |id: NodeId| rows.iter().find(|r| r.node == id).unwrap();
    assert!(row(nodes[0]).multi_address);
    assert!(row(nodes[1]).shared_address);
}

fn traced(net: Network) -> wantscope_core::pipeline::UnifiedTrace {
    let out = net.finish();
    let traces = out.monitors.into_iter().map(|m| m.trace).collect();
    process(traces, Windows::default()).unwrap()
}

#[test]
fn idw_finds_exactly_the_monitored_requesters() {
    let mut net = Network::build(SimConfig::default()).unwrap();
    let m = net.add_node(NodeKind::Monitor, "/ip4/192.0.2.1/tcp/4001");
    let a = net.add_node(NodeKind::DhtServer, &addr(1));
    let b = net.add_node(NodeKind::DhtServer, &addr(2));
    let hidden = net.add_node(NodeKind::DhtServer, &addr(3));
    let bystander = net.add_node(NodeKind::DhtServer, &addr(4));
    for v in [a, b, bystander] {
        net.connect(v, m).unwrap();
    }
    net.connect(hidden, a).unwrap();
    let c = block(5);
    for v in [a, b, hidden] {
        net.issue_request(v, c, RequestOrigin::Script).unwrap();
        net.advance_secs(2.0);
    }
    net.advance_secs(100.0);
    let t = traced(net);
    let found: BTreeSet<NodeId> = idw(&t, &c).into_keys().collect();
    assert_eq!(found, [a, b].into());
    assert!(idw(&t, &block(6)).is_empty());
}

#[test]
fn tnw_lists_user_actions_not_wire_messages() {
    let mut net = Network::build(SimConfig::default()).unwrap();
    let m = net.add_node(NodeKind::Monitor, "/ip4/192.0.2.1/tcp/4001");
    let target = net.add_node(NodeKind::DhtClient, &addr(1));
    net.connect(target, m).unwrap();
    let wanted: Vec<Cid> = (0..5).map(|i| block(100 + i)).collect();
    for &c in &wanted {
        net.issue_request(target, c, RequestOrigin::Script).unwrap();
        net.advance_secs(7.0);
    }
    net.advance_secs(120.0);
    let t = traced(net);
    assert!(t.len() > 5, "re-broadcasts should be on the wire");
    let got = tnw(&t, &target);
    assert_eq!(got.len(), 5);
    assert!(got.iter().all(|e| e.request_type == RequestType::WantHave));
    assert_eq!(got.iter().map(|e| e.cid).collect::<Vec<_>>(), wanted);
    assert!(tnw(&t, &NodeId([9; 32])).is_empty());
}

#[test]
fn saturation_survives_a_busy_http_cache() {
    let mut net = Network::build(SimConfig {
        gateway_cache_hit_ratio: 0.97,
        seed: 8,
        ..SimConfig::default()
    })
    .unwrap();
    let mon = net.add_node(NodeKind::Monitor, "/ip4/192.0.2.1/tcp/4001");
    let nodes: Vec<NodeId> = (0..13)
        .map(|i| net.add_node(NodeKind::Gateway, &addr(i)))
        .collect();
    net.add_gateway("cached.example", &nodes).unwrap();
    let res = probe_gateway_saturated(&mut net, "cached.example", &[mon], 1).unwrap();
    assert_eq!(res.discovered_node_ids.len(), 13);
    assert!(res.probes_sent > 13 + SATURATION_K);
}

#[test]
fn one_seed_two_gateways_distinct_bait() {
    let (mut net, nodes, mons) = gateway_net(2, 1, 9);
    net.add_gateway("a.example", &nodes[..1]).unwrap();
    net.add_gateway("b.example", &nodes[1..]).unwrap();
    let a = probe_gateway_saturated(&mut net, "a.example", &mons, 3).unwrap();
    let b = probe_gateway_saturated(&mut net, "b.example", &mons, 3).unwrap();
    let cids_a: BTreeSet<Cid> = a.probe_cids.iter().copied().collect();
    assert!(b.probe_cids.iter().all(|c| !cids_a.contains(c)));
    assert_eq!(b.discovered_node_ids, [nodes[1]].into());
}
