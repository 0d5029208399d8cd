use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;
use wantscope_core::pipeline::{process, UnifiedTrace};
use wantscope_core::{Cid, NodeId, TraceRecord};
use wantscope_netsim::probes::{cross_reference, idw, probe_gateway_saturated, tnw, tpi};
use wantscope_netsim::{Network, NodeKind};

use crate::manifest::Recorder;
use crate::unify::{load_unified, WindowArgs};
use crate::util::{echo_table, input_error, load_sim_config, manifest_path_for, write_csv, write_json, OrInput};

/// Address given to the prober node added by `tpi`.
const PROBER_ADDRESS: &str = "/ip4/198.51.100.1/tcp/4001";

#[derive(clap::Args, Serialize)]
pub struct GatewayArgs {
    /// Simulation config; the network runs for its duration first.
    #[arg(long)]
    pub sim: PathBuf,
    /// One row per discovered (gateway, node) pair.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Where an attack gets its trace from.
#[derive(clap::Args, Serialize)]
pub struct Source {
    /// Per-monitor trace CSVs.
    #[arg(long, required_unless_present = "sim", conflicts_with = "sim")]
    pub trace: Vec<PathBuf>,
    /// Run this simulation and use its monitor traces.
    #[arg(long)]
    pub sim: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub windows: WindowArgs,
}

#[derive(clap::Args, Serialize)]
pub struct IdwArgs {
    /// CID as `codec:hexdigest`.
    #[arg(long)]
    pub cid: String,
    #[command(flatten)]
    pub source: Source,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Serialize)]
pub struct TnwArgs {
    /// Target node id, hex.
    #[arg(long)]
    pub peer: String,
    #[command(flatten)]
    pub source: Source,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Serialize)]
pub struct TpiArgs {
    #[arg(long)]
    pub sim: PathBuf,
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub cid: String,
    /// Probing node; a fresh client is added when omitted.
    #[arg(long)]
    pub prober: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_cid(s: &str) -> Result<Cid> {
    s.parse().map_err(|e| input_error(format!("bad cid {s:?}: {e}")))
}

fn parse_node(s: &str) -> Result<NodeId> {
    s.parse().map_err(|e| input_error(format!("bad node id {s:?}: {e}")))
}

fn simulated(path: &Path, seed: Option<u64>) -> Result<Network> {
    let cfg = load_sim_config(path, seed)?;
    let mut net = Network::build(cfg).input()?;
    net.run();
    Ok(net)
}

fn load_source(src: &Source, rec: &mut Recorder) -> Result<UnifiedTrace> {
    if let Some(sim) = &src.sim {
        rec.input(sim)?;
        let out = simulated(sim, src.seed)?.finish();
        let traces = out.monitors.into_iter().map(|m| m.trace).collect();
        return process(traces, src.windows.windows()?).input();
    }
    for p in &src.trace {
        rec.input(p)?;
    }
    load_unified(&src.trace, &src.windows)
}

fn finish(rec: Recorder, out: &Path) -> Result<()> {
    let mut rec = rec;
    rec.output(out.display().to_string());
    rec.write(&manifest_path_for(out))
}

pub fn cmd_idw(args: IdwArgs) -> Result<()> {
    let mut rec = Recorder::new("idw", &args)?;
    let cid = parse_cid(&args.cid)?;
    let trace = load_source(&args.source, &mut rec)?;
    let rows: Vec<Vec<String>> = idw(&trace, &cid)
        .into_iter()
        .map(|(peer, t)| vec![peer.to_hex(), t.to_string()])
        .collect();
    let header = ["peer_id", "first_seen_ns"];
    write_csv(&args.out, &header, &rows)?;
    echo_table(&header, &rows);
    finish(rec, &args.out)
}

pub fn cmd_tnw(args: TnwArgs) -> Result<()> {
    let mut rec = Recorder::new("tnw", &args)?;
    let peer = parse_node(&args.peer)?;
    let trace = load_source(&args.source, &mut rec)?;
    let rows: Vec<Vec<String>> = tnw(&trace, &peer)
        .into_iter()
        .map(|e| vec![e.timestamp_ns.to_string(), e.request_type.token().to_string(), e.cid.to_string()])
        .collect();
    let header = ["timestamp_ns", "request_type", "cid"];
    write_csv(&args.out, &header, &rows)?;
    echo_table(&header, &rows);
    finish(rec, &args.out)
}

#[derive(Serialize)]
struct TpiResult {
    prober: NodeId,
    target: NodeId,
    cid: Cid,
    probe_time_ns: u64,
    has_block: bool,
    /// What the simulator's own cache log says.
    ground_truth_cached: bool,
}

pub fn cmd_tpi(args: TpiArgs) -> Result<()> {
    let mut rec = Recorder::new("tpi", &args)?;
    rec.input(&args.sim)?;
    let target = parse_node(&args.target)?;
    let cid = parse_cid(&args.cid)?;
    let mut net = simulated(&args.sim, args.seed)?;
    let prober = match &args.prober {
        Some(p) => parse_node(p)?,
        None => net.add_node(NodeKind::DhtClient, PROBER_ADDRESS),
    };
    let probe_time_ns = net.now_ns();
    let ground_truth_cached = net.ground_truth().cached(target, cid, probe_time_ns);
    let has_block = tpi(&mut net, prober, target, cid).input()?;
    let result = TpiResult {
        prober,
        target,
        cid,
        probe_time_ns,
        has_block,
        ground_truth_cached,
    };
    write_json(&args.out, &result)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    finish(rec, &args.out)
}

pub fn cmd_gateways(args: GatewayArgs) -> Result<()> {
    let mut rec = Recorder::new("probe-gateways", &args)?;
    rec.input(&args.sim)?;
    let cfg = load_sim_config(&args.sim, args.seed)?;
    let seed = cfg.seed;
    let mut net = Network::build(cfg).input()?;
    net.run();
    let monitors = net.monitor_ids();
    if monitors.is_empty() {
        return Err(input_error("probe-gateways needs n_monitors >= 1"));
    }
    let mut results = Vec::new();
    for (i, dns) in net.gateway_names().into_iter().enumerate() {
        let probe_seed = seed.wrapping_add(i as u64);
        results.push(probe_gateway_saturated(&mut net, &dns, &monitors, probe_seed).input()?);
    }
    let records: Vec<TraceRecord> = net
        .traces()
        .into_iter()
        .flat_map(|(_, t)| t.iter().cloned())
        .collect();
    let xref = cross_reference(&results, &records);

    let mut rows = Vec::new();
    for res in &results {
        let ok = res.http_succeeded.iter().filter(|&&b| b).count();
        let common = |node: String, addrs: String, multi: bool, shared: bool| {
            vec![
                res.dns_name.clone(),
                node,
                addrs,
                multi.to_string(),
                shared.to_string(),
                res.probes_sent.to_string(),
                ok.to_string(),
            ]
        };
        if res.discovered_node_ids.is_empty() {
            rows.push(common(String::new(), String::new(), false, false));
        }
        for id in &res.discovered_node_ids {
            let row = xref.iter().find(|r| r.node == *id).expect("every discovered node has a row");
            let addrs: Vec<&str> = row.addresses.iter().map(String::as_str).collect();
            rows.push(common(id.to_hex(), addrs.join(" "), row.multi_address, row.shared_address));
        }
    }
    let header = [
        "dns_name",
        "node_id",
        "addresses",
        "multi_address",
        "shared_address",
        "probes_sent",
        "http_ok",
    ];
    write_csv(&args.out, &header, &rows)?;
    echo_table(&header, &rows);
    finish(rec, &args.out)
}
