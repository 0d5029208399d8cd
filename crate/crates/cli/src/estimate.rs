use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::Serialize;
use serde_json::json;
use wantscope_core::estimators::{
    coverage, dht_size_from_min_distance, estimate_two_monitor, peer_set_stats, solve_coupon_mle,
    PeerSetStats,
};
use wantscope_core::trace::read_conn_events_file;
use wantscope_core::{secs_to_nanos, ConnEvent, NodeId};
use wantscope_netsim::Network;

use crate::manifest::Recorder;
use crate::util::{input_error, load_sim_config, manifest_path_for, write_json, OrInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimateMethod {
    /// Capture-recapture over two peer sets.
    TwoMonitor,
    /// Coupon-collector MLE over r peer sets.
    Coupon,
    /// Closest-node XOR distances.
    Dht,
    /// Monitor coverage of a reference network size.
    Coverage,
}

#[derive(clap::Args, Serialize)]
pub struct Args {
    #[arg(long, value_enum)]
    pub method: EstimateMethod,
    /// Connection-event CSVs (two-monitor, coupon).
    #[arg(long)]
    pub conn: Vec<PathBuf>,
    /// Window start in seconds; defaults to the first event.
    #[arg(long)]
    pub from_s: Option<f64>,
    /// Window end in seconds; defaults to just after the last event.
    #[arg(long)]
    pub to_s: Option<f64>,
    /// Peer-set sizes and overlap, instead of --conn (two-monitor).
    #[arg(long, requires_all = ["p2", "inter"])]
    pub p1: Option<u64>,
    #[arg(long)]
    pub p2: Option<u64>,
    #[arg(long)]
    pub inter: Option<u64>,
    /// Union size, draws and draw size, instead of --conn (coupon).
    #[arg(long, requires_all = ["r", "w"])]
    pub m: Option<f64>,
    #[arg(long)]
    pub r: Option<u32>,
    #[arg(long)]
    pub w: Option<f64>,
    /// One normalised distance per line (dht).
    #[arg(long)]
    pub distances: Option<PathBuf>,
    /// Sample distances from a simulated network instead (dht).
    #[arg(long, conflicts_with = "distances")]
    pub sim: Option<PathBuf>,
    /// Number of random targets when sampling from --sim.
    #[arg(long, default_value_t = 1000)]
    pub samples: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mean connected peers (coverage).
    #[arg(long)]
    pub mean_connected: Option<f64>,
    /// Reference network size (coverage).
    #[arg(long)]
    pub reference: Option<f64>,
    /// JSON result.
    #[arg(long)]
    pub out: PathBuf,
}

fn peer_sets(args: &Args, rec: &mut Recorder) -> Result<PeerSetStats> {
    if args.conn.is_empty() {
        return Err(input_error("need --conn files or explicit counts"));
    }
    let mut events: Vec<ConnEvent> = Vec::new();
    for p in &args.conn {
        rec.input(p)?;
        events.extend(
            read_conn_events_file(p)
                .with_context(|| format!("reading {}", p.display()))
                .input()?,
        );
    }
    let first = events.iter().map(|e| e.timestamp_ns).min().unwrap_or(0);
    let last = events.iter().map(|e| e.timestamp_ns).max().unwrap_or(0);
    let t0 = args.from_s.map_or(first, secs_to_nanos);
    let t1 = args.to_s.map_or(last + 1, secs_to_nanos);
    peer_set_stats(&events, t0, t1).input()
}

/// Uniform targets derived from the seed by hashing.
pub fn sample_targets(seed: u64, k: usize) -> impl Iterator<Item = NodeId> {
    (0..k as u64).map(move |i| {
        let mut key = seed.to_le_bytes().to_vec();
        key.extend_from_slice(&i.to_le_bytes());
        NodeId::from_public_key(&key)
    })
}

pub fn cmd(args: Args) -> Result<()> {
    let mut rec = Recorder::new("estimate", &args)?;
    let result = match args.method {
        EstimateMethod::TwoMonitor => {
            if let (Some(p1), Some(p2), Some(inter)) = (args.p1, args.p2, args.inter) {
                json!({ "estimate": estimate_two_monitor(p1, p2, inter).input()? })
            } else {
                let stats = peer_sets(&args, &mut rec)?;
                json!({ "estimate": stats.two_monitor_estimate().input()?, "peer_sets": stats })
            }
        }
        EstimateMethod::Coupon => {
            if let (Some(m), Some(r), Some(w)) = (args.m, args.r, args.w) {
                json!({ "estimate": solve_coupon_mle(m, r, w).input()? })
            } else {
                let stats = peer_sets(&args, &mut rec)?;
                json!({ "estimate": stats.coupon_estimate().input()?, "peer_sets": stats })
            }
        }
        EstimateMethod::Dht => {
            let xs: Vec<f64> = if let Some(path) = &args.distances {
                rec.input(path)?;
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))
                    .input()?;
                text.lines()
                    .enumerate()
                    .filter(|(_, l)| !l.trim().is_empty())
                    .map(|(i, l)| {
                        l.trim()
                            .parse::<f64>()
                            .map_err(|e| input_error(format!("{} line {}: {e}", path.display(), i + 1)))
                    })
                    .collect::<Result<_>>()?
            } else if let Some(path) = &args.sim {
                rec.input(path)?;
                let cfg = load_sim_config(path, args.seed)?;
                let seed = cfg.seed;
                let net = Network::build(cfg).input()?;
                sample_targets(seed, args.samples)
                    .map(|t| net.sample_min_distance(t))
                    .collect::<Result<_, _>>()
                    .input()?
            } else {
                return Err(input_error("dht needs --distances or --sim"));
            };
            json!({ "estimate": dht_size_from_min_distance(&xs).input()?, "samples": xs.len() })
        }
        EstimateMethod::Coverage => {
            let (Some(c), Some(n)) = (args.mean_connected, args.reference) else {
                return Err(input_error("coverage needs --mean-connected and --reference"));
            };
            json!({ "coverage": coverage(c, n).input()? })
        }
    };
    write_json(&args.out, &result)?;
    rec.output(args.out.display().to_string());
    rec.write(&manifest_path_for(&args.out))?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}
