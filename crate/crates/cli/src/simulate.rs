use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;
use wantscope_core::trace::{write_conn_events_file, write_trace_file};
use wantscope_core::NodeId;
use wantscope_netsim::workload::geodb_csv;
use wantscope_netsim::{run, Summary};

use crate::manifest::Recorder;
use crate::util::{echo_table, load_sim_config, write_json};

#[derive(clap::Args)]
pub struct Args {
    /// Simulation config (JSON, SimConfig field names).
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// What lands in `ground_truth.json`.
#[derive(Serialize)]
pub struct GroundTruthFile<'a> {
    pub true_n: usize,
    pub gateway_map: &'a BTreeMap<String, Vec<NodeId>>,
    pub summary: &'a Summary,
}

pub fn cmd(args: Args) -> Result<()> {
    let cfg = load_sim_config(&args.config, args.seed)?;
    let mut rec = Recorder::new("simulate", &cfg)?;
    rec.input(&args.config)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;

    let out = run(cfg.clone())?;
    let mut rows = Vec::new();
    for m in &out.monitors {
        let trace_name = format!("{}.trace.csv", m.name);
        let conn_name = format!("{}.conn.csv", m.name);
        write_trace_file(&args.out.join(&trace_name), &m.trace)?;
        write_conn_events_file(&args.out.join(&conn_name), &m.conn_events)?;
        rec.output(trace_name);
        rec.output(conn_name);
        rows.push(vec![
            m.name.clone(),
            m.trace.len().to_string(),
            m.conn_events.len().to_string(),
        ]);
    }
    let gt = &out.ground_truth;
    write_json(
        &args.out.join("ground_truth.json"),
        &GroundTruthFile {
            true_n: gt.true_n,
            gateway_map: &gt.gateway_map,
            summary: &gt.summary,
        },
    )?;
    rec.output("ground_truth.json");
    write_json(&args.out.join("gateway_map.json"), &gt.gateway_map)?;
    rec.output("gateway_map.json");
    fs::write(args.out.join("geo_db.csv"), geodb_csv(&cfg.address_plan))?;
    rec.output("geo_db.csv");
    rec.write(&args.out.join("manifest.json"))?;

    echo_table(&["monitor", "records", "conn_events"], &rows);
    println!(
        "true_n={} requests={} fetched={} local_hits={} pending_at_end={}",
        gt.true_n,
        gt.summary.requests,
        gt.summary.fetched,
        gt.summary.local_hits,
        gt.summary.pending_at_end
    );
    Ok(())
}
