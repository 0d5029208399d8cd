use std::path::PathBuf;

use anyhow::Result;
use serde::Serialize;
use wantscope_core::pipeline::{process, UnifiedTrace, Windows};
use wantscope_core::trace::write_trace_file;
use wantscope_core::TraceRecord;

use crate::manifest::Recorder;
use crate::util::{ensure_parent, manifest_path_for, read_traces, OrInput};

/// Matching windows of the two flagging rules.
#[derive(clap::Args, Clone, Copy, Serialize)]
pub struct WindowArgs {
    /// Inter-monitor duplicate window in seconds.
    #[arg(long, default_value_t = 5.0)]
    pub dup_window_s: f64,
    /// Re-broadcast window in seconds.
    #[arg(long, default_value_t = 31.0)]
    pub rebroadcast_window_s: f64,
}

impl WindowArgs {
    pub fn windows(&self) -> Result<Windows> {
        for (name, v) in [
            ("--dup-window-s", self.dup_window_s),
            ("--rebroadcast-window-s", self.rebroadcast_window_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(crate::util::input_error(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(Windows::from_secs(self.dup_window_s, self.rebroadcast_window_s))
    }
}

#[derive(clap::Args)]
pub struct Args {
    /// Per-monitor trace CSVs, each sorted by time.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Flagged, merged trace CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub windows: WindowArgs,
}

/// Reads and flags traces; shared with the attack subcommands.
pub fn load_unified(paths: &[PathBuf], windows: &WindowArgs) -> Result<UnifiedTrace> {
    let traces = read_traces(paths)?;
    process(traces, windows.windows()?).input()
}

pub fn flag_counts(records: &[TraceRecord]) -> (usize, usize) {
    let dups = records.iter().filter(|r| r.flags.is_dup()).count();
    let rebroadcasts = records.iter().filter(|r| r.flags.is_rebroadcast()).count();
    (dups, rebroadcasts)
}

pub fn cmd(args: Args) -> Result<()> {
    let mut rec = Recorder::new("unify", &args.windows)?;
    for p in &args.inputs {
        rec.input(p)?;
    }
    let unified = load_unified(&args.inputs, &args.windows)?;
    ensure_parent(&args.out)?;
    write_trace_file(&args.out, &unified.records)?;
    rec.output(args.out.display().to_string());
    rec.write(&manifest_path_for(&args.out))?;

    let (dups, rebroadcasts) = flag_counts(&unified.records);
    println!(
        "records={} monitors={} inter_monitor_dups={} rebroadcasts={}",
        unified.len(),
        unified.provenance.join("+"),
        dups,
        rebroadcasts
    );
    Ok(())
}
