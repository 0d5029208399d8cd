use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::Serialize;
use serde_json::Value;
use wantscope_core::analytics::{
    codec_share, ecdf, fit_power_law, geo_share, popularity, rate_timeseries, FitOptions, GeoDb,
    GroupBy, OriginMap, ShareRow,
};
use wantscope_core::pipeline::FilterOptions;
use wantscope_core::trace::read_trace_file;
use wantscope_core::{secs_to_nanos, NodeId, TraceRecord};

use crate::manifest::Recorder;
use crate::util::{echo_table, input_error, manifest_path_for, write_csv, write_json, OrInput};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Report {
    /// Want records per CID codec, raw (flags ignored).
    CodecShare,
    /// Unflagged want records per requester country. Needs --geo-db.
    GeoShare,
    /// Raw and unique request popularity per CID.
    Popularity,
    /// ECDF of both popularity scores.
    Ecdf,
    /// Discrete power-law fit of both popularity scores (JSON).
    PowerLaw,
    /// Request rate per type, unflagged records.
    Rate,
    /// Want rate per origin group. Needs --gateway-map.
    RateOrigin,
}

#[derive(clap::Args, Serialize)]
pub struct Args {
    /// Flagged trace, usually the output of `unify`.
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, value_enum)]
    pub report: Report,
    #[arg(long)]
    pub out: PathBuf,
    /// Bucket width of the rate reports, seconds.
    #[arg(long, default_value_t = 3600.0)]
    pub bucket_s: f64,
    /// `cidr,country` CSV for geo-share.
    #[arg(long)]
    pub geo_db: Option<PathBuf>,
    /// JSON map of gateway DNS name to node ids, or a ground_truth.json.
    #[arg(long)]
    pub gateway_map: Option<PathBuf>,
    /// Bootstrap resamples of the power-law goodness-of-fit test.
    #[arg(long, default_value_t = 250)]
    pub bootstraps: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn share_table(rows: &[ShareRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| vec![r.label.clone(), r.count.to_string(), format!("{:.2}", r.share_pct)])
        .collect()
}

const SHARE_HEADER: [&str; 3] = ["label", "count", "share_pct"];

/// Reads a gateway map: either `{dns: [ids]}` or any JSON object with such
/// a map under `gateway_map`.
pub fn load_gateway_map(path: &Path) -> Result<OriginMap> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading gateway map {}", path.display()))
        .input()?;
    let mut value: Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing gateway map {}", path.display()))
        .input()?;
    if let Some(inner) = value.get_mut("gateway_map") {
        value = inner.take();
    }
    let map: BTreeMap<String, Vec<NodeId>> = serde_json::from_value(value)
        .with_context(|| format!("gateway map {}: expected {{dns: [node ids]}}", path.display()))
        .input()?;
    Ok(map
        .into_iter()
        .flat_map(|(dns, ids)| ids.into_iter().map(move |id| (id, dns.clone())))
        .collect::<HashMap<_, _>>())
}

fn unflagged(records: &[TraceRecord], keep_cancels: bool) -> Vec<TraceRecord> {
    let opts = FilterOptions {
        drop_cancels: !keep_cancels,
        ..FilterOptions::all()
    };
    records.iter().filter(|r| opts.keeps(r)).cloned().collect()
}

pub fn cmd(args: Args) -> Result<()> {
    let mut rec = Recorder::new("analyze", &args)?;
    rec.input(&args.trace)?;
    let records = read_trace_file(&args.trace)
        .with_context(|| format!("reading trace {}", args.trace.display()))
        .input()?;

    match args.report {
        Report::CodecShare => {
            let rows = share_table(&codec_share(&records));
            write_csv(&args.out, &SHARE_HEADER, &rows)?;
            echo_table(&SHARE_HEADER, &rows);
        }
        Report::GeoShare => {
            let path = args
                .geo_db
                .as_ref()
                .ok_or_else(|| input_error("geo-share needs --geo-db"))?;
            rec.input(path)?;
            let file = File::open(path)
                .with_context(|| format!("opening geo db {}", path.display()))
                .input()?;
            let db = GeoDb::from_csv(file)
                .with_context(|| format!("geo db {}", path.display()))
                .input()?;
            let rows = share_table(&geo_share(&records, &db).input()?);
            write_csv(&args.out, &SHARE_HEADER, &rows)?;
            echo_table(&SHARE_HEADER, &rows);
        }
        Report::Popularity => {
            let table = popularity(&records, true);
            let mut entries: Vec<_> = table.entries.iter().collect();
            entries.sort_by(|a, b| b.1.rrp.cmp(&a.1.rrp).then(a.0.cmp(b.0)));
            let rows: Vec<Vec<String>> = entries
                .iter()
                .map(|(cid, p)| vec![cid.to_string(), p.rrp.to_string(), p.urp.to_string()])
                .collect();
            let header = ["cid", "rrp", "urp"];
            write_csv(&args.out, &header, &rows)?;
            echo_table(&header, &rows);
        }
        Report::Ecdf => {
            let table = popularity(&records, true);
            let mut rows = Vec::new();
            for (score, values) in [("rrp", table.rrp_scores()), ("urp", table.urp_scores())] {
                for (x, f) in ecdf(&values).input()? {
                    rows.push(vec![score.to_string(), x.to_string(), format!("{f:.6}")]);
                }
            }
            let header = ["score", "value", "fraction"];
            write_csv(&args.out, &header, &rows)?;
            echo_table(&header, &rows);
        }
        Report::PowerLaw => {
            let table = popularity(&records, true);
            let opts = FitOptions {
                bootstraps: args.bootstraps,
                seed: args.seed,
            };
            let mut report = BTreeMap::new();
            let mut rows = Vec::new();
            for (score, values) in [("rrp", table.rrp_scores()), ("urp", table.urp_scores())] {
                let entry = match fit_power_law(&values, opts) {
                    Ok(fit) => {
                        rows.push(vec![
                            score.to_string(),
                            format!("{:.4}", fit.alpha),
                            fit.x_min.to_string(),
                            format!("{:.4}", fit.p_value),
                            if fit.rejected() { "rejected" } else { "plausible" }.to_string(),
                        ]);
                        serde_json::json!({ "fit": fit, "rejected": fit.rejected() })
                    }
                    Err(e) => {
                        rows.push(vec![score.to_string(), "-".into(), "-".into(), "-".into(), e.to_string()]);
                        serde_json::json!({ "error": e.to_string() })
                    }
                };
                report.insert(score, entry);
            }
            write_json(&args.out, &report)?;
            echo_table(&["score", "alpha", "x_min", "p_value", "verdict"], &rows);
        }
        Report::Rate | Report::RateOrigin => {
            if !(args.bucket_s.is_finite() && args.bucket_s > 0.0) {
                return Err(input_error(format!("--bucket-s must be positive, got {}", args.bucket_s)));
            }
            let bucket_ns = secs_to_nanos(args.bucket_s);
            let points = if args.report == Report::Rate {
                rate_timeseries(&unflagged(&records, true), bucket_ns, GroupBy::RequestType).input()?
            } else {
                let path = args
                    .gateway_map
                    .as_ref()
                    .ok_or_else(|| input_error("rate-origin needs --gateway-map"))?;
                rec.input(path)?;
                let map = load_gateway_map(path)?;
                rate_timeseries(&unflagged(&records, false), bucket_ns, GroupBy::Origin(&map)).input()?
            };
            let rows: Vec<Vec<String>> = points
                .iter()
                .map(|p| vec![p.bucket_start_ns.to_string(), p.group.clone(), format!("{:.6}", p.rate_per_s)])
                .collect();
            let header = ["bucket_start_ns", "group", "rate_per_s"];
            write_csv(&args.out, &header, &rows)?;
            echo_table(&header, &rows);
        }
    }
    rec.output(args.out.display().to_string());
    rec.write(&manifest_path_for(&args.out))
}
