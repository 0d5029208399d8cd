use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use wantscope_core::trace::read_trace_file;
use wantscope_core::TraceRecord;
use wantscope_netsim::SimConfig;

/// Wraps errors caused by the caller's input: bad files, bad flags, bad
/// configs. These exit with status 2, everything else with 1.
#[derive(Debug)]
pub struct Input(anyhow::Error);

impl fmt::Display for Input {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for Input {}

pub trait OrInput<T> {
    fn input(self) -> Result<T>;
}

impl<T, E: Into<anyhow::Error>> OrInput<T> for std::result::Result<T, E> {
    fn input(self) -> Result<T> {
        self.map_err(|e| anyhow::Error::new(Input(e.into())))
    }
}

pub fn input_error(msg: impl fmt::Display) -> anyhow::Error {
    anyhow::Error::new(Input(anyhow::anyhow!("{msg}")))
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|c| c.is::<Input>()) {
        2
    } else {
        1
    }
}

pub fn read_traces(paths: &[PathBuf]) -> Result<Vec<Vec<TraceRecord>>> {
    paths
        .iter()
        .map(|p| {
            read_trace_file(p)
                .with_context(|| format!("reading trace {}", p.display()))
                .input()
        })
        .collect()
}

pub fn load_sim_config(path: &Path, seed: Option<u64>) -> Result<SimConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))
        .input()?;
    let mut cfg: SimConfig = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))
        .input()?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate().input()?;
    Ok(cfg)
}

/// `report.csv` -> `report.manifest.json`, next to the output.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map_or_else(|| "out".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.manifest.json"))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// Plain CSV writer for report tables. Fields never contain commas or
/// quotes, so no escaping is needed.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    ensure_parent(path)?;
    let mut out = header.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

const ECHO_ROWS: usize = 20;

/// Prints a right-aligned text table to stdout, truncated after a few rows.
pub fn echo_table(header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows.iter().take(ECHO_ROWS) {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    println!("{}", line(header.to_vec()));
    for row in rows.iter().take(ECHO_ROWS) {
        println!("{}", line(row.iter().map(String::as_str).collect()));
    }
    if rows.len() > ECHO_ROWS {
        println!("... {} more rows", rows.len() - ECHO_ROWS);
    }
}
