//! CSV encoding of monitor traces and connection events.
//!
//! Trace files carry the header
//! `timestamp_ns,monitor,peer_id,address,request_type,cid_codec,cid_digest_hex,flags`
//! and connection-event files `timestamp_ns,monitor,peer_id,kind`. Files whose
//! name ends in `.gz` are transparently gzip-compressed.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::types::{Cid, ConnEvent, Flags, TraceRecord};

pub const TRACE_HEADER: [&str; 8] = [
    "timestamp_ns",
    "monitor",
    "peer_id",
    "address",
    "request_type",
    "cid_codec",
    "cid_digest_hex",
    "flags",
];

pub const CONN_HEADER: [&str; 4] = ["timestamp_ns", "monitor", "peer_id", "kind"];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
}

impl TraceError {
    fn parse(line: u64, msg: impl Into<String>) -> Self {
        TraceError::Parse {
            line,
            msg: msg.into(),
        }
    }
}

impl From<csv::Error> for TraceError {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        match e.into_kind() {
            csv::ErrorKind::Io(io) => TraceError::Io(io),
            other => TraceError::parse(line, format!("{other:?}")),
        }
    }
}

fn csv_reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(source)
}

fn check_header(
    reader: &mut csv::Reader<impl Read>,
    expected: &[&str],
) -> Result<bool, TraceError> {
    let mut header = csv::StringRecord::new();
    if !reader.read_record(&mut header)? {
        return Ok(false);
    }
    if header.iter().ne(expected.iter().copied()) {
        return Err(TraceError::parse(
            1,
            format!("unexpected header, expected {}", expected.join(",")),
        ));
    }
    Ok(true)
}

pub fn write_trace<W: Write>(records: &[TraceRecord], sink: W) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(TRACE_HEADER)?;
    for r in records {
        w.write_record([
            r.timestamp_ns.to_string().as_str(),
            &r.monitor,
            &r.peer.to_hex(),
            &r.address,
            r.request_type.token(),
            &r.cid.codec.name(),
            &r.cid.digest_hex(),
            &r.flags.0.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(source: R) -> Result<Vec<TraceRecord>, TraceError> {
    let mut reader = csv_reader(source);
    if !check_header(&mut reader, &TRACE_HEADER)? {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut row = csv::StringRecord::new();
    while reader.read_record(&mut row)? {
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        out.push(parse_trace_row(&row).map_err(|msg| TraceError::parse(line, msg))?);
    }
    Ok(out)
}

fn parse_trace_row(row: &csv::StringRecord) -> Result<TraceRecord, String> {
    if row.len() != TRACE_HEADER.len() {
        return Err(format!(
            "expected {} fields, found {}",
            TRACE_HEADER.len(),
            row.len()
        ));
    }
    let timestamp_ns = row[0]
        .parse()
        .map_err(|_| format!("bad timestamp {:?}", &row[0]))?;
    let peer = row[2].parse().map_err(|e| format!("peer_id: {e}"))?;
    let request_type = row[4].parse().map_err(|e| format!("request_type: {e}"))?;
    let codec = row[5].parse().map_err(|e| format!("cid_codec: {e}"))?;
    let cid = format!("{}:{}", &row[5], &row[6])
        .parse::<Cid>()
        .map(|c| Cid::new(codec, c.digest))
        .map_err(|e| format!("cid_digest_hex: {e}"))?;
    let flags = row[7]
        .parse::<u8>()
        .map_err(|_| format!("bad flags {:?}", &row[7]))?;
    Ok(TraceRecord {
        timestamp_ns,
        monitor: row[1].to_string(),
        peer,
        address: row[3].to_string(),
        request_type,
        cid,
        flags: Flags(flags),
    })
}

pub fn write_conn_events<W: Write>(events: &[ConnEvent], sink: W) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(CONN_HEADER)?;
    for e in events {
        w.write_record([
            e.timestamp_ns.to_string().as_str(),
            &e.monitor,
            &e.peer.to_hex(),
            e.kind.token(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_conn_events<R: Read>(source: R) -> Result<Vec<ConnEvent>, TraceError> {
    let mut reader = csv_reader(source);
    if !check_header(&mut reader, &CONN_HEADER)? {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut row = csv::StringRecord::new();
    while reader.read_record(&mut row)? {
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let parsed = (|| -> Result<ConnEvent, String> {
            if row.len() != CONN_HEADER.len() {
                return Err(format!("expected 4 fields, found {}", row.len()));
            }
            Ok(ConnEvent {
                timestamp_ns: row[0]
                    .parse()
                    .map_err(|_| format!("bad timestamp {:?}", &row[0]))?,
                monitor: row[1].to_string(),
                peer: row[2].parse().map_err(|e| format!("peer_id: {e}"))?,
                kind: row[3].parse().map_err(|e| format!("kind: {e}"))?,
            })
        })();
        out.push(parsed.map_err(|msg| TraceError::parse(line, msg))?);
    }
    Ok(out)
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

fn open_source(path: &Path) -> Result<Box<dyn Read>, TraceError> {
    let file = BufReader::new(File::open(path)?);
    Ok(if is_gz(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    })
}

fn with_sink(
    path: &Path,
    body: impl FnOnce(&mut dyn Write) -> Result<(), TraceError>,
) -> Result<(), TraceError> {
    let file = BufWriter::new(File::create(path)?);
    if is_gz(path) {
        let mut enc = GzEncoder::new(file, Compression::default());
        body(&mut enc)?;
        enc.finish()?.flush()?;
    } else {
        let mut file = file;
        body(&mut file)?;
        file.flush()?;
    }
    Ok(())
}

pub fn read_trace_file(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    read_trace(open_source(path)?)
}

pub fn write_trace_file(path: &Path, records: &[TraceRecord]) -> Result<(), TraceError> {
    with_sink(path, |w| write_trace(records, w))
}

pub fn read_conn_events_file(path: &Path) -> Result<Vec<ConnEvent>, TraceError> {
    read_conn_events(open_source(path)?)
}

pub fn write_conn_events_file(path: &Path, events: &[ConnEvent]) -> Result<(), TraceError> {
    with_sink(path, |w| write_conn_events(events, w))
}
