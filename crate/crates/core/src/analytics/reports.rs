use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::net::{IpAddr, SocketAddr};

use serde::Serialize;

use super::AnalyticsError;
use crate::types::{NodeId, RequestType, TraceRecord};

/// Country label for addresses without a database match.
pub const UNKNOWN_COUNTRY: &str = "??";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShareRow {
    pub label: String,
    pub count: u64,
    pub share_pct: f64,
}

fn share_rows(counts: BTreeMap<String, u64>) -> Vec<ShareRow> {
    let total: u64 = counts.values().sum();
    let mut rows: Vec<ShareRow> = counts
        .into_iter()
        .map(|(label, count)| ShareRow {
            share_pct: 100.0 * count as f64 / total as f64,
            label,
            count,
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.label.cmp(&b.label)));
    rows
}

/// Share of want records per CID codec. Cancels are excluded; flags are
/// ignored, so pass raw traces for the unprocessed view.
pub fn codec_share(records: &[TraceRecord]) -> Vec<ShareRow> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for r in records.iter().filter(|r| r.request_type.is_want()) {
        *counts.entry(r.cid.codec.display_name()).or_default() += 1;
    }
    share_rows(counts)
}

/// Extracts the IP from a multiaddr (`/ip4/../tcp/..`), a socket address or
/// a bare IP.
pub fn parse_address_ip(addr: &str) -> Option<IpAddr> {
    let addr = addr.trim();
    if let Some(rest) = addr.strip_prefix('/') {
        let mut parts = rest.split('/');
        return match (parts.next(), parts.next()) {
            (Some("ip4" | "ip6"), Some(ip)) => ip.parse().ok(),
            _ => None,
        };
    }
    addr.parse::<IpAddr>()
        .ok()
        .or_else(|| addr.parse::<SocketAddr>().ok().map(|s| s.ip()))
}

/// Offline IP-to-country table with longest-prefix lookup.
#[derive(Clone, Debug, Default)]
pub struct GeoDb {
    /// Per prefix length (longest first): masked network -> country.
    v4: Vec<(u8, HashMap<u32, String>)>,
    v6: Vec<(u8, HashMap<u128, String>)>,
    len: usize,
}

fn mask4(ip: u32, len: u8) -> u32 {
    if len == 0 {
        0
    } else {
        ip & (u32::MAX << (32 - len))
    }
}

fn mask6(ip: u128, len: u8) -> u128 {
    if len == 0 {
        0
    } else {
        ip & (u128::MAX << (128 - len))
    }
}

impl GeoDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Adds `cidr -> country`. A repeated prefix overwrites the earlier one.
    pub fn insert(&mut self, cidr: &str, country: &str) -> Result<(), String> {
        let (ip, len) = cidr
            .split_once('/')
            .ok_or_else(|| format!("missing prefix length in {cidr:?}"))?;
        let ip: IpAddr = ip.parse().map_err(|_| format!("bad IP in {cidr:?}"))?;
        let len: u8 = len
            .parse()
            .map_err(|_| format!("bad prefix length in {cidr:?}"))?;
        let country = country.trim().to_string();
        if country.is_empty() {
            return Err("empty country code".into());
        }
        match ip {
            IpAddr::V4(v4) => {
                if len > 32 {
                    return Err(format!("prefix length {len} > 32"));
                }
                let net = mask4(u32::from(v4), len);
                self.len += usize::from(insert_level(&mut self.v4, len, net, country));
            }
            IpAddr::V6(v6) => {
                if len > 128 {
                    return Err(format!("prefix length {len} > 128"));
                }
                let net = mask6(u128::from(v6), len);
                self.len += usize::from(insert_level(&mut self.v6, len, net, country));
            }
        }
        Ok(())
    }

    pub fn lookup(&self, ip: IpAddr) -> Option<&str> {
        match ip {
            IpAddr::V4(v4) => {
                let ip = u32::from(v4);
                self.v4
                    .iter()
                    .find_map(|(len, nets)| nets.get(&mask4(ip, *len)))
                    .map(String::as_str)
            }
            IpAddr::V6(v6) => {
                let ip = u128::from(v6);
                self.v6
                    .iter()
                    .find_map(|(len, nets)| nets.get(&mask6(ip, *len)))
                    .map(String::as_str)
            }
        }
    }

    /// Country for a trace address, or [`UNKNOWN_COUNTRY`].
    pub fn country_of(&self, address: &str) -> &str {
        parse_address_ip(address)
            .and_then(|ip| self.lookup(ip))
            .unwrap_or(UNKNOWN_COUNTRY)
    }

    /// Reads a `cidr,country` CSV. A leading `cidr,country` header is
    /// optional.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self, AnalyticsError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut db = GeoDb::new();
        for (i, row) in rdr.records().enumerate() {
            let line = i as u64 + 1;
            let row = row.map_err(|e| AnalyticsError::GeoDbParse {
                line,
                msg: e.to_string(),
            })?;
            if row.len() != 2 {
                return Err(AnalyticsError::GeoDbParse {
                    line,
                    msg: format!("expected 2 fields, got {}", row.len()),
                });
            }
            if line == 1 && &row[0] == "cidr" {
                continue;
            }
            db.insert(&row[0], &row[1])
                .map_err(|msg| AnalyticsError::GeoDbParse { line, msg })?;
        }
        if db.is_empty() {
            return Err(AnalyticsError::EmptyGeoDb);
        }
        Ok(db)
    }
}

fn insert_level<K: std::hash::Hash + Eq>(
    levels: &mut Vec<(u8, HashMap<K, String>)>,
    len: u8,
    net: K,
    country: String,
) -> bool {
    let idx = match levels.binary_search_by(|(l, _)| len.cmp(l)) {
        Ok(i) => i,
        Err(i) => {
            levels.insert(i, (len, HashMap::new()));
            i
        }
    };
    levels[idx].1.insert(net, country).is_none()
}

/// Share of deduplicated want records per requester country.
pub fn geo_share(records: &[TraceRecord], db: &GeoDb) -> Result<Vec<ShareRow>, AnalyticsError> {
    if db.is_empty() {
        return Err(AnalyticsError::EmptyGeoDb);
    }
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.request_type.is_want() && r.flags.is_clear())
    {
        *counts.entry(db.country_of(&r.address).to_string()).or_default() += 1;
    }
    Ok(share_rows(counts))
}

/// Peer to origin-group label. Peers not listed are "non-gateway".
pub type OriginMap = HashMap<NodeId, String>;

pub const NON_GATEWAY: &str = "non-gateway";

#[derive(Clone, Copy, Debug)]
pub enum GroupBy<'a> {
    RequestType,
    Origin(&'a OriginMap),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RatePoint {
    pub bucket_start_ns: u64,
    pub group: String,
    pub rate_per_s: f64,
}

fn request_type_label(t: RequestType) -> &'static str {
    match t {
        RequestType::WantHave => "WANT_HAVE",
        RequestType::WantBlock => "WANT_BLOCK",
        RequestType::Cancel => "CANCEL",
    }
}

/// Requests per second in fixed buckets. Every record passed in is counted,
/// so filter beforehand. Buckets start at the earliest timestamp; every
/// bucket between the first and last record gets a point for every group
/// seen, zero-rate ones included.
pub fn rate_timeseries(
    records: &[TraceRecord],
    bucket_ns: u64,
    group_by: GroupBy<'_>,
) -> Result<Vec<RatePoint>, AnalyticsError> {
    if bucket_ns == 0 {
        return Err(AnalyticsError::BadBucket);
    }
    let Some(t0) = records.iter().map(|r| r.timestamp_ns).min() else {
        return Ok(Vec::new());
    };
    let mut counts: BTreeMap<(u64, &str), u64> = BTreeMap::new();
    let mut groups: BTreeSet<&str> = BTreeSet::new();
    let mut last_bucket = 0;
    for r in records {
        let bucket = (r.timestamp_ns - t0) / bucket_ns;
        last_bucket = last_bucket.max(bucket);
        let group = match group_by {
            GroupBy::RequestType => request_type_label(r.request_type),
            GroupBy::Origin(map) => map.get(&r.peer).map_or(NON_GATEWAY, String::as_str),
        };
        groups.insert(group);
        *counts.entry((bucket, group)).or_default() += 1;
    }
    let bucket_s = bucket_ns as f64 / crate::NANOS_PER_SEC as f64;
    let mut out = Vec::with_capacity((last_bucket as usize + 1) * groups.len());
    for b in 0..=last_bucket {
        for &g in &groups {
            let c = counts.get(&(b, g)).copied().unwrap_or(0);
            out.push(RatePoint {
                bucket_start_ns: t0 + b * bucket_ns,
                group: g.to_string(),
                rate_per_s: c as f64 / bucket_s,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{Cid, Codec, Flags};
    use crate::NANOS_PER_SEC;

    fn rec(ts_s: u64, codec: Codec, kind: RequestType, addr: &str) -> TraceRecord {
        TraceRecord {
            timestamp_ns: ts_s * NANOS_PER_SEC,
            monitor: "m".into(),
            peer: NodeId([1; 32]),
            address: addr.into(),
            request_type: kind,
            cid: Cid::new(codec, [0; 32]),
            flags: Flags::default(),
        }
    }

    #[test]
    fn codec_share_single_codec_and_cancels() {
        let mut records: Vec<_> = (0..10)
            .map(|i| rec(i, Codec::DagProtobuf, RequestType::WantHave, ""))
            .collect();
        records.push(rec(11, Codec::Raw, RequestType::Cancel, ""));
        let rows = codec_share(&records);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].label, "DagProtobuf");
        assert_eq!((rows[0].count, rows[0].share_pct), (10, 100.0));
    }

    #[test]
    fn address_forms() {
        let v4: IpAddr = "10.1.2.3".parse().unwrap();
        assert_eq!(parse_address_ip("/ip4/10.1.2.3/tcp/4001"), Some(v4));
        assert_eq!(parse_address_ip("10.1.2.3:4001"), Some(v4));
        assert_eq!(parse_address_ip("10.1.2.3"), Some(v4));
        assert_eq!(
            parse_address_ip("/ip6/2001:db8::1/udp/4001/quic"),
            Some("2001:db8::1".parse().unwrap())
        );
        assert_eq!(parse_address_ip("/dns4/example.com/tcp/1"), None);
        assert_eq!(parse_address_ip("garbage"), None);
    }

    #[test]
    fn longest_prefix_wins() {
        let db = GeoDb::from_csv("cidr,country\n10.0.0.0/8,US\n10.1.0.0/16,NL\n2001:db8::/32,DE\n".as_bytes())
            .unwrap();
        assert_eq!(db.len(), 3);
        assert_eq!(db.country_of("/ip4/10.1.9.9/tcp/1"), "NL");
        assert_eq!(db.country_of("/ip4/10.2.9.9/tcp/1"), "US");
        assert_eq!(db.country_of("/ip6/2001:db8::5/tcp/1"), "DE");
        assert_eq!(db.country_of("/ip4/11.0.0.1/tcp/1"), UNKNOWN_COUNTRY);
        assert_eq!(db.country_of("nonsense"), UNKNOWN_COUNTRY);
    }

    #[test]
    fn geodb_errors() {
        assert_eq!(
            GeoDb::from_csv("cidr,country\n".as_bytes()).unwrap_err(),
            AnalyticsError::EmptyGeoDb
        );
        let err = GeoDb::from_csv("10.0.0.0/8,US\n10.0.0.0/40,NL\n".as_bytes()).unwrap_err();
        assert!(matches!(err, AnalyticsError::GeoDbParse { line: 2, .. }));
        assert_eq!(
            geo_share(&[], &GeoDb::new()).unwrap_err(),
            AnalyticsError::EmptyGeoDb
        );
    }

    #[test]
    fn geo_share_one_prefix() {
        let db = GeoDb::from_csv("10.0.0.0/8,US\n".as_bytes()).unwrap();
        let records: Vec<_> = (0..5)
            .map(|i| rec(i, Codec::Raw, RequestType::WantHave, &format!("/ip4/10.0.0.{i}/tcp/1")))
            .collect();
        let rows = geo_share(&records, &db).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].label.as_str(), rows[0].share_pct), ("US", 100.0));
    }

    #[test]
    fn uniform_rate_single_bucket() {
        let records: Vec<_> = (0..3600)
            .map(|i| rec(i, Codec::Raw, RequestType::WantHave, ""))
            .collect();
        let series = rate_timeseries(&records, 3600 * NANOS_PER_SEC, GroupBy::RequestType).unwrap();
        assert_eq!(series.len(), 1);
        assert_eq!(series[0].rate_per_s, 1.0);
        assert!(rate_timeseries(&[], 1, GroupBy::RequestType).unwrap().is_empty());
        assert_eq!(
            rate_timeseries(&records, 0, GroupBy::RequestType).unwrap_err(),
            AnalyticsError::BadBucket
        );
    }

    #[test]
    fn origin_groups_and_mass() {
        let mut records = vec![
            rec(0, Codec::Raw, RequestType::WantHave, ""),
            rec(5, Codec::Raw, RequestType::WantBlock, ""),
            rec(25, Codec::Raw, RequestType::WantHave, ""),
        ];
        records[1].peer = NodeId([2; 32]);
        let map: OriginMap = [(NodeId([2; 32]), "gateway".to_string())].into();
        let series = rate_timeseries(&records, 10 * NANOS_PER_SEC, GroupBy::Origin(&map)).unwrap();
        // Three buckets times two groups, zero rows included.
        assert_eq!(series.len(), 6);
        let mass: f64 = series.iter().map(|p| p.rate_per_s * 10.0).sum();
        assert!((mass - 3.0).abs() < 1e-12);
        let gw: f64 = series
            .iter()
            .filter(|p| p.group == "gateway")
            .map(|p| p.rate_per_s * 10.0)
            .sum();
        assert!((gw - 1.0).abs() < 1e-12);
    }
}
