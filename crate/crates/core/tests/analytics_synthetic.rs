//! Fitting and reports on synthetic data with known answers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Zeta};
use wantscope_core::analytics::{
    codec_share, ecdf, fit_power_law, geo_share, popularity, rate_timeseries, FitOptions, GeoDb,
    GroupBy,
};
use wantscope_core::{Cid, Codec, Flags, NodeId, RequestType, TraceRecord, NANOS_PER_SEC};

fn zeta_sample(seed: u64, alpha: f64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Zeta::new(alpha).unwrap();
    (0..n).map(|_| dist.sample(&mut rng) as u64).collect()
}

fn geometric_sample(seed: u64, p: f64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Geometric::new(p).unwrap();
    (0..n).map(|_| dist.sample(&mut rng) + 1).collect()
}

#[test]
fn recovers_exponent_of_zeta_samples() {
    for seed in 0..3 {
        let xs = zeta_sample(seed, 2.5, 5000);
        let fit = fit_power_law(&xs, FitOptions { bootstraps: 50, seed }).unwrap();
        assert!((2.4..=2.6).contains(&fit.alpha), "seed {seed}: {fit:?}");
        assert!(fit.n_tail >= 2);
        assert!(fit.p_value >= 0.1, "seed {seed}: {fit:?}");
    }
}

#[test]
fn rejects_geometric_samples() {
    for seed in 0..3 {
        let xs = geometric_sample(seed, 0.1, 5000);
        let fit = fit_power_law(&xs, FitOptions { bootstraps: 50, seed }).unwrap();
        assert!(fit.p_value < 0.1, "seed {seed}: {fit:?}");
    }
}

#[test]
fn fit_is_deterministic_per_seed() {
    let xs = zeta_sample(42, 2.2, 800);
    let opts = FitOptions {
        bootstraps: 40,
        seed: 5,
    };
    assert_eq!(fit_power_law(&xs, opts).unwrap(), fit_power_law(&xs, opts).unwrap());
}

fn want(ts_s: u64, peer: u8, cid: Cid, addr: &str) -> TraceRecord {
    TraceRecord {
        timestamp_ns: ts_s * NANOS_PER_SEC,
        monitor: "m0".into(),
        peer: NodeId([peer; 32]),
        address: addr.into(),
        request_type: RequestType::WantHave,
        cid,
        flags: Flags::default(),
    }
}

#[test]
fn popularity_invariants_on_random_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let records: Vec<TraceRecord> = (0..5000)
        .map(|i| {
            let mut r = want(
                i,
                rng.random_range(0..40),
                Cid::new(Codec::Raw, [rng.random_range(0..60u8); 32]),
                "",
            );
            r.flags = Flags(rng.random_range(0..4));
            if rng.random_bool(0.2) {
                r.request_type = RequestType::Cancel;
            }
            r
        })
        .collect();
    let table = popularity(&records, true);
    let clean = records
        .iter()
        .filter(|r| r.flags.is_clear() && r.request_type.is_want())
        .count() as u64;
    assert_eq!(table.rrp_scores().iter().sum::<u64>(), clean);
    for p in table.entries.values() {
        assert!(1 <= p.urp && p.urp <= p.rrp);
    }
    let points = ecdf(&table.urp_scores()).unwrap();
    assert!(points.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 <= w[1].1));
    assert_eq!(points.last().unwrap().1, 1.0);
}

#[test]
fn eighty_percent_single_requester_shows_in_ecdf() {
    // 800 items requested by one peer, 200 by three peers.
    let mut records = Vec::new();
    for i in 0..1000u32 {
        let mut d = [0u8; 32];
        d[..4].copy_from_slice(&i.to_le_bytes());
        let cid = Cid::new(Codec::DagProtobuf, d);
        let requesters = if i < 800 { 1 } else { 3 };
        for p in 0..requesters {
            records.push(want(i as u64, p, cid, ""));
        }
    }
    let points = ecdf(&popularity(&records, true).urp_scores()).unwrap();
    assert_eq!(points[0], (1, 0.8));
}

#[test]
fn shares_sum_to_hundred() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let codecs = [Codec::DagProtobuf, Codec::Raw, Codec::DagCbor, Codec::GitRaw];
    let db = GeoDb::from_csv("10.0.0.0/8,US\n11.0.0.0/8,NL\n12.0.0.0/8,DE\n".as_bytes()).unwrap();
    let records: Vec<TraceRecord> = (0..3000)
        .map(|i| {
            want(
                i,
                1,
                Cid::new(codecs[rng.random_range(0..4)], [0; 32]),
                &format!("/ip4/{}.1.2.3/tcp/4001", rng.random_range(9..13)),
            )
        })
        .collect();
    let total: f64 = codec_share(&records).iter().map(|r| r.share_pct).sum();
    assert!((total - 100.0).abs() < 0.01);
    let geo = geo_share(&records, &db).unwrap();
    let total: f64 = geo.iter().map(|r| r.share_pct).sum();
    assert!((total - 100.0).abs() < 0.01);
    assert!(geo.iter().any(|r| r.label == "??"));
}

#[test]
fn rate_mass_equals_record_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut ts: Vec<u64> = (0..4000).map(|_| rng.random_range(0..86_400)).collect();
    ts.sort_unstable();
    let records: Vec<TraceRecord> = ts
        .into_iter()
        .map(|t| want(t, 1, Cid::new(Codec::Raw, [0; 32]), ""))
        .collect();
    for bucket_s in [1u64, 60, 3600, 7200] {
        let series =
            rate_timeseries(&records, bucket_s * NANOS_PER_SEC, GroupBy::RequestType).unwrap();
        let mass: f64 = series.iter().map(|p| p.rate_per_s * bucket_s as f64).sum();
        assert!((mass - records.len() as f64).abs() < 1e-6, "bucket {bucket_s}");
    }
}
