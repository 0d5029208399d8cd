//! Network-size estimators.
//!
//! Three independent views of the population size `N`:
//!
//! - capture-recapture on two monitor peer sets, `N = |P1| |P2| / |P1 ∩ P2|`;
//! - the committee-occupancy (coupon collector with group drawings) model for
//!   `r` monitors each holding `w` connections, whose likelihood maximum
//!   satisfies `N - N (1 - m/N)^(1/r) - w = 0` for a union of `m` peers;
//! - the DHT view: with `N` uniform identifiers the XOR distance `x` from a
//!   random target to its closest node has CDF `1 - (1 - x)^N`, giving the
//!   maximum-likelihood estimate `N = -k / Σ ln(1 - x_j)` over `k` targets.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigUint;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{ln_binomial, log_add};
use crate::types::{ConnEvent, ConnKind, NodeId};
use crate::NANOS_PER_SEC;

#[derive(Debug, Error, PartialEq)]
pub enum EstimateError {
    /// No overlap between the samples; the estimate diverges.
    #[error("samples are disjoint, the estimate diverges")]
    DisjointSamples,
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("argument out of domain: {0}")]
    Domain(String),
    #[error("window end {t1} must be after start {t0}")]
    InvalidWindow { t0: u64, t1: u64 },
}

pub type Result<T> = std::result::Result<T, EstimateError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    TwoMonitor,
    CouponMle,
    DhtMinDistSingle,
    DhtMinDistMulti,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeEstimate {
    pub n_hat: f64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iterations: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub residual: Option<f64>,
}

impl SizeEstimate {
    fn closed_form(n_hat: f64, method: Method) -> Self {
        SizeEstimate {
            n_hat,
            method,
            iterations: None,
            residual: None,
        }
    }
}

/// Capture-recapture estimate from two peer sets.
pub fn estimate_two_monitor(p1: u64, p2: u64, inter: u64) -> Result<SizeEstimate> {
    if inter == 0 {
        return Err(EstimateError::DisjointSamples);
    }
    if inter > p1.min(p2) {
        return Err(EstimateError::Domain(format!(
            "intersection {inter} exceeds a set size ({p1}, {p2})"
        )));
    }
    Ok(SizeEstimate::closed_form(
        p1 as f64 * p2 as f64 / inter as f64,
        Method::TwoMonitor,
    ))
}

/// Probability of seeing exactly `m` distinct peers after `r` independent
/// draws of `w` peers each, without replacement, from `n` peers.
///
/// The alternating sum is accumulated in log space with separate positive
/// and negative parts. When the two parts cancel beyond what `f64` can
/// resolve, the sum is recomputed exactly with big integers.
pub fn coupon_density(n: u64, w: u64, r: u32, m: u64) -> Result<f64> {
    if r == 0 {
        return Err(EstimateError::Domain("r must be at least 1".into()));
    }
    if !(w <= m && m <= n && m <= w.saturating_mul(r as u64)) {
        return Err(EstimateError::Domain(format!(
            "need w <= m <= min(N, r*w), got N={n} w={w} r={r} m={m}"
        )));
    }
    let ln_denominator = r as f64 * ln_binomial(n, w);
    if ln_denominator <= EXACT_DENSITY_MAX_BITS * std::f64::consts::LN_2 {
        let numerator = binomial_big(n, m) * exact_occupancy_sum(m, w, r);
        return Ok(ratio_to_f64(&numerator, &binomial_big(n, w).pow(r)));
    }
    let ln_sum = ln_occupancy_sum(m, w, r);
    Ok((ln_binomial(n, m) - ln_denominator + ln_sum).exp().clamp(0.0, 1.0))
}

/// Up to this many bits in `C(N, w)^r` the density is evaluated as an exact
/// ratio of integers.
const EXACT_DENSITY_MAX_BITS: f64 = 16384.0;

/// `num / den` rounded to the nearest `f64`, for `num <= den`.
fn ratio_to_f64(num: &BigUint, den: &BigUint) -> f64 {
    use num_traits::ToPrimitive;
    if num.bits() == 0 {
        return 0.0;
    }
    // Scale so the quotient carries 66+ significant bits, then fold the
    // remainder into a sticky bit so the final rounding is correct.
    let shift = (den.bits() + 66).saturating_sub(num.bits());
    let scaled = num << shift;
    let mut q = &scaled / den;
    if (&q * den) != scaled {
        q |= BigUint::from(1u32);
    }
    let mut v = q.to_f64().unwrap_or(f64::INFINITY);
    let mut e = -(shift as i64);
    while e < -1000 {
        v *= 2f64.powi(-1000);
        e += 1000;
    }
    v * 2f64.powi(e as i32)
}

/// `ln Σ_{k=w}^{m} (-1)^(m-k) C(m,k) C(k,w)^r`.
fn ln_occupancy_sum(m: u64, w: u64, r: u32) -> f64 {
    let mut pos = f64::NEG_INFINITY;
    let mut neg = f64::NEG_INFINITY;
    for k in w..=m {
        let term = ln_binomial(m, k) + r as f64 * ln_binomial(k, w);
        if (m - k).is_multiple_of(2) {
            pos = log_add(pos, term);
        } else {
            neg = log_add(neg, term);
        }
    }
    // exp(neg - pos) close to 1 means the difference lost most of its digits.
    const MAX_CANCELLATION: f64 = 1e-6;
    let ratio = (neg - pos).exp();
    if neg == f64::NEG_INFINITY || 1.0 - ratio > MAX_CANCELLATION {
        pos + (-ratio).ln_1p()
    } else {
        ln_biguint(&exact_occupancy_sum(m, w, r))
    }
}

fn exact_occupancy_sum(m: u64, w: u64, r: u32) -> BigUint {
    let mut pos = BigUint::ZERO;
    let mut neg = BigUint::ZERO;
    // C(m, w) and C(w, w), stepped forward with k.
    let mut c_m_k = binomial_big(m, w);
    let mut c_k_w = BigUint::from(1u32);
    for k in w..=m {
        let term = &c_m_k * c_k_w.pow(r);
        if (m - k).is_multiple_of(2) {
            pos += term;
        } else {
            neg += term;
        }
        if k < m {
            c_m_k = c_m_k * (m - k) / (k + 1);
            c_k_w = c_k_w * (k + 1) / (k + 1 - w);
        }
    }
    pos - neg
}

fn binomial_big(n: u64, k: u64) -> BigUint {
    let mut acc = BigUint::from(1u32);
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

fn ln_biguint(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits == 0 {
        return f64::NEG_INFINITY;
    }
    let shift = bits.saturating_sub(64);
    let top: BigUint = x >> shift;
    let top = top.iter_u64_digits().next().unwrap_or(0) as f64;
    top.ln() + shift as f64 * std::f64::consts::LN_2
}

/// Left-hand side of the likelihood equation, `N - N (1 - m/N)^(1/r) - w`,
/// written with `expm1`/`ln_1p` to stay accurate for `N >> m`.
pub fn coupon_mle_residual(n: f64, m: f64, r: u32, w: f64) -> f64 {
    let shrink = ((-m / n).ln_1p() / r as f64).exp_m1();
    -n * shrink - w
}

const COUPON_UPPER_BRACKET: f64 = 1e12;
const COUPON_REL_TOL: f64 = 1e-9;

/// Solves the coupon-collector likelihood equation for `N` by bisection on
/// `[m, 1e12]`.
///
/// `m` is the union size and `w` the (mean) draw size; both may be
/// fractional when they are time averages.
pub fn solve_coupon_mle(m: f64, r: u32, w: f64) -> Result<SizeEstimate> {
    if r < 2 {
        return Err(EstimateError::Domain("need at least two draws".into()));
    }
    if !(w > 0.0 && m.is_finite() && w.is_finite()) {
        return Err(EstimateError::Domain(format!("bad draw size w={w}, m={m}")));
    }
    let rw = r as f64 * w;
    if m < w || m > rw * (1.0 + 1e-12) {
        return Err(EstimateError::Domain(format!(
            "need w <= m <= r*w, got w={w} m={m} r={r}"
        )));
    }
    if (rw - m).abs() <= 1e-9 * rw {
        return Err(EstimateError::DisjointSamples);
    }
    if m == w {
        // N = w zeroes the equation: complete overlap.
        return Ok(SizeEstimate {
            n_hat: w,
            method: Method::CouponMle,
            iterations: Some(0),
            residual: Some(0.0),
        });
    }

    let f = |n: f64| coupon_mle_residual(n, m, r, w);
    let (mut lo, mut hi) = (m, COUPON_UPPER_BRACKET);
    if f(hi) >= 0.0 {
        // Root beyond the bracket: overlap too small to resolve.
        return Err(EstimateError::DisjointSamples);
    }
    let mut iterations = 0;
    while hi - lo > COUPON_REL_TOL * lo && iterations < 200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    let n_hat = 0.5 * (lo + hi);
    Ok(SizeEstimate {
        n_hat,
        method: Method::CouponMle,
        iterations: Some(iterations),
        residual: Some(f(n_hat)),
    })
}

/// Maximum-likelihood size from closest-node XOR distances normalised to
/// `[0, 1)`.
pub fn dht_size_from_min_distance(xs: &[f64]) -> Result<SizeEstimate> {
    if xs.is_empty() {
        return Err(EstimateError::Domain("no distance samples".into()));
    }
    let mut log_sum = 0.0;
    for &x in xs {
        if x.is_nan() || !(0.0..1.0).contains(&x) {
            return Err(EstimateError::Domain(format!("distance {x} outside [0, 1)")));
        }
        if x == 0.0 {
            return Err(EstimateError::DegenerateSample(
                "zero distance carries no information about N".into(),
            ));
        }
        log_sum += (-x).ln_1p();
    }
    let method = if xs.len() == 1 {
        Method::DhtMinDistSingle
    } else {
        Method::DhtMinDistMulti
    };
    Ok(SizeEstimate::closed_form(-(xs.len() as f64) / log_sum, method))
}

/// Fraction of a reference population a monitor is connected to.
pub fn coverage(mean_connected: f64, network_size_ref: f64) -> Result<f64> {
    if !(mean_connected > 0.0 && network_size_ref > 0.0) {
        return Err(EstimateError::Domain(
            "coverage inputs must be positive".into(),
        ));
    }
    Ok((mean_connected / network_size_ref).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairIntersection {
    pub a: String,
    pub b: String,
    pub size: u64,
}

/// Peer-set cardinalities of `r` monitors over a time window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeerSetStats {
    pub monitors: Vec<String>,
    /// Peers connected at any point of the window, per monitor.
    pub sizes: Vec<u64>,
    pub intersections: Vec<PairIntersection>,
    /// Union of all monitors' window peer sets.
    pub union: u64,
    pub r: u32,
    /// Mean instantaneous connection count, per monitor.
    pub mean_connected: Vec<f64>,
    /// Mean instantaneous size of the union across monitors.
    pub mean_union: f64,
    /// Draw size: arithmetic mean of `mean_connected`.
    pub w: f64,
}

impl PeerSetStats {
    pub fn intersection(&self, a: &str, b: &str) -> Option<u64> {
        self.intersections
            .iter()
            .find(|p| (p.a == a && p.b == b) || (p.a == b && p.b == a))
            .map(|p| p.size)
    }

    /// Capture-recapture estimate on the first two monitors.
    pub fn two_monitor_estimate(&self) -> Result<SizeEstimate> {
        if self.monitors.len() < 2 {
            return Err(EstimateError::Domain("need two monitors".into()));
        }
        estimate_two_monitor(self.sizes[0], self.sizes[1], self.intersections[0].size)
    }

    /// Coupon-collector estimate on time-averaged connection counts.
    pub fn coupon_estimate(&self) -> Result<SizeEstimate> {
        solve_coupon_mle(self.mean_union, self.r, self.w)
    }
}

/// Spacing of the instants at which connection counts are sampled.
pub const CONNECTION_SAMPLE_INTERVAL_NS: u64 = 60 * NANOS_PER_SEC;

/// Reconstructs per-monitor peer sets over `[t0, t1]` from connection events.
pub fn peer_set_stats(events: &[ConnEvent], t0: u64, t1: u64) -> Result<PeerSetStats> {
    if t1 <= t0 {
        return Err(EstimateError::InvalidWindow { t0, t1 });
    }
    let monitors: Vec<String> = events
        .iter()
        .map(|e| e.monitor.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = monitors
        .iter()
        .enumerate()
        .map(|(i, m)| (m.as_str(), i))
        .collect();

    let mut by_pair: BTreeMap<(usize, NodeId), Vec<(u64, ConnKind)>> = BTreeMap::new();
    for e in events {
        by_pair
            .entry((index[e.monitor.as_str()], e.peer))
            .or_default()
            .push((e.timestamp_ns, e.kind));
    }

    // Connection intervals [start, end), end = u64::MAX while open.
    let mut intervals: Vec<(usize, NodeId, u64, u64)> = Vec::new();
    for ((mon, peer), mut evs) in by_pair {
        evs.sort_by_key(|&(t, k)| (t, k == ConnKind::Connect));
        let mut open: Option<u64> = None;
        for (t, kind) in evs {
            match (kind, open) {
                (ConnKind::Connect, None) => open = Some(t),
                (ConnKind::Disconnect, Some(start)) => {
                    intervals.push((mon, peer, start, t));
                    open = None;
                }
                _ => {}
            }
        }
        if let Some(start) = open {
            intervals.push((mon, peer, start, u64::MAX));
        }
    }

    let r = monitors.len();
    let mut sets: Vec<BTreeSet<NodeId>> = vec![BTreeSet::new(); r];
    for &(mon, peer, start, end) in &intervals {
        if start <= t1 && end > t0 {
            sets[mon].insert(peer);
        }
    }

    let instants: Vec<u64> = (0..)
        .map(|k| t0 + k * CONNECTION_SAMPLE_INTERVAL_NS)
        .take_while(|&t| t < t1)
        .collect();
    let mut connected_sum = vec![0u64; r];
    let mut union_sum = 0u64;
    for &t in &instants {
        let mut now: BTreeSet<NodeId> = BTreeSet::new();
        for &(mon, peer, start, end) in &intervals {
            if start <= t && t < end {
                connected_sum[mon] += 1;
                now.insert(peer);
            }
        }
        union_sum += now.len() as u64;
    }
    let samples = instants.len().max(1) as f64;
    let mean_connected: Vec<f64> = connected_sum.iter().map(|&c| c as f64 / samples).collect();
    let w = if r == 0 {
        0.0
    } else {
        mean_connected.iter().sum::<f64>() / r as f64
    };

    let mut intersections = Vec::new();
    for i in 0..r {
        for j in i + 1..r {
            intersections.push(PairIntersection {
                a: monitors[i].clone(),
                b: monitors[j].clone(),
                size: sets[i].intersection(&sets[j]).count() as u64,
            });
        }
    }
    let union: BTreeSet<&NodeId> = sets.iter().flatten().collect();

    Ok(PeerSetStats {
        sizes: sets.iter().map(|s| s.len() as u64).collect(),
        intersections,
        union: union.len() as u64,
        r: r as u32,
        mean_connected,
        mean_union: union_sum as f64 / samples,
        w,
        monitors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn two_monitor_examples() {
        assert_eq!(estimate_two_monitor(100, 100, 100).unwrap().n_hat, 100.0);
        assert_eq!(estimate_two_monitor(700, 700, 49).unwrap().n_hat, 10000.0);
        assert_eq!(
            estimate_two_monitor(5, 5, 0).unwrap_err(),
            EstimateError::DisjointSamples
        );
        assert!(matches!(
            estimate_two_monitor(5, 3, 4),
            Err(EstimateError::Domain(_))
        ));
        assert_eq!(
            estimate_two_monitor(300, 500, 20).unwrap().n_hat,
            estimate_two_monitor(500, 300, 20).unwrap().n_hat
        );
    }

    #[test]
    fn single_draw_has_exactly_w_distinct() {
        for (n, w) in [(5, 2), (30, 4), (1000, 700)] {
            assert!((coupon_density(n, w, 1, w).unwrap() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn density_small_case() {
        // Two single draws from three peers: 6 of 9 ordered pairs differ.
        let p = coupon_density(3, 1, 2, 2).unwrap();
        assert!((p - 2.0 / 3.0).abs() < 1e-12, "{p}");
    }

    #[test]
    fn density_domain_errors() {
        assert!(coupon_density(10, 3, 2, 2).is_err());
        assert!(coupon_density(10, 3, 2, 7).is_err());
        assert!(coupon_density(4, 3, 2, 5).is_err());
        assert!(coupon_density(10, 3, 0, 3).is_err());
    }

    #[test]
    fn exact_fallback_agrees_with_log_space_where_both_work() {
        for (m, w, r) in [(6, 2, 3), (12, 4, 4), (9, 5, 3)] {
            let log_space = {
                let mut pos = f64::NEG_INFINITY;
                let mut neg = f64::NEG_INFINITY;
                for k in w..=m {
                    let t = ln_binomial(m, k) + r as f64 * ln_binomial(k, w);
                    if (m - k).is_multiple_of(2) {
                        pos = log_add(pos, t);
                    } else {
                        neg = log_add(neg, t);
                    }
                }
                pos + (-(neg - pos).exp()).ln_1p()
            };
            let exact = ln_biguint(&exact_occupancy_sum(m, w, r));
            assert!((log_space - exact).abs() < 1e-8, "{m} {w} {r}");
        }
        // Where the alternating sum cancels badly, the dispatcher must still
        // agree with exact arithmetic.
        for (m, w, r) in [(20, 7, 3), (40, 10, 4), (60, 30, 2)] {
            let exact = ln_biguint(&exact_occupancy_sum(m, w, r));
            assert!((ln_occupancy_sum(m, w, r) - exact).abs() < 1e-9, "{m} {w} {r}");
        }
    }

    #[test]
    fn large_arguments_stay_finite() {
        // Heavy cancellation regime: forced onto the exact path.
        let p = coupon_density(10_000, 700, 2, 1351).unwrap();
        assert!(p.is_finite() && p > 0.0 && p < 1.0, "{p}");
    }

    #[test]
    fn coupon_mle_total_overlap() {
        for r in 2..6 {
            let est = solve_coupon_mle(700.0, r, 700.0).unwrap();
            assert_eq!(est.n_hat, 700.0);
        }
    }

    #[test]
    fn coupon_mle_matches_two_monitor_for_r2() {
        let est = solve_coupon_mle(1351.0, 2, 700.0).unwrap();
        assert!(rel(est.n_hat, 10_000.0) < 1e-6, "{}", est.n_hat);
        assert!(est.residual.unwrap().abs() < 1e-3);
        assert!(est.n_hat >= 1351.0);
    }

    #[test]
    fn coupon_mle_errors() {
        assert_eq!(
            solve_coupon_mle(1400.0, 2, 700.0).unwrap_err(),
            EstimateError::DisjointSamples
        );
        assert!(matches!(
            solve_coupon_mle(1000.0, 1, 700.0),
            Err(EstimateError::Domain(_))
        ));
        assert!(matches!(
            solve_coupon_mle(600.0, 2, 700.0),
            Err(EstimateError::Domain(_))
        ));
        assert!(matches!(
            solve_coupon_mle(1500.0, 2, 700.0),
            Err(EstimateError::Domain(_))
        ));
    }

    #[test]
    fn dht_single_observation_inverts() {
        let x = 1.0 - (-1.0f64 / 100.0).exp();
        let est = dht_size_from_min_distance(&[x]).unwrap();
        assert!(rel(est.n_hat, 100.0) < 1e-12);
        assert_eq!(est.method, Method::DhtMinDistSingle);
        let multi = dht_size_from_min_distance(&[x; 17]).unwrap();
        assert!(rel(multi.n_hat, est.n_hat) < 1e-12);
        assert_eq!(multi.method, Method::DhtMinDistMulti);
    }

    #[test]
    fn dht_errors() {
        assert!(matches!(
            dht_size_from_min_distance(&[0.1, 0.0]),
            Err(EstimateError::DegenerateSample(_))
        ));
        assert!(matches!(
            dht_size_from_min_distance(&[1.0]),
            Err(EstimateError::Domain(_))
        ));
        assert!(matches!(
            dht_size_from_min_distance(&[]),
            Err(EstimateError::Domain(_))
        ));
    }

    #[test]
    fn coverage_examples() {
        let c = coverage(7132.56, 14411.42).unwrap();
        assert!((c - 0.4949).abs() < 1e-4, "{c}");
        assert_eq!(coverage(10.0, 10.0).unwrap(), 1.0);
        assert_eq!(coverage(20.0, 10.0).unwrap(), 1.0);
        assert!(coverage(0.0, 10.0).is_err());
    }

    fn ev(t: u64, mon: &str, peer: u8, kind: ConnKind) -> ConnEvent {
        ConnEvent {
            timestamp_ns: t,
            monitor: mon.into(),
            peer: NodeId([peer; 32]),
            kind,
        }
    }

    #[test]
    fn no_events_give_zero_stats() {
        let s = peer_set_stats(&[], 0, 100).unwrap();
        assert_eq!(s.r, 0);
        assert_eq!(s.union, 0);
        assert_eq!(s.w, 0.0);
        assert!(s.sizes.is_empty());
        assert_eq!(
            peer_set_stats(&[], 5, 5).unwrap_err(),
            EstimateError::InvalidWindow { t0: 5, t1: 5 }
        );
    }

    #[test]
    fn shared_peer_for_whole_window() {
        let events = [
            ev(0, "a", 1, ConnKind::Connect),
            ev(0, "b", 1, ConnKind::Connect),
        ];
        let s = peer_set_stats(&events, 0, 3600 * NANOS_PER_SEC).unwrap();
        assert_eq!(s.sizes, vec![1, 1]);
        assert_eq!(s.intersection("a", "b"), Some(1));
        assert_eq!(s.union, 1);
        assert_eq!(s.mean_connected, vec![1.0, 1.0]);
        assert_eq!(s.mean_union, 1.0);
    }
}
