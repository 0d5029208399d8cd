use serde::{Deserialize, Serialize};
use wantscope_core::Codec;

use crate::SimError;

/// How request targets are drawn from the catalog.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopularitySampler {
    /// Rank `k` (1-based) has weight `k^-s`.
    Zipf { s: f64 },
    Uniform,
    /// Per-item weights drawn from a log-normal distribution.
    LogNormal { mu: f64, sigma: f64 },
}

/// Exponential on/off sessions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Churn {
    pub mean_session_s: f64,
    pub mean_offline_s: f64,
}

/// A weighted label, used for the codec mix and the address plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Share<T> {
    pub value: T,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_dht_servers: usize,
    pub n_clients: usize,
    pub n_gateways: usize,
    pub n_monitors: usize,
    /// Target `[min, max]` connections per regular node.
    pub degree_range: [usize; 2],
    pub catalog_size: usize,
    pub popularity_sampler: PopularitySampler,
    /// Poisson request rate per server or client, in requests per second.
    pub request_rate_per_node: f64,
    pub rebroadcast_interval: f64,
    pub unresolvable_fraction: f64,
    pub cache_capacity_blocks: usize,
    pub gateway_cache_hit_ratio: f64,
    pub churn: Option<Churn>,
    pub duration_s: f64,
    pub seed: u64,

    /// Wait for a HAVE before falling back to the DHT.
    pub want_timeout_s: f64,
    /// Probability that a regular node connects to a given monitor.
    pub monitor_connect_fraction: f64,
    /// IPFS nodes behind each gateway DNS name.
    pub nodes_per_gateway: usize,
    /// Poisson HTTP request rate per gateway name.
    pub gateway_http_rate_per_s: f64,
    pub codec_mix: Vec<Share<Codec>>,
    /// Country codes with their share of nodes.
    pub address_plan: Vec<Share<String>>,
    /// Keep a log of every delivered message.
    pub record_messages: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_dht_servers: 0,
            n_clients: 0,
            n_gateways: 0,
            n_monitors: 0,
            degree_range: [600, 900],
            catalog_size: 0,
            popularity_sampler: PopularitySampler::Zipf { s: 1.0 },
            request_rate_per_node: 0.0,
            rebroadcast_interval: 30.0,
            unresolvable_fraction: 0.0,
            cache_capacity_blocks: 1024,
            gateway_cache_hit_ratio: 0.0,
            churn: None,
            duration_s: 0.0,
            seed: 0,
            want_timeout_s: 1.0,
            monitor_connect_fraction: 0.5,
            nodes_per_gateway: 1,
            gateway_http_rate_per_s: 0.0,
            codec_mix: default_codec_mix(),
            address_plan: default_address_plan(),
            record_messages: false,
        }
    }
}

/// Codec shares of requests observed on the public network.
pub fn default_codec_mix() -> Vec<Share<Codec>> {
    [
        (Codec::DagProtobuf, 86.21),
        (Codec::Raw, 13.42),
        (Codec::DagCbor, 0.37),
    ]
    .into_iter()
    .map(|(value, weight)| Share { value, weight })
    .collect()
}

/// Requester countries observed on the public network; the unlisted
/// remainder is spread over a few further countries.
pub fn default_address_plan() -> Vec<Share<String>> {
    [
        ("US", 45.65),
        ("NL", 13.85),
        ("DE", 12.72),
        ("CA", 7.61),
        ("FR", 6.64),
        ("GB", 4.51),
        ("JP", 4.51),
        ("SG", 4.51),
    ]
    .into_iter()
    .map(|(c, weight)| Share {
        value: c.to_string(),
        weight,
    })
    .collect()
}

impl SimConfig {
    /// Servers, clients and gateway nodes; monitors excluded.
    pub fn regular_nodes(&self) -> usize {
        self.n_dht_servers + self.n_clients + self.n_gateways * self.nodes_per_gateway
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |field: &str, msg: String| Err(SimError::Config {
            field: field.to_string(),
            msg,
        });
        let [lo, hi] = self.degree_range;
        if lo > hi {
            return bad("degree_range", format!("min {lo} exceeds max {hi}"));
        }
        let n = self.regular_nodes();
        if n > 0 && lo >= n {
            return bad(
                "degree_range",
                format!("min degree {lo} impossible with {n} regular nodes"),
            );
        }
        for (field, v) in [
            ("unresolvable_fraction", self.unresolvable_fraction),
            ("gateway_cache_hit_ratio", self.gateway_cache_hit_ratio),
            ("monitor_connect_fraction", self.monitor_connect_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(field, format!("{v} is not a fraction in [0, 1]"));
            }
        }
        for (field, v) in [
            ("request_rate_per_node", self.request_rate_per_node),
            ("gateway_http_rate_per_s", self.gateway_http_rate_per_s),
            ("duration_s", self.duration_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(field, format!("{v} must be finite and non-negative"));
            }
        }
        for (field, v) in [
            ("rebroadcast_interval", self.rebroadcast_interval),
            ("want_timeout_s", self.want_timeout_s),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(field, format!("{v} must be positive"));
            }
        }
        if self.n_gateways > 0 && self.nodes_per_gateway == 0 {
            return bad("nodes_per_gateway", "gateways need at least one node".into());
        }
        let requests = self.request_rate_per_node > 0.0
            || (self.gateway_http_rate_per_s > 0.0 && self.n_gateways > 0);
        if requests && self.catalog_size == 0 {
            return bad("catalog_size", "requests need a non-empty catalog".into());
        }
        match self.popularity_sampler {
            PopularitySampler::Zipf { s } if !(s.is_finite() && s >= 0.0) => {
                return bad("popularity_sampler", format!("zipf exponent {s} must be >= 0"));
            }
            PopularitySampler::LogNormal { sigma, mu } if !(sigma >= 0.0 && mu.is_finite()) => {
                return bad("popularity_sampler", "log-normal needs sigma >= 0".into());
            }
            _ => {}
        }
        if let Some(c) = self.churn {
            if !(c.mean_session_s > 0.0 && c.mean_offline_s > 0.0) {
                return bad("churn", "mean session and offline times must be positive".into());
            }
        }
        check_shares("codec_mix", &self.codec_mix)?;
        check_shares("address_plan", &self.address_plan)?;
        if self.address_plan.len() > 200 {
            return bad("address_plan", "at most 200 countries".into());
        }
        Ok(())
    }
}

fn check_shares<T>(field: &str, shares: &[Share<T>]) -> Result<(), SimError> {
    let ok = !shares.is_empty()
        && shares.iter().all(|s| s.weight.is_finite() && s.weight >= 0.0)
        && shares.iter().any(|s| s.weight > 0.0);
    if ok {
        Ok(())
    } else {
        Err(SimError::Config {
            field: field.to_string(),
            msg: "needs at least one positive, finite weight".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_when_empty() {
        SimConfig::default().validate().unwrap();
    }

    #[test]
    fn impossible_degree_is_rejected() {
        let cfg = SimConfig {
            n_dht_servers: 10,
            degree_range: [10, 12],
            ..SimConfig::default()
        };
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, SimError::Config { ref field, .. } if field == "degree_range"));
    }

    #[test]
    fn fractions_checked() {
        let cfg = SimConfig {
            unresolvable_fraction: 1.5,
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_round_trip_with_defaults() {
        let cfg: SimConfig =
            serde_json::from_str(r#"{"n_dht_servers": 5, "degree_range": [2, 3], "popularity_sampler": {"zipf": {"s": 0.8}}}"#)
                .unwrap();
        assert_eq!(cfg.n_dht_servers, 5);
        assert_eq!(cfg.rebroadcast_interval, 30.0);
        let back: SimConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<SimConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
