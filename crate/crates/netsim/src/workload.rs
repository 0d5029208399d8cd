//! Catalog generation, popularity sampling and the stratified assignment of
//! codecs and countries.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::LogNormal;
use wantscope_core::{Cid, Codec};

use crate::config::{PopularitySampler, Share, SimConfig};

/// First octet of the /8 block used for country `i` of the address plan.
pub const COUNTRY_BLOCK_BASE: usize = 20;

/// Assigns each item a class so that the weight carried by every class
/// tracks its share as closely as possible. Items are visited in `order`;
/// each goes to the class furthest below its target.
pub fn stratify(weights: &[f64], shares: &[f64], order: &[usize]) -> Vec<usize> {
    let total_share: f64 = shares.iter().sum();
    let targets: Vec<f64> = shares.iter().map(|s| s / total_share).collect();
    let mut assigned = vec![0.0; shares.len()];
    let mut mass = 0.0;
    let mut class = vec![0; weights.len()];
    for &i in order {
        mass += weights[i];
        let (k, _) = targets
            .iter()
            .zip(&assigned)
            .map(|(t, a)| t * mass - a)
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, d)| if d > best.1 { (k, d) } else { best });
        assigned[k] += weights[i];
        class[i] = k;
    }
    class
}

pub struct Catalog {
    pub items: Vec<Cid>,
    /// Probability of each item being requested.
    pub weights: Vec<f64>,
    pub resolvable: Vec<bool>,
    sampler: Option<WeightedIndex<f64>>,
}

impl Catalog {
    pub fn generate<R: Rng + ?Sized>(cfg: &SimConfig, rng: &mut R) -> Catalog {
        let n = cfg.catalog_size;
        let mut weights: Vec<f64> = match cfg.popularity_sampler {
            PopularitySampler::Uniform => vec![1.0; n],
            PopularitySampler::Zipf { s } => (1..=n).map(|k| (k as f64).powf(-s)).collect(),
            PopularitySampler::LogNormal { mu, sigma } => {
                let dist = LogNormal::new(mu, sigma).expect("validated log-normal");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        // Popularity rank is unrelated to position in the catalog.
        weights.shuffle(rng);
        let total: f64 = weights.iter().sum();
        if total > 0.0 {
            weights.iter_mut().for_each(|w| *w /= total);
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let shares: Vec<f64> = cfg.codec_mix.iter().map(|s| s.weight).collect();
        let codecs = stratify(&weights, &shares, &order);

        let salt: u64 = rng.random();
        let items = (0..n)
            .map(|i| {
                let mut content = Vec::with_capacity(24);
                content.extend_from_slice(b"item");
                content.extend_from_slice(&salt.to_le_bytes());
                content.extend_from_slice(&(i as u64).to_le_bytes());
                Cid::hash_content(&content, cfg.codec_mix[codecs[i]].value)
            })
            .collect();

        let unresolvable = (cfg.unresolvable_fraction * n as f64).round() as usize;
        let mut resolvable = vec![true; n];
        order.shuffle(rng);
        for &i in order.iter().take(unresolvable) {
            resolvable[i] = false;
        }

        let sampler = WeightedIndex::new(&weights).ok();
        Catalog {
            items,
            weights,
            resolvable,
            sampler,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        self.sampler.as_ref().map(|s| s.sample(rng))
    }
}

/// Country index per node, stratified over a shuffled node order.
pub fn assign_countries<R: Rng + ?Sized>(
    n: usize,
    plan: &[Share<String>],
    rng: &mut R,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let shares: Vec<f64> = plan.iter().map(|s| s.weight).collect();
    stratify(&vec![1.0; n], &shares, &order)
}

/// Endpoint of the `serial`-th node placed in country `country`.
pub fn node_address(country: usize, serial: usize) -> String {
    format!(
        "/ip4/{}.{}.{}.{}/tcp/4001",
        COUNTRY_BLOCK_BASE + country,
        (serial >> 16) & 0xff,
        (serial >> 8) & 0xff,
        serial & 0xff
    )
}

pub fn monitor_address(i: usize) -> String {
    format!("/ip4/192.0.2.{}/tcp/4001", i % 256)
}

/// `cidr,country` lines matching [`node_address`].
pub fn geodb_csv(plan: &[Share<String>]) -> String {
    let mut out = String::from("cidr,country\n");
    for (i, s) in plan.iter().enumerate() {
        out.push_str(&format!("{}.0.0.0/8,{}\n", COUNTRY_BLOCK_BASE + i, s.value));
    }
    out
}

/// Codec of the most common entry in a mix, handy for scripted content.
pub fn dominant_codec(mix: &[Share<Codec>]) -> Codec {
    mix.iter()
        .max_by(|a, b| a.weight.total_cmp(&b.weight))
        .map_or(Codec::Raw, |s| s.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stratify_tracks_shares() {
        let weights = vec![1.0; 10_000];
        let order: Vec<usize> = (0..10_000).collect();
        let class = stratify(&weights, &[86.21, 13.42, 0.37], &order);
        let count = |k| class.iter().filter(|&&c| c == k).count();
        assert_eq!((count(0), count(1), count(2)), (8621, 1342, 37));
    }

    #[test]
    fn catalog_is_deterministic_and_weighted() {
        let cfg = SimConfig {
            catalog_size: 500,
            unresolvable_fraction: 0.2,
            ..SimConfig::default()
        };
        let a = Catalog::generate(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let b = Catalog::generate(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a.items, b.items);
        assert_eq!(a.resolvable.iter().filter(|r| !**r).count(), 100);
        assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mass = |codec| -> f64 {
            a.items
                .iter()
                .zip(&a.weights)
                .filter(|(c, _)| c.codec == codec)
                .map(|(_, w)| w)
                .sum()
        };
        assert!((mass(Codec::DagProtobuf) - 0.8621).abs() < 0.01);
    }

    #[test]
    fn addresses_resolve_to_plan() {
        let plan = crate::config::default_address_plan();
        let db = wantscope_core::analytics::GeoDb::from_csv(geodb_csv(&plan).as_bytes()).unwrap();
        assert_eq!(db.country_of(&node_address(0, 70_000)), "US");
        assert_eq!(db.country_of(&node_address(1, 3)), "NL");
    }
}
