//! Discrete power-law fitting with a goodness-of-fit p-value.
//!
//! For each candidate lower cut-off `x_min` the exponent is the maximum
//! likelihood estimate of `P(x) = x^-alpha / zeta(alpha, x_min)`, and the
//! cut-off is the one minimising the Kolmogorov-Smirnov distance between the
//! tail and its fitted model. The p-value comes from a semi-parametric
//! bootstrap: synthetic data sets draw below-cut-off values from the data and
//! tail values from the fitted model, are refitted with the same procedure,
//! and the p-value is the share whose KS distance is at least the observed
//! one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::AnalyticsError;
use crate::stats::hurwitz_zeta;

pub const DEFAULT_BOOTSTRAPS: u32 = 250;
/// Fits with a p-value below this are rejected as power laws.
pub const REJECTION_P_VALUE: f64 = 0.1;

const MIN_SAMPLES: usize = 50;
const ALPHA_RANGE: (f64, f64) = (1.01, 20.0);
const ALPHA_TOL: f64 = 1e-7;
/// Candidate cut-offs are limited to this quantile of the sample, so the
/// tail always keeps at least a tenth of the data.
const XMIN_QUANTILE: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FitOptions {
    pub bootstraps: u32,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            bootstraps: DEFAULT_BOOTSTRAPS,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub alpha: f64,
    pub x_min: u64,
    pub ks_statistic: f64,
    pub p_value: f64,
    pub n_tail: usize,
    pub bootstraps: u32,
}

impl PowerLawFit {
    pub fn rejected(&self) -> bool {
        self.p_value < REJECTION_P_VALUE
    }
}

#[derive(Clone, Copy, Debug)]
struct TailFit {
    alpha: f64,
    x_min: u64,
    ks: f64,
    n_tail: usize,
}

/// Sorted sample with suffix sums of `ln x` for O(1) tail likelihoods.
struct Prepared {
    sorted: Vec<u64>,
    /// `suffix_ln[i] = Σ_{j >= i} ln sorted[j]`.
    suffix_ln: Vec<f64>,
}

impl Prepared {
    fn new(mut sorted: Vec<u64>) -> Self {
        sorted.sort_unstable();
        let mut suffix_ln = vec![0.0; sorted.len() + 1];
        for i in (0..sorted.len()).rev() {
            suffix_ln[i] = suffix_ln[i + 1] + (sorted[i] as f64).ln();
        }
        Prepared { sorted, suffix_ln }
    }

    /// Distinct values eligible as cut-offs, with their first index.
    fn candidates(&self) -> Vec<(u64, usize)> {
        let mut distinct: Vec<(u64, usize)> = Vec::new();
        for (i, &x) in self.sorted.iter().enumerate() {
            if distinct.last().is_none_or(|&(v, _)| v != x) {
                distinct.push((x, i));
            }
        }
        let n = self.sorted.len();
        let cap = self.sorted[((n - 1) as f64 * XMIN_QUANTILE).floor() as usize];
        distinct.retain(|&(x, i)| x <= cap && n - i >= 2);
        distinct
    }

    fn fit_tail(&self, x_min: u64, start: usize) -> TailFit {
        let tail = &self.sorted[start..];
        let n = tail.len() as f64;
        let ln_sum = self.suffix_ln[start];
        let q = x_min as f64;
        let nll = |alpha: f64| n * hurwitz_zeta(alpha, q).ln() + alpha * ln_sum;
        let alpha = golden_section_min(nll, ALPHA_RANGE.0, ALPHA_RANGE.1, ALPHA_TOL);
        TailFit {
            alpha,
            x_min,
            ks: tail_ks(tail, alpha, x_min),
            n_tail: tail.len(),
        }
    }

    fn best_fit(&self) -> TailFit {
        self.candidates()
            .into_iter()
            .map(|(x_min, start)| self.fit_tail(x_min, start))
            .min_by(|a, b| a.ks.total_cmp(&b.ks).then(a.x_min.cmp(&b.x_min)))
            .expect("at least one candidate cut-off")
    }
}

fn golden_section_min(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Tail CDF of the fitted model, evaluated at increasing integers.
struct ModelCdf {
    alpha: f64,
    norm: f64,
    /// Current position `q` and `zeta(alpha, q)`.
    q: u64,
    zeta_q: f64,
}

impl ModelCdf {
    fn new(alpha: f64, x_min: u64) -> Self {
        let norm = hurwitz_zeta(alpha, x_min as f64);
        ModelCdf {
            alpha,
            norm,
            q: x_min,
            zeta_q: norm,
        }
    }

    /// `P(X <= x)` for non-decreasing `x >= x_min - 1`.
    fn at(&mut self, x: u64) -> f64 {
        let target = x + 1;
        if target < self.q {
            return 0.0;
        }
        if target - self.q <= 64 {
            while self.q < target {
                self.zeta_q -= (self.q as f64).powf(-self.alpha);
                self.q += 1;
            }
        } else {
            self.q = target;
            self.zeta_q = hurwitz_zeta(self.alpha, target as f64);
        }
        (1.0 - self.zeta_q / self.norm).clamp(0.0, 1.0)
    }
}

/// KS distance between a sorted tail and the fitted discrete model.
fn tail_ks(tail: &[u64], alpha: f64, x_min: u64) -> f64 {
    let n = tail.len() as f64;
    let mut model = ModelCdf::new(alpha, x_min);
    let mut d: f64 = 0.0;
    let mut prev_emp = 0.0;
    let mut i = 0;
    while i < tail.len() {
        let x = tail[i];
        let mut j = i;
        while j < tail.len() && tail[j] == x {
            j += 1;
        }
        // Just below x the empirical CDF still has its previous value.
        if x > x_min {
            d = d.max((prev_emp - model.at(x - 1)).abs());
        }
        let emp = j as f64 / n;
        d = d.max((emp - model.at(x)).abs());
        prev_emp = emp;
        i = j;
    }
    d
}

/// Exact draw from the discrete power law `x^-alpha` on `x >= x_min`, by
/// rejection from the floor of a continuous Pareto variate.
pub fn sample_discrete_power_law<R: Rng + ?Sized>(rng: &mut R, alpha: f64, x_min: u64) -> u64 {
    const CAP: f64 = 1e15;
    let x_min_f = x_min as f64;
    let bound = (1.0 + 1.0 / x_min_f).powf(alpha);
    loop {
        let u: f64 = 1.0 - rng.random::<f64>();
        let y = (x_min_f * u.powf(-1.0 / (alpha - 1.0))).min(CAP);
        let k = y.floor();
        // Proposal mass of k: ∫_k^{k+1} y^-alpha dy.
        let proposal =
            -k.powf(1.0 - alpha) * ((1.0 - alpha) * (1.0 / k).ln_1p()).exp_m1() / (alpha - 1.0);
        let target = k.powf(-alpha);
        if rng.random::<f64>() * bound * proposal <= target {
            return k as u64;
        }
    }
}

/// Fits a discrete power law to positive integer samples and estimates the
/// goodness-of-fit p-value. Deterministic for a given seed regardless of the
/// thread count.
pub fn fit_power_law(samples: &[u64], opts: FitOptions) -> Result<PowerLawFit, AnalyticsError> {
    if samples.len() < MIN_SAMPLES {
        return Err(AnalyticsError::TooFewSamples {
            needed: MIN_SAMPLES,
            got: samples.len(),
        });
    }
    if samples.contains(&0) {
        return Err(AnalyticsError::DegenerateSample(
            "power-law samples must be positive".into(),
        ));
    }
    let data = Prepared::new(samples.to_vec());
    if data.sorted.first() == data.sorted.last() {
        return Err(AnalyticsError::DegenerateSample(
            "all samples are equal".into(),
        ));
    }
    let fit = data.best_fit();

    let below: Vec<u64> = data
        .sorted
        .iter()
        .copied()
        .take_while(|&x| x < fit.x_min)
        .collect();
    let n = data.sorted.len();
    let tail_share = fit.n_tail as f64 / n as f64;

    let exceed: u32 = (0..opts.bootstraps)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64 + 1);
            let synthetic: Vec<u64> = (0..n)
                .map(|_| {
                    if below.is_empty() || rng.random::<f64>() < tail_share {
                        sample_discrete_power_law(&mut rng, fit.alpha, fit.x_min)
                    } else {
                        below[rng.random_range(0..below.len())]
                    }
                })
                .collect();
            let synthetic = Prepared::new(synthetic);
            if synthetic.sorted.first() == synthetic.sorted.last() {
                // A constant sample fits perfectly; count it as not exceeding.
                return 0;
            }
            u32::from(synthetic.best_fit().ks >= fit.ks)
        })
        .sum();

    let p_value = if opts.bootstraps == 0 {
        f64::NAN
    } else {
        exceed as f64 / opts.bootstraps as f64
    };
    Ok(PowerLawFit {
        alpha: fit.alpha,
        x_min: fit.x_min,
        ks_statistic: fit.ks,
        p_value,
        n_tail: fit.n_tail,
        bootstraps: opts.bootstraps,
    })
}
