//! Content popularity and descriptive reports over (unified) traces.

mod popularity;
mod powerlaw;
mod reports;

pub use popularity::{ecdf, popularity, Popularity, PopularityTable};
pub use powerlaw::{
    fit_power_law, sample_discrete_power_law, FitOptions, PowerLawFit, DEFAULT_BOOTSTRAPS,
    REJECTION_P_VALUE,
};
pub use reports::{
    codec_share, geo_share, parse_address_ip, rate_timeseries, GeoDb, GroupBy, OriginMap,
    RatePoint, ShareRow, UNKNOWN_COUNTRY,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("input is empty")]
    Empty,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("geo database has no entries")]
    EmptyGeoDb,
    #[error("geo database line {line}: {msg}")]
    GeoDbParse { line: u64, msg: String },
    #[error("bucket width must be positive")]
    BadBucket,
}
