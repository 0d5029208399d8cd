//! Discrete-event simulator of a content-addressed P2P network with passive
//! want-list monitors, plus the probing attacks that run against it.

pub mod cache;
pub mod config;
pub mod network;
pub mod probes;
pub mod truth;
pub mod workload;

use thiserror::Error;
use wantscope_core::NodeId;

pub use config::{Churn, PopularitySampler, Share, SimConfig};
pub use network::{
    build_network, run, GatewayOutcome, MessageLogEntry, MonitorOutput, MsgKind, Network,
    NodeKind, Purge, RetrievalOutcome, SimOutput,
};
pub use truth::{GroundTruth, IssuedRequest, RecordOrigin, RequestOrigin, Summary};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} already exists")]
    DuplicateNode(NodeId),
    #[error("unknown gateway `{0}`")]
    UnknownGateway(String),
    #[error("network has no online DHT server")]
    NoDhtServers,
    #[error("monitor {0} cannot do that; monitors are passive")]
    MonitorAction(NodeId),
    #[error("node {0} is offline")]
    Offline(NodeId),
    #[error("probe target {0} is unreachable")]
    ProbeUnreachable(NodeId),
    #[error("node {0} is not a monitor")]
    NotAMonitor(NodeId),
    #[error("gateway probing needs at least one monitor")]
    NoMonitors,
}
