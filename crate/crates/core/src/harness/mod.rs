//! Simulation harness: trace replay models and an in-process cluster.

mod cluster;
mod replay;

pub use cluster::{run_cluster_sim, ClusterConfig, ClusterError, ClusterReport, PingCluster, PongCluster, RoundCounts};
pub use replay::{
    latency_histogram_csv, simulate_dial, simulate_notify, synthetic_trace, DialResult, MsgTrace, NotifyResult,
    TraceError, TraceRecord,
};

/// Bundled synthetic trace (`SRC DST UNIXTIME`), used when no real dataset is supplied.
pub const SYNTHETIC_TRACE: &str = include_str!("../../data/synthetic_trace.txt");
