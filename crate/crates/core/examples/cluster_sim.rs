//! Deterministic in-process deployment with entries and backends, checked
//! for delivery and per-round traffic uniformity.

use pingpong::harness::{run_cluster_sim, ClusterConfig};

fn main() {
    for (entries, backends) in [(1, 1), (2, 4)] {
        let cfg = ClusterConfig {
            clients: 60,
            rounds: 15,
            entries,
            backends,
            seed: 9,
            ..ClusterConfig::default()
        };
        let r = run_cluster_sim(&cfg).expect("cluster");
        println!(
            "E={entries} B={backends}: sent {} delivered {} lost {} cross {} violations {} avg latency {:.2} rounds, ok={}",
            r.sent,
            r.delivered,
            r.lost,
            r.cross_delivered,
            r.uniformity_violations,
            r.avg_latency_rounds,
            r.ok()
        );
        println!("  frame lengths {:?}", r.frame_lengths);
    }
}
