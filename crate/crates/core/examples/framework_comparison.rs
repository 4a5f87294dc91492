//! Dial-then-converse against notify-then-fetch on a message trace. Pass a
//! `sender receiver unix_ts` file, or run on the bundled synthetic trace.

use pingpong::harness::{simulate_dial, simulate_notify, MsgTrace, SYNTHETIC_TRACE};

fn main() {
    let trace = match std::env::args().nth(1) {
        Some(path) => MsgTrace::load(path.as_ref()).expect("trace file"),
        None => MsgTrace::parse(SYNTHETIC_TRACE).unwrap(),
    };
    println!("{} messages", trace.len());
    println!("{:>8} {:>10} {:>12}", "window", "conflicts", "dial avg");
    for w in [30.0, 60.0, 120.0, 300.0, 600.0] {
        let d = simulate_dial(&trace, w, 0.0, 0.5);
        println!("{w:>7}s {:>9.1}% {:>11.1}s", d.conflict_fraction * 100.0, d.avg_latency);
    }
    let n = simulate_notify(&trace, 3.0, 1.0);
    println!(
        "notify: avg {:.2}s, max {:.1}s, {} messages queued behind another",
        n.avg_latency, n.max_latency, n.queued_messages
    );
}
