//! Padded sub-batches for scaled deployments: the per-backend size bound
//! and an oblivious split of a batch into equal-size sub-batches.

use pingpong::obliv::{AccessTrace, Bit};
use pingpong::pong::PongItem;
use pingpong::router::{bin_of, compute_bound, oblivious_bin_assign, BinPlan};

fn main() {
    println!("{:>7} {:>3} {:>7} {:>9}", "n", "B", "Z", "overhead");
    for n in [1_000usize, 10_000, 100_000] {
        for b in [2usize, 4, 8] {
            let z = compute_bound(n, b, 128);
            println!("{n:>7} {b:>3} {z:>7} {:>8.2}x", (z * b) as f64 / n as f64);
        }
    }

    let (n, b) = (200usize, 4usize);
    let plan = BinPlan::new(n, b, 128);
    let items: Vec<PongItem> = (0..n as u64)
        .map(|i| {
            let token = i.wrapping_mul(0x9e37_79b9_7f4a_7c15);
            PongItem {
                token,
                dummy: Bit::from_bool(i % 5 == 0),
                bin: bin_of(&token.to_be_bytes(), b),
                ..PongItem::default()
            }
        })
        .collect();
    let mut trace = AccessTrace::new();
    let subs = oblivious_bin_assign(items, b, plan.z_bound, &mut trace).expect("within bound");
    for (j, s) in subs.iter().enumerate() {
        let real = s.iter().filter(|it| !it.filler.declassify()).count();
        println!("backend {j}: {} slots, {real} routed, rest padding", s.len());
    }
    println!("trace: {} events, a function of (n, B, Z) only", trace.len());
}
