//! Two-tier oblivious hash table: build over distinct keys, then real and
//! dummy lookups that touch the same number of slots.

use pingpong::obliv::{Bit, OpCounter};
use pingpong::pong::Oht;
use pingpong::protocol::Params;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let p = Params::default();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let entries: Vec<(u64, u64)> = (0..5000).map(|i| (rng.gen(), i)).collect();
    let probe = entries[42];

    let mut build = OpCounter::new();
    let table = Oht::build(entries, p.z, p.epsilon_oht, &mut rng, &mut build).expect("build");
    let geo = table.geometry();
    println!(
        "n={} Z={} slots={} ({:.2}x), build ops {}, rebuilds {}",
        table.len(),
        p.z,
        geo.slots(),
        geo.expansion(),
        build.total(),
        table.rebuilds()
    );

    for (what, key, bot) in [("present", probe.0, Bit::ZERO), ("absent", 12345, Bit::ZERO), ("dummy", probe.0, Bit::ONE)] {
        let mut ops = OpCounter::new();
        let (hit, v) = table.lookup(key, bot, rng.gen(), &mut ops);
        println!("{what:>7}: hit={} value={v} ops={}", hit.declassify(), ops.total());
    }
}
