//! The hierarchical store: write batches land in temporary bins, groups
//! consolidate, stashed groups merge into tables, and every read scans them
//! all.

use pingpong::obliv::{Bit, NoTrace, OpCounter};
use pingpong::pong::{MergeMode, PongState, StoreConfig, WriteEntry};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn main() {
    let cfg = StoreConfig {
        k: 4,
        m: 3,
        n_batches: 48,
        z: 17,
        epsilon: 0.75,
        merge: MergeMode::Inline,
    };
    let mut store: PongState<u64> = PongState::new(cfg, 7);
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut written = Vec::new();

    for round in 0..60 {
        let batch: Vec<WriteEntry<u64>> = (0..32)
            .map(|i| WriteEntry {
                token: rng.gen(),
                dummy: Bit::from_bool(i >= 24),
                value: round * 100 + i,
            })
            .collect();
        written.extend(batch.iter().filter(|e| !e.dummy.declassify()).map(|e| (e.token, e.value)));
        let mut ops = OpCounter::new();
        store.obl_write(batch, &mut ops).expect("write");
        if round % 7 == 6 {
            println!(
                "after {:>2} writes: |Buf|={} |T|={} stored batches={} lookups/read={} write ops={}",
                round + 1,
                store.bins(),
                store.tables(),
                store.stored_batches(),
                store.lookups_per_read(),
                ops.total()
            );
        }
    }

    // the newest entries are present, the oldest have expired
    let recent = written[written.len() - 1];
    let old = written[0];
    let out = store
        .obl_read(&[(recent.0, Bit::ZERO), (old.0, Bit::ZERO), (0, Bit::ONE)], &mut NoTrace)
        .expect("read");
    println!("recent: found={} value={} (want {})", out[0].0.declassify(), out[0].1, recent.1);
    println!("expired: found={}", out[1].0.declassify());
    println!("dummy: found={}", out[2].0.declassify());
    println!("{:?}", store.metrics());
}
