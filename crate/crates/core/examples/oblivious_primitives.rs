//! Branch-free selection, sorting and compaction, and the access traces
//! they leave behind.

use pingpong::obliv::{choose_word, eq_word, ocompact, osort, AccessTrace, Bit, OpCounter, OpKind};

fn main() {
    let flag = eq_word(7, 7);
    println!("choose(7 == 7, 1, 2) = {}", choose_word(flag, 1, 2));

    let mut records: Vec<(u64, u64)> = vec![(3, 30), (1, 10), (2, 20), (1, 11)];
    let mut ops = OpCounter::new();
    osort(&mut records, |r| r.0, &mut ops);
    println!("sorted {records:?} with {} compare-swaps", ops.get(OpKind::CompareSwap));

    let mut items: Vec<u64> = (10..18).collect();
    let keep: Vec<Bit> = items.iter().map(|x| Bit::from_bool(x % 3 == 0)).collect();
    let kept = ocompact(&mut items, &keep, &mut OpCounter::new());
    println!("compacted to {:?} ({kept} kept)", &items[..kept]);

    // two different inputs of the same length leave identical traces
    let trace = |mut v: Vec<u64>| {
        let mut t = AccessTrace::new();
        osort(&mut v, |x| *x, &mut t);
        t
    };
    let a = trace((0..100).collect());
    let b = trace((0..100).rev().map(|x| x * 7919 % 101).collect());
    println!("trace lengths {} / {}, identical: {}", a.len(), b.len(), a.to_bytes() == b.to_bytes());
}
