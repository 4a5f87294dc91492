//! Order-preserving oblivious compaction (Goodrich-style, O(n log n)).
//!
//! Each kept item at position `i` must travel left by `d_i`, the number of
//! dropped items before it. The distances are routed bit by bit: in round `j`
//! every item whose remaining distance has bit `2^j` set moves `2^j` slots.
//! Items never collide because distances are non-decreasing along the array.

use super::trace::{OpKind, Tracer};
use super::word::{choose_word, ge_word, Bit, Obl};

/// Moves items tagged `keep` to a prefix, preserving their order, and zeroes
/// the rest (`T::default()`). Returns the number of kept items.
///
/// The compare-swap schedule depends only on `items.len()`. The returned
/// count is the only value revealed; every caller in this crate uses it for
/// sizes that are public anyway.
pub fn ocompact<T, R>(items: &mut [T], keep: &[Bit], tracer: &mut R) -> usize
where
    T: Obl + Default,
    R: Tracer + ?Sized,
{
    assert_eq!(items.len(), keep.len(), "ocompact: tag count mismatch");
    let n = items.len();
    if n == 0 {
        return 0;
    }

    // shift[i] = number of dropped items in 0..i, for kept items; 0 otherwise
    let mut shift = vec![0u64; n];
    let mut dropped = 0u64;
    for i in 0..n {
        tracer.one(OpKind::ScanRead, i);
        let k = keep[i];
        shift[i] = choose_word(k, dropped, 0);
        dropped += (!k).word();
    }
    let kept = n as u64 - dropped;

    let mut level = 0u32;
    while (1usize << level) < n {
        let offset = 1usize << level;
        for a in 0..(n - offset) {
            let b = a + offset;
            tracer.pair(OpKind::CompareSwap, a, b);
            let mv = Bit::from_word(shift[b] >> level);
            let (lo, hi) = items.split_at_mut(b);
            T::cswap(&mut lo[a], &mut hi[0], mv);
            let moved = shift[b].wrapping_sub(offset as u64);
            shift[a] = choose_word(mv, moved, shift[a]);
            shift[b] = choose_word(mv, 0, shift[b]);
        }
        level += 1;
    }

    let filler = T::default();
    for (i, it) in items.iter_mut().enumerate() {
        tracer.one(OpKind::ScanWrite, i);
        it.cmov(&filler, ge_word(i as u64, kept));
    }
    kept as usize
}

/// [`ocompact`] with tags computed from the items.
pub fn ocompact_by<T, F, R>(items: &mut [T], keep: F, tracer: &mut R) -> usize
where
    T: Obl + Default,
    F: Fn(&T) -> Bit,
    R: Tracer + ?Sized,
{
    let tags: Vec<Bit> = items.iter().map(keep).collect();
    ocompact(items, &tags, tracer)
}
