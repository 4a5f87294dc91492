//! Bitonic sort for arbitrary lengths.

use super::trace::{OpKind, Tracer};
use super::word::{gt_word, Bit, Obl, OblOrd};

/// Sort key as seen by the network: caller key, then original index. The
/// index makes the order total, so the result equals a stable sort.
#[derive(Clone, Copy, Debug)]
struct SlotKey<K> {
    key: K,
    idx: u64,
}

impl<K: OblOrd + Obl> SlotKey<K> {
    #[inline(always)]
    fn gt(&self, other: &Self) -> Bit {
        let key_lt = self.key.obl_lt(&other.key);
        let key_eq = self.key.obl_key_eq(&other.key);
        let key_gt = !(key_lt | key_eq);
        key_gt | (key_eq & gt_word(self.idx, other.idx))
    }

    #[inline(always)]
    fn cswap(a: &mut Self, b: &mut Self, flag: Bit) {
        K::cswap(&mut a.key, &mut b.key, flag);
        u64::cswap(&mut a.idx, &mut b.idx, flag);
    }
}

/// Sorts `items` ascending by `key(item)`, ties by original position.
///
/// Bitonic network for arbitrary lengths: no padding, and the compare-swap
/// schedule depends only on `items.len()`.
pub fn osort<T, K, F, R>(items: &mut [T], key: F, tracer: &mut R)
where
    T: Obl,
    K: OblOrd + Obl + Copy,
    F: Fn(&T) -> K,
    R: Tracer + ?Sized,
{
    let n = items.len();
    if n <= 1 {
        return;
    }
    let mut keys: Vec<SlotKey<K>> = items
        .iter()
        .enumerate()
        .map(|(i, it)| SlotKey {
            key: key(it),
            idx: i as u64,
        })
        .collect();

    bitonic_network(n, |i, l, ascending| {
        tracer.pair(OpKind::CompareSwap, i, l);
        let (mut a, mut b) = (keys[i], keys[l]);
        // keys are distinct thanks to idx, so "not gt" is "lt"
        let swap = a.gt(&b) ^ Bit::from_bool(!ascending);
        SlotKey::cswap(&mut a, &mut b, swap);
        (keys[i], keys[l]) = (a, b);
        let (lo, hi) = items.split_at_mut(l);
        T::cswap(&mut lo[i], &mut hi[0], swap);
    });
}

/// Sorts plain keys in place (no payload). Convenience for tests and benches.
pub fn osort_keys<K, R>(keys: &mut [K], tracer: &mut R)
where
    K: OblOrd + Obl + Copy,
    R: Tracer + ?Sized,
{
    osort(keys, |k| *k, tracer)
}

/// Bitonic network over `n` positions. Calls `cas(i, l, ascending)` for each
/// comparator with `i < l`; the schedule is a function of `n` alone.
pub(crate) fn bitonic_network<F: FnMut(usize, usize, bool)>(n: usize, mut cas: F) {
    sort_range(0, n, true, &mut cas);
}

fn sort_range<F: FnMut(usize, usize, bool)>(lo: usize, n: usize, ascending: bool, cas: &mut F) {
    if n <= 1 {
        return;
    }
    let half = n / 2;
    sort_range(lo, half, !ascending, cas);
    sort_range(lo + half, n - half, ascending, cas);
    merge_range(lo, n, ascending, cas);
}

fn merge_range<F: FnMut(usize, usize, bool)>(lo: usize, n: usize, ascending: bool, cas: &mut F) {
    if n <= 1 {
        return;
    }
    // largest power of two below n
    let m = 1 << (usize::BITS - 1 - (n - 1).leading_zeros());
    for i in lo..lo + n - m {
        cas(i, i + m, ascending);
    }
    merge_range(lo, m, ascending, cas);
    merge_range(lo + m, n - m, ascending, cas);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obliv::trace::{AccessTrace, NoTrace};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_and_single() {
        let mut v: Vec<u64> = vec![];
        osort_keys(&mut v, &mut NoTrace);
        assert!(v.is_empty());
        let mut v = vec![5u64];
        osort_keys(&mut v, &mut NoTrace);
        assert_eq!(v, vec![5]);
    }

    #[test]
    fn three_keys() {
        let mut v = vec![(3u64, 'a' as u64), (1, 'b' as u64), (2, 'c' as u64)];
        osort(&mut v, |r| r.0, &mut NoTrace);
        assert_eq!(v, vec![(1, 'b' as u64), (2, 'c' as u64), (3, 'a' as u64)]);
    }

    #[test]
    fn matches_stable_reference_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2usize, 3, 7, 64, 100, 1000] {
            // few distinct keys so ties are common
            let v: Vec<(u64, u64)> = (0..n).map(|i| (rng.gen_range(0..10), i as u64)).collect();
            let mut expected = v.clone();
            expected.sort_by_key(|r| r.0); // std sort is stable
            let mut got = v.clone();
            osort(&mut got, |r| r.0, &mut NoTrace);
            assert_eq!(got, expected, "n={n}");
        }
    }

    #[test]
    fn comparator_count_is_network_size() {
        let mut t = AccessTrace::new();
        let mut v: Vec<u64> = (0..128).rev().collect();
        osort_keys(&mut v, &mut t);
        // n = 128, log n = 7: n/2 * log n * (log n + 1) / 2
        assert_eq!(t.len(), 64 * 7 * 8 / 2);
        let mut t = AccessTrace::new();
        let mut v: Vec<u64> = (0..100).rev().collect();
        osort_keys(&mut v, &mut t);
        assert!(t.len() < 64 * 7 * 8 / 2);
    }

    #[test]
    fn sorts_every_zero_one_input() {
        // 0-1 principle: a network that sorts all 0/1 inputs sorts everything
        for n in 1..=13usize {
            for bits in 0u32..(1 << n) {
                let mut v: Vec<u64> = (0..n).map(|i| (bits >> i) as u64 & 1).collect();
                osort_keys(&mut v, &mut NoTrace);
                assert!(v.windows(2).all(|w| w[0] <= w[1]), "n={n} bits={bits:b}");
            }
        }
    }

    #[test]
    fn trace_independent_of_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [16usize, 64, 257] {
            let mut reference: Option<AccessTrace> = None;
            for _ in 0..20 {
                let mut v: Vec<u64> = (0..n).map(|_| rng.gen()).collect();
                let mut t = AccessTrace::new();
                osort_keys(&mut v, &mut t);
                match &reference {
                    None => reference = Some(t),
                    Some(r) => assert_eq!(r.to_bytes(), t.to_bytes()),
                }
            }
        }
    }
}
