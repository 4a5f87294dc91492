//! Entry/backend scaling: padded sub-batches via balls-into-bins.
//!
//! An entry node tags each item with `bin = H(key) mod B`, pads to exactly
//! `Z_bound` items per backend with [`oblivious_bin_assign`], and later pulls
//! its own results back out of the backend replies with [`gather`].

use num_bigint::BigUint;
use num_traits::{One, Zero};
use siphasher::sip::SipHasher24;
use thiserror::Error;

use crate::obliv::{
    choose_word, eq_word, lt_word, ocompact, osort, Bit, Obl, OblOrd, OpKind, Tracer,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RouterError {
    #[error("a backend received more than {bound} real items; round aborted")]
    Overflow { bound: usize },
    #[error("expected {expected} replies from backends, got {got}")]
    ReplyCount { expected: usize, got: usize },
}

/// Smallest `z` with `B · Pr[Binomial(n, 1/B) > z] ≤ 2^-λ`, by exact
/// summation over big integers.
///
/// With `t_i = C(n, i)(B-1)^(n-i)`, `Pr[X > z] = Σ_{i>z} t_i / B^n`, so the
/// condition is `B · 2^λ · Σ_{i>z} t_i ≤ B^n`.
pub fn compute_bound(n: usize, b: usize, lambda: u32) -> usize {
    assert!(b >= 1, "need at least one backend");
    if n == 0 {
        return 0;
    }
    if b == 1 {
        return n;
    }
    let total = BigUint::from(b).pow(n as u32);
    let scale = BigUint::from(b) << lambda as usize;
    let bm1 = BigUint::from(b - 1);
    // walk z downward from n; tail holds Σ_{i>z} t_i
    let mut term = BigUint::one(); // t_n
    let mut tail = BigUint::zero();
    let mut z = n;
    loop {
        // condition holds at z; try z - 1, which adds t_z to the tail
        if z == 0 {
            return 0;
        }
        let candidate = &tail + &term;
        if &candidate * &scale > total {
            return z;
        }
        tail = candidate;
        // t_{z-1} = t_z · z · (B-1) / (n - z + 1), exact
        term = term * &bm1 * BigUint::from(z) / BigUint::from(n - z + 1);
        z -= 1;
    }
}

/// Backend count and per-backend sub-batch size for a public batch size.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinPlan {
    pub backends: usize,
    pub z_bound: usize,
    pub lambda: u32,
}

impl BinPlan {
    pub fn new(n: usize, backends: usize, lambda: u32) -> BinPlan {
        BinPlan {
            backends,
            z_bound: compute_bound(n, backends, lambda),
            lambda,
        }
    }

    pub fn padded_len(&self) -> usize {
        self.backends * self.z_bound
    }
}

/// Public bin hash. Keys are random or PRF outputs, so a public keyed hash
/// spreads them uniformly.
pub fn bin_of(key: &[u8], backends: usize) -> u64 {
    SipHasher24::new_with_keys(0x5049_4e47, 0x504f_4e47).hash(key) % backends as u64
}

/// Items routed by [`oblivious_bin_assign`].
pub trait Routable: Obl + Default + Clone {
    fn bin(&self) -> u64;
    /// Dummies may be dropped when a bin is full; real items may not.
    fn is_dummy(&self) -> Bit;
    fn filler(bin: u64) -> Self;
}

/// Splits `items` into `backends` sub-batches of exactly `z_bound` each.
///
/// 1. append `B·Z` fillers, `Z` per bin;
/// 2. sort by (bin, dummy) so real items lead each bin;
/// 3. scan, keeping the first `Z` of each bin;
/// 4. compact the kept items, which leaves the bins in order.
///
/// The trace depends only on `(|items|, B, Z)`. If a real item would be
/// dropped the round fails loudly.
pub fn oblivious_bin_assign<T, R>(
    mut items: Vec<T>,
    backends: usize,
    z_bound: usize,
    tracer: &mut R,
) -> Result<Vec<Vec<T>>, RouterError>
where
    T: Routable,
    R: Tracer + ?Sized,
{
    assert!(backends >= 1);
    for j in 0..backends * z_bound {
        items.push(T::filler((j / z_bound) as u64));
    }
    osort(&mut items, |it| (it.bin(), it.is_dummy().word()), tracer);

    let mut keep = Vec::with_capacity(items.len());
    let mut lost = Bit::ZERO;
    let mut pos = 0u64;
    let mut prev = u64::MAX;
    for (i, it) in items.iter().enumerate() {
        tracer.one(OpKind::ScanRead, i);
        let bin = it.bin();
        pos = choose_word(eq_word(bin, prev), pos + 1, 0);
        let k = lt_word(pos, z_bound as u64);
        lost = lost | (!it.is_dummy() & !k);
        keep.push(k);
        prev = bin;
    }
    if lost.declassify() {
        return Err(RouterError::Overflow { bound: z_bound });
    }
    ocompact(&mut items, &keep, tracer);
    items.truncate(backends * z_bound);

    let mut out = Vec::with_capacity(backends);
    let mut rest = items.into_iter();
    for _ in 0..backends {
        out.push(rest.by_ref().take(z_bound).collect());
    }
    Ok(out)
}

/// Entry-side merge of backend replies: concatenates them in backend order,
/// keeps the `expected` items selected by `keep`, and sorts those by `key`.
pub fn gather<T, K, R>(
    replies: Vec<Vec<T>>,
    backends: usize,
    expected: usize,
    keep: impl Fn(&T) -> Bit,
    key: impl Fn(&T) -> K,
    tracer: &mut R,
) -> Result<Vec<T>, RouterError>
where
    T: Obl + Default + Clone,
    K: OblOrd + Obl + Default + Copy,
    R: Tracer + ?Sized,
{
    if replies.len() != backends {
        return Err(RouterError::ReplyCount {
            expected: backends,
            got: replies.len(),
        });
    }
    let mut all: Vec<T> = replies.into_iter().flatten().collect();
    let tags: Vec<Bit> = all.iter().map(keep).collect();
    let kept = ocompact(&mut all, &tags, tracer);
    if kept != expected {
        return Err(RouterError::ReplyCount {
            expected,
            got: kept,
        });
    }
    all.truncate(expected);
    osort(&mut all, key, tracer);
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obliv::{AccessTrace, NoTrace};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    #[derive(Clone, Debug, Default, PartialEq)]
    struct Item {
        key: u64,
        bin: u64,
        dummy: Bit,
    }
    crate::obl_struct!(Item { key, bin, dummy });

    impl Routable for Item {
        fn bin(&self) -> u64 {
            self.bin
        }
        fn is_dummy(&self) -> Bit {
            self.dummy
        }
        fn filler(bin: u64) -> Self {
            Item {
                key: 0,
                bin,
                dummy: Bit::ONE,
            }
        }
    }

    fn items(rng: &mut ChaCha8Rng, n: usize, b: usize) -> Vec<Item> {
        (0..n)
            .map(|_| {
                let key: u64 = rng.gen();
                Item {
                    key,
                    bin: bin_of(&key.to_be_bytes(), b),
                    dummy: Bit::ZERO,
                }
            })
            .collect()
    }

    /// Same tail, summed in floating point over log terms.
    fn bound_by_logs(n: usize, b: usize, lambda: u32) -> usize {
        let p = 1.0 / b as f64;
        let ln_fact = |k: usize| (1..=k).map(|i| (i as f64).ln()).sum::<f64>();
        let ln_term = |i: usize| {
            ln_fact(n) - ln_fact(i) - ln_fact(n - i)
                + i as f64 * p.ln()
                + (n - i) as f64 * (1.0 - p).ln()
        };
        let target = -(lambda as f64) * std::f64::consts::LN_2 - (b as f64).ln();
        let mut tail = f64::NEG_INFINITY;
        let mut z = n;
        while z > 0 {
            let t = ln_term(z);
            let m = tail.max(t);
            let cand = m + ((tail - m).exp() + (t - m).exp()).ln();
            if cand > target {
                return z;
            }
            tail = cand;
            z -= 1;
        }
        0
    }

    #[test]
    fn trivial_bounds() {
        assert_eq!(compute_bound(0, 4, 128), 0);
        assert_eq!(compute_bound(100, 1, 128), 100);
        assert_eq!(compute_bound(1, 2, 128), 1);
    }

    #[test]
    fn bound_matches_log_space_oracle() {
        for (n, b) in [(50, 2), (200, 4), (1000, 8), (2000, 16)] {
            assert_eq!(compute_bound(n, b, 128), bound_by_logs(n, b, 128), "n={n} b={b}");
        }
    }

    #[test]
    fn bound_grows_with_lambda() {
        let a = compute_bound(1000, 4, 40);
        let b = compute_bound(1000, 4, 128);
        assert!(a < b && b <= 1000 && a > 250);
    }

    #[test]
    fn all_dummy_input_gives_filler() {
        let out = oblivious_bin_assign(Vec::<Item>::new(), 3, 4, &mut NoTrace).unwrap();
        assert_eq!(out.len(), 3);
        for (b, sub) in out.iter().enumerate() {
            assert_eq!(sub.len(), 4);
            assert!(sub.iter().all(|it| it.dummy == Bit::ONE && it.bin == b as u64));
        }
    }

    #[test]
    fn assignment_preserves_set_and_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input = items(&mut rng, 100, 4);
        let z = compute_bound(100, 4, 128);
        let out = oblivious_bin_assign(input.clone(), 4, z, &mut NoTrace).unwrap();
        let mut got = HashSet::new();
        for (b, sub) in out.iter().enumerate() {
            assert_eq!(sub.len(), z);
            for it in sub.iter().filter(|it| it.dummy == Bit::ZERO) {
                assert_eq!(it.bin, b as u64);
                got.insert(it.key);
            }
        }
        let want: HashSet<u64> = input.iter().map(|it| it.key).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn overflow_is_an_error() {
        let input: Vec<Item> = (0..10)
            .map(|k| Item {
                key: k,
                bin: 0,
                dummy: Bit::ZERO,
            })
            .collect();
        assert_eq!(
            oblivious_bin_assign(input, 2, 5, &mut NoTrace),
            Err(RouterError::Overflow { bound: 5 })
        );
    }

    #[test]
    fn assignment_trace_is_input_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = compute_bound(64, 4, 128);
        let mut reference = None;
        for _ in 0..50 {
            let mut t = AccessTrace::new();
            oblivious_bin_assign(items(&mut rng, 64, 4), 4, z, &mut t).unwrap();
            let d = t.digest();
            match reference {
                None => reference = Some(d),
                Some(r) => assert_eq!(r, d),
            }
        }
    }

    #[test]
    fn gather_restores_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = items(&mut rng, 40, 4);
        let z = compute_bound(40, 4, 128);
        let subs = oblivious_bin_assign(input.clone(), 4, z, &mut NoTrace).unwrap();
        let back = gather(subs, 4, 40, |it: &Item| !it.dummy, |it| it.key, &mut NoTrace).unwrap();
        let mut want: Vec<u64> = input.iter().map(|it| it.key).collect();
        want.sort_unstable();
        assert_eq!(back.iter().map(|it| it.key).collect::<Vec<_>>(), want);
        assert!(gather(vec![vec![Item::default()]], 4, 1, |_: &Item| Bit::ONE, |it| it.key, &mut NoTrace).is_err());
    }
}
