//! Two-tier oblivious hash table.
//!
//! Tier 1 has `B1 = ⌈n/(εZ)⌉` buckets, tier 2 has `max(1, ⌈B1/2⌉)`, each of
//! `Z` slots. Items live in bucket `h1(key)` of tier 1, or in `h2(key)` of
//! tier 2 when their tier-1 bucket is full. Build pads every bucket with
//! fillers through append / sort / scan / compact, so its trace depends only
//! on `n`. A lookup scans one bucket per tier, `2Z` slots in all.
//!
//! Lookup traces record `(tier, slot-in-bucket)` but not the bucket index.
//! The bucket index is a keyed hash of a key that is queried at most once
//! (or of fresh noise for ⊥), so it is uniformly distributed and carries no
//! information; leaving it out is what lets same-shape traces compare equal.

use rand::RngCore;
use siphasher::sip::SipHasher24;
use thiserror::Error;

use crate::obliv::{
    choose_word, eq_word, lt_word, ocompact, osort, Bit, Obl, OpKind, Tracer,
};

pub const MAX_REBUILDS: u32 = 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OhtError {
    #[error("tier-2 overflow persisted after {0} rebuilds; parameters are too tight")]
    Overflow(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OhtGeometry {
    pub n: usize,
    pub z: usize,
    pub b1: usize,
    pub b2: usize,
}

impl OhtGeometry {
    pub fn new(n: usize, z: usize, epsilon: f64) -> OhtGeometry {
        assert!(z > 0 && epsilon > 0.0, "invalid OHT parameters");
        let b1 = ((n as f64) / (epsilon * z as f64)).ceil().max(1.0) as usize;
        let b2 = b1.div_ceil(2).max(1);
        OhtGeometry { n, z, b1, b2 }
    }

    pub fn slots(&self) -> usize {
        (self.b1 + self.b2) * self.z
    }

    /// Slots per stored item.
    pub fn expansion(&self) -> f64 {
        self.slots() as f64 / self.n.max(1) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Seed(u64, u64);

impl Seed {
    fn random<G: RngCore + ?Sized>(rng: &mut G) -> Seed {
        Seed(rng.next_u64(), rng.next_u64())
    }

    #[inline(always)]
    fn bucket(&self, key: u64, buckets: usize) -> u64 {
        SipHasher24::new_with_keys(self.0, self.1).hash(&key.to_le_bytes()) % buckets as u64
    }
}

#[derive(Clone, Debug)]
struct Slot<V> {
    key: u64,
    real: Bit,
    value: V,
}

/// Working record during build. The default value is a dummy, so compaction
/// filler never looks like a real item.
#[derive(Clone, Debug)]
struct BuildRec<V> {
    key: u64,
    bucket: u64,
    dummy: Bit,
    value: V,
}

impl<V: Default> Default for BuildRec<V> {
    fn default() -> Self {
        BuildRec {
            key: 0,
            bucket: 0,
            dummy: Bit::ONE,
            value: V::default(),
        }
    }
}

impl<V: Obl> Obl for BuildRec<V> {
    #[inline(always)]
    fn cmov(&mut self, src: &Self, flag: Bit) {
        self.key.cmov(&src.key, flag);
        self.bucket.cmov(&src.bucket, flag);
        self.dummy.cmov(&src.dummy, flag);
        self.value.cmov(&src.value, flag);
    }
    #[inline(always)]
    fn cswap(a: &mut Self, b: &mut Self, flag: Bit) {
        u64::cswap(&mut a.key, &mut b.key, flag);
        u64::cswap(&mut a.bucket, &mut b.bucket, flag);
        Bit::cswap(&mut a.dummy, &mut b.dummy, flag);
        V::cswap(&mut a.value, &mut b.value, flag);
    }
    #[inline(always)]
    fn obl_eq(&self, o: &Self) -> Bit {
        self.key.obl_eq(&o.key)
            & self.bucket.obl_eq(&o.bucket)
            & self.dummy.obl_eq(&o.dummy)
            & self.value.obl_eq(&o.value)
    }
}

#[derive(Clone, Debug)]
pub struct Oht<V> {
    geo: OhtGeometry,
    seeds: [Seed; 2],
    slots: Vec<Slot<V>>,
    rebuilds: u32,
}

impl<V: Obl + Default + Clone> Oht<V> {
    /// Builds a table over `entries`, whose keys must be distinct.
    pub fn build<G, R>(
        entries: Vec<(u64, V)>,
        z: usize,
        epsilon: f64,
        rng: &mut G,
        tracer: &mut R,
    ) -> Result<Oht<V>, OhtError>
    where
        G: RngCore + ?Sized,
        R: Tracer + ?Sized,
    {
        let geo = OhtGeometry::new(entries.len(), z, epsilon);
        let mut rebuilds = 0;
        loop {
            let seeds = [Seed::random(rng), Seed::random(rng)];
            if let Some(slots) = try_build(&entries, &geo, &seeds, tracer) {
                return Ok(Oht {
                    geo,
                    seeds,
                    slots,
                    rebuilds,
                });
            }
            rebuilds += 1;
            log::warn!("OHT tier-2 overflow at n={}, rebuilding ({rebuilds})", geo.n);
            if rebuilds > MAX_REBUILDS {
                return Err(OhtError::Overflow(MAX_REBUILDS));
            }
        }
    }

    pub fn geometry(&self) -> OhtGeometry {
        self.geo
    }

    pub fn len(&self) -> usize {
        self.geo.n
    }

    pub fn is_empty(&self) -> bool {
        self.geo.n == 0
    }

    /// Number of times the build had to pick fresh seeds.
    pub fn rebuilds(&self) -> u32 {
        self.rebuilds
    }

    /// Looks up `key`, or performs a dummy access when `bot` is set. `noise`
    /// must be fresh randomness; it picks the buckets for a dummy access.
    pub fn lookup<R: Tracer + ?Sized>(
        &self,
        key: u64,
        bot: Bit,
        noise: u64,
        tracer: &mut R,
    ) -> (Bit, V) {
        let probe = choose_word(bot, noise, key);
        let z = self.geo.z;
        let b1 = self.seeds[0].bucket(probe, self.geo.b1) as usize;
        let b2 = self.seeds[1].bucket(probe, self.geo.b2) as usize;
        let live = !bot;
        let mut found = Bit::ZERO;
        let mut out = V::default();
        for (tier, start) in [(0usize, b1 * z), (1, (self.geo.b1 + b2) * z)] {
            for j in 0..z {
                tracer.pair(OpKind::Equal, tier, j);
                let s = &self.slots[start + j];
                let hit = eq_word(s.key, key) & s.real & live;
                out.cmov(&s.value, hit);
                found = found | hit;
            }
        }
        (found, out)
    }
}

/// One build attempt; `None` on tier-2 overflow.
fn try_build<V, R>(
    entries: &[(u64, V)],
    geo: &OhtGeometry,
    seeds: &[Seed; 2],
    tracer: &mut R,
) -> Option<Vec<Slot<V>>>
where
    V: Obl + Default + Clone,
    R: Tracer + ?Sized,
{
    let n = geo.n;
    let z = geo.z;

    // tier 1: tag with h1, pad each bucket with Z fillers
    let mut recs: Vec<BuildRec<V>> = Vec::with_capacity(n + geo.b1 * z);
    for (i, (key, value)) in entries.iter().enumerate() {
        tracer.one(OpKind::ScanWrite, i);
        recs.push(BuildRec {
            key: *key,
            bucket: seeds[0].bucket(*key, geo.b1),
            dummy: Bit::ZERO,
            value: value.clone(),
        });
    }
    append_fillers(&mut recs, geo.b1, z);
    osort(&mut recs, |r| (r.bucket, r.dummy.word()), tracer);
    let keep = first_z_per_bucket(&recs, z, geo.b1, tracer);
    let overflow: Vec<Bit> = recs
        .iter()
        .zip(&keep)
        .map(|(r, &k)| !r.dummy & !k)
        .collect();

    let mut spill = recs.clone();
    ocompact(&mut recs, &keep, tracer);
    recs.truncate(geo.b1 * z);
    ocompact(&mut spill, &overflow, tracer);
    spill.truncate(n);

    // tier 2: real spill goes to h2, padding is pushed past the last bucket
    for (i, r) in spill.iter_mut().enumerate() {
        tracer.one(OpKind::ScanWrite, i);
        let h2 = seeds[1].bucket(r.key, geo.b2);
        r.bucket = choose_word(r.dummy, geo.b2 as u64, h2);
    }
    append_fillers(&mut spill, geo.b2, z);
    osort(&mut spill, |r| (r.bucket, r.dummy.word()), tracer);
    let keep2 = first_z_per_bucket(&spill, z, geo.b2, tracer);
    let mut lost = Bit::ZERO;
    for (r, &k) in spill.iter().zip(&keep2) {
        lost = lost | (!r.dummy & !k);
    }
    // an overflow is a public event (probability ≤ 2^-λ) that forces a rebuild
    if lost.declassify() {
        return None;
    }
    ocompact(&mut spill, &keep2, tracer);
    spill.truncate(geo.b2 * z);

    let slots = recs
        .into_iter()
        .chain(spill)
        .map(|r| Slot {
            key: r.key,
            real: !r.dummy,
            value: r.value,
        })
        .collect();
    Some(slots)
}

fn append_fillers<V: Default>(recs: &mut Vec<BuildRec<V>>, buckets: usize, z: usize) {
    for j in 0..buckets * z {
        recs.push(BuildRec {
            bucket: (j / z) as u64,
            ..BuildRec::default()
        });
    }
}

/// After a sort by (bucket, dummy): keep the first `z` records of every bucket
/// below `buckets`.
fn first_z_per_bucket<V, R: Tracer + ?Sized>(
    recs: &[BuildRec<V>],
    z: usize,
    buckets: usize,
    tracer: &mut R,
) -> Vec<Bit> {
    let mut keep = Vec::with_capacity(recs.len());
    let mut pos = 0u64;
    let mut prev = u64::MAX;
    for (i, r) in recs.iter().enumerate() {
        tracer.one(OpKind::ScanRead, i);
        let same = eq_word(r.bucket, prev);
        pos = choose_word(same, pos + 1, 0);
        keep.push(lt_word(pos, z as u64) & lt_word(r.bucket, buckets as u64));
        prev = r.bucket;
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obliv::{AccessTrace, NoTrace};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::{HashMap, HashSet};

    fn distinct_keys(rng: &mut ChaCha8Rng, n: usize) -> Vec<u64> {
        let mut set = HashSet::new();
        while set.len() < n {
            set.insert(rng.gen::<u64>());
        }
        let mut v: Vec<u64> = set.into_iter().collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn geometry() {
        let g = OhtGeometry::new(1000, 17, 0.75);
        assert_eq!(g.b1, 79);
        assert_eq!(g.b2, 40);
        let g = OhtGeometry::new(0, 17, 0.75);
        assert_eq!((g.b1, g.b2), (1, 1));
    }

    #[test]
    fn single_item() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Oht::build(vec![(42u64, 7u64)], 17, 0.75, &mut rng, &mut NoTrace).unwrap();
        assert_eq!(t.lookup(42, Bit::ZERO, 5, &mut NoTrace), (Bit::ONE, 7));
        assert_eq!(t.lookup(43, Bit::ZERO, 5, &mut NoTrace), (Bit::ZERO, 0));
        assert_eq!(t.lookup(42, Bit::ONE, 5, &mut NoTrace), (Bit::ZERO, 0));
    }

    #[test]
    fn matches_hash_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let keys = distinct_keys(&mut rng, 10_000);
        let (present, absent) = keys.split_at(5000);
        let oracle: HashMap<u64, u64> = present.iter().map(|&k| (k, k ^ 0xabc)).collect();
        let t = Oht::build(
            oracle.iter().map(|(&k, &v)| (k, v)).collect(),
            17,
            0.75,
            &mut rng,
            &mut NoTrace,
        )
        .unwrap();
        for (&k, &v) in &oracle {
            assert_eq!(t.lookup(k, Bit::ZERO, rng.gen(), &mut NoTrace), (Bit::ONE, v));
        }
        for &k in absent {
            assert_eq!(t.lookup(k, Bit::ZERO, rng.gen(), &mut NoTrace).0, Bit::ZERO);
        }
    }

    #[test]
    fn lookup_trace_is_input_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let keys = distinct_keys(&mut rng, 300);
        let t = Oht::build(
            keys.iter().map(|&k| (k, ())).collect(),
            17,
            0.75,
            &mut rng,
            &mut NoTrace,
        )
        .unwrap();
        let trace = |key: u64, bot: Bit, noise: u64| {
            let mut tr = AccessTrace::new();
            t.lookup(key, bot, noise, &mut tr);
            tr.to_bytes()
        };
        let hit = trace(keys[0], Bit::ZERO, 1);
        assert_eq!(hit, trace(12345, Bit::ZERO, 2));
        assert_eq!(hit, trace(0, Bit::ONE, 3));
        assert_eq!(hit.len(), 2 * 17 * 17);
    }

    #[test]
    fn build_trace_depends_only_on_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in [64usize, 257] {
            let mut reference = None;
            for _ in 0..10 {
                let keys = distinct_keys(&mut rng, n);
                let mut tr = AccessTrace::new();
                let t = Oht::build(
                    keys.iter().map(|&k| (k, k)).collect(),
                    17,
                    0.75,
                    &mut rng,
                    &mut tr,
                )
                .unwrap();
                assert_eq!(t.rebuilds(), 0);
                let d = tr.digest();
                match reference {
                    None => reference = Some(d),
                    Some(r) => assert_eq!(r, d),
                }
            }
        }
    }

    #[test]
    fn tiny_buckets_force_rebuild_error() {
        // one slot per bucket at full load cannot hold 200 keys
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let keys = distinct_keys(&mut rng, 200);
        let r = Oht::build(
            keys.iter().map(|&k| (k, ())).collect(),
            1,
            1.0,
            &mut rng,
            &mut NoTrace,
        );
        assert_eq!(r.unwrap_err(), OhtError::Overflow(MAX_REBUILDS));
    }
}
