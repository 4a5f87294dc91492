//! Randomized invariants across module boundaries.

use std::collections::{BTreeMap, HashMap, HashSet};

use pingpong::crypto::{aead_encrypt, derive_token, seal, ServiceKeyPair, SymKey, AEAD_OVERHEAD, SEAL_OVERHEAD};
use pingpong::harness::{run_cluster_sim, ClusterConfig};
use pingpong::obliv::{ocompact, osort, AccessTrace, Bit, NoTrace};
use pingpong::pong::{MergeMode, PongState, StoreConfig, WriteEntry};
use pingpong::protocol::ClientId;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn sort_trace(v: &[u64]) -> (Vec<u64>, Vec<u8>) {
    let mut items = v.to_vec();
    let mut t = AccessTrace::new();
    osort(&mut items, |x| *x, &mut t);
    (items, t.to_bytes())
}

fn compact_trace(v: &[u64], keep: &[bool]) -> (Vec<u64>, usize, Vec<u8>) {
    let mut items = v.to_vec();
    let bits: Vec<Bit> = keep.iter().map(|&b| Bit::from_bool(b)).collect();
    let mut t = AccessTrace::new();
    let kept = ocompact(&mut items, &bits, &mut t);
    (items, kept, t.to_bytes())
}

fn pair_of_len(n: usize) -> impl Strategy<Value = (Vec<u64>, Vec<u64>)> {
    (prop::collection::vec(any::<u64>(), n), prop::collection::vec(0u64..8, n))
}

fn sort_case(a: &[u64], b: &[u64]) -> Result<(), TestCaseError> {
    let (sa, ta) = sort_trace(a);
    let (sb, tb) = sort_trace(b);
    let mut ra = a.to_vec();
    ra.sort();
    let mut rb = b.to_vec();
    rb.sort();
    prop_assert_eq!(sa, ra);
    prop_assert_eq!(sb, rb);
    prop_assert!(ta == tb, "sort traces differ at n={}", a.len());
    Ok(())
}

fn compact_case(a: &[u64], b: &[u64]) -> Result<(), TestCaseError> {
    // keep-flags derived from the values so the two inputs disagree
    let ka: Vec<bool> = a.iter().map(|x| x % 3 == 0).collect();
    let kb: Vec<bool> = b.iter().map(|x| x % 2 == 0).collect();
    let (ca, na, ta) = compact_trace(a, &ka);
    let (cb, nb, tb) = compact_trace(b, &kb);
    for (v, keep, out, n) in [(a, &ka, &ca, na), (b, &kb, &cb, nb)] {
        let expect: Vec<u64> = v.iter().zip(keep).filter(|(_, k)| **k).map(|(x, _)| *x).collect();
        prop_assert_eq!(n, expect.len());
        prop_assert_eq!(&out[..n], &expect[..]);
        prop_assert!(out[n..].iter().all(|&x| x == 0));
    }
    prop_assert!(ta == tb, "compact traces differ at n={}", a.len());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn sort_16((a, b) in pair_of_len(16)) { sort_case(&a, &b)?; compact_case(&a, &b)?; }

    #[test]
    fn sort_64((a, b) in pair_of_len(64)) { sort_case(&a, &b)?; compact_case(&a, &b)?; }

    #[test]
    fn sort_257((a, b) in pair_of_len(257)) { sort_case(&a, &b)?; compact_case(&a, &b)?; }

    #[test]
    fn sort_1024((a, b) in pair_of_len(1024)) { sort_case(&a, &b)?; compact_case(&a, &b)?; }

    #[test]
    fn sort_is_stable(v in prop::collection::vec((0u8..4, any::<u16>()), 0..200)) {
        let mut items: Vec<u64> = v.iter().map(|&(k, p)| ((k as u64) << 32) | p as u64).collect();
        let orig = items.clone();
        osort(&mut items, |x| *x >> 32, &mut NoTrace);
        let mut expect = orig;
        expect.sort_by_key(|x| *x >> 32);
        prop_assert_eq!(items, expect);
    }

    #[test]
    fn ciphertext_length_follows_plaintext(len in 0usize..600, seed in any::<u64>()) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let keys = ServiceKeyPair::generate(&mut rng);
        let sym = SymKey::random(&mut rng);
        let a = vec![0u8; len];
        let b: Vec<u8> = (0..len).map(|i| (i as u8).wrapping_mul(31) ^ 0x5a).collect();
        for p in [&a, &b] {
            prop_assert_eq!(seal(p, &keys.public(), &mut rng).len(), len + SEAL_OVERHEAD);
            prop_assert_eq!(aead_encrypt(&sym, p, b"ad", &mut rng).len(), len + AEAD_OVERHEAD);
        }
    }
}

#[test]
fn tokens_are_deterministic_and_collision_free() {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut seen = HashSet::new();
    for _ in 0..20 {
        let sk = SymKey::random(&mut rng);
        for r in 1..=10u64 {
            for s in 1..=10u64 {
                for c in 0..50u64 {
                    let t = derive_token(&sk, ClientId(r), ClientId(s), c);
                    assert_eq!(t, derive_token(&sk, ClientId(r), ClientId(s), c));
                    assert!(seen.insert(t.0), "token collision");
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Write(usize),
    Read(usize),
}

fn schedule() -> impl Strategy<Value = (usize, usize, usize, Vec<Op>)> {
    (1usize..4, 1usize..4, 4usize..20).prop_flat_map(|(k, m, n)| {
        let op = prop_oneof![3 => (1usize..12).prop_map(Op::Write), 1 => (1usize..16).prop_map(Op::Read)];
        (Just(k), Just(m), Just(n), prop::collection::vec(op, 1..60))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Every hit carries the value that was written; recent batches always
    /// hit; batches past the retention window always miss.
    #[test]
    fn store_matches_map_oracle((k, m, n, ops) in schedule(), seed in any::<u64>()) {
        let cfg = StoreConfig { k, m, n_batches: n, z: 17, epsilon: 0.75, merge: MergeMode::Inline };
        let mut s: PongState<u64> = PongState::new(cfg, seed);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        // token -> (batch index, value)
        let mut oracle: HashMap<u64, (usize, u64)> = HashMap::new();
        let mut batches = 0usize;
        for op in ops {
            match op {
                Op::Write(size) => {
                    let batch: Vec<WriteEntry<u64>> = (0..size)
                        .map(|_| {
                            let token = rand::Rng::gen(&mut rng);
                            let value = rand::Rng::gen(&mut rng);
                            oracle.insert(token, (batches, value));
                            WriteEntry { token, dummy: Bit::ZERO, value }
                        })
                        .collect();
                    s.obl_write(batch, &mut NoTrace).unwrap();
                    batches += 1;
                }
                Op::Read(size) => {
                    let mut keys: Vec<u64> = oracle.keys().copied().collect();
                    keys.sort();
                    let reqs: Vec<(u64, Bit)> = (0..size)
                        .map(|i| {
                            if keys.is_empty() || i % 4 == 3 {
                                (rand::Rng::gen(&mut rng), Bit::ZERO)
                            } else {
                                (keys[rand::Rng::gen_range(&mut rng, 0..keys.len())], Bit::ZERO)
                            }
                        })
                        .collect();
                    let lookups = s.metrics().lookups;
                    let out = s.obl_read(&reqs, &mut NoTrace).unwrap();
                    prop_assert_eq!(s.metrics().lookups - lookups, (size * (s.bins() + s.tables())) as u64);
                    for (&(key, _), &(hit, v)) in reqs.iter().zip(&out) {
                        match oracle.get(&key) {
                            None => prop_assert!(!hit.declassify()),
                            Some(&(b, value)) => {
                                let age = batches - 1 - b;
                                if hit.declassify() {
                                    prop_assert_eq!(v, value);
                                }
                                if age + k * m < n {
                                    prop_assert!(hit.declassify(), "recent key missed (age {})", age);
                                }
                                if age >= n.max(k) {
                                    prop_assert!(!hit.declassify(), "expired key found (age {})", age);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn delivered_multiset(backends: usize, seed: u64) -> BTreeMap<(u64, u64, Vec<u8>), usize> {
    let cfg = ClusterConfig {
        clients: 16,
        rounds: 5,
        backends,
        seed,
        send_prob: 0.5,
        ..ClusterConfig::default()
    };
    let report = run_cluster_sim(&cfg).unwrap();
    assert!(report.ok(), "B={backends}: {report:?}");
    let mut out = BTreeMap::new();
    for (to, inbox) in &report.inboxes {
        for d in inbox {
            *out.entry((*to, d.from, d.text.clone())).or_insert(0) += 1;
        }
    }
    out
}

#[test]
fn backend_count_does_not_change_deliveries() {
    for seed in [3, 17] {
        let base = delivered_multiset(1, seed);
        assert!(!base.is_empty());
        for b in [2, 4, 8] {
            assert_eq!(delivered_multiset(b, seed), base, "seed {seed}, B={b}");
        }
    }
}

#[test]
fn cluster_sim_is_reproducible() {
    let cfg = ClusterConfig {
        clients: 12,
        rounds: 4,
        backends: 2,
        seed: 5,
        ..ClusterConfig::default()
    };
    let a = serde_json::to_string(&run_cluster_sim(&cfg).unwrap()).unwrap();
    let b = serde_json::to_string(&run_cluster_sim(&cfg).unwrap()).unwrap();
    assert_eq!(a, b);
}
