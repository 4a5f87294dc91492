//! Notification aggregation.
//!
//! Each round every registered client contributes one sealed token. The
//! server unseals them, adds one carrier per registered label, sorts by
//! (label, is_carrier) so each carrier closes its label group, folds the
//! group's vectors forward with a branch-free OR, and compacts the carriers
//! out. Carriers leave in label order, which maps them back to clients.
//!
//! Scaled mode splits this across entry and backend nodes: an entry folds its
//! own packets per label first and relabels the non-survivors at random, so
//! every label it forwards is unique (as balls-into-bins requires).

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::crypto::ServiceKeyPair;
use crate::obl_struct;
use crate::obliv::{ocompact_by, osort, Bit, Obl, OpKind, Tracer};
use crate::protocol::wire::TokenPlain;
use crate::protocol::{ClientId, Label, NotfVec};
use crate::router::{bin_of, gather, oblivious_bin_assign, BinPlan, Routable, RouterError};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PingError {
    #[error("client {0} tried to register the reserved null label")]
    NullLabel(ClientId),
    #[error("label already registered (client {0})")]
    DuplicateLabel(ClientId),
    #[error("client {0} already registered")]
    DuplicateClient(ClientId),
    #[error(transparent)]
    Router(#[from] RouterError),
}

/// Unit flowing through aggregation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AggPacket {
    pub label: Label,
    pub vec: NotfVec,
    pub is_carrier: Bit,
    pub is_dummy: Bit,
    /// Backend index (scaled mode).
    pub bin: u64,
    /// Position before a backend sorts, so results can be put back.
    pub origin: u64,
}

obl_struct!(AggPacket {
    label,
    vec,
    is_carrier,
    is_dummy,
    bin,
    origin
});

impl AggPacket {
    pub fn notification(t: TokenPlain) -> AggPacket {
        AggPacket {
            label: t.label,
            vec: t.vec,
            ..AggPacket::default()
        }
    }

    pub fn carrier(label: Label) -> AggPacket {
        AggPacket {
            label,
            is_carrier: Bit::ONE,
            ..AggPacket::default()
        }
    }

    pub const ENCODED_LEN: usize = 32 + 64 + 1 + 1 + 8 + 8;

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.label.to_bytes());
        out.extend_from_slice(&self.vec.to_bytes());
        out.push(self.is_carrier.word() as u8);
        out.push(self.is_dummy.word() as u8);
        out.extend_from_slice(&self.bin.to_be_bytes());
        out.extend_from_slice(&self.origin.to_be_bytes());
    }

    pub fn decode(b: &[u8]) -> Option<AggPacket> {
        if b.len() != Self::ENCODED_LEN {
            return None;
        }
        Some(AggPacket {
            label: Label::from_bytes(b[..32].try_into().ok()?),
            vec: NotfVec::from_bytes(b[32..96].try_into().ok()?),
            is_carrier: Bit::from_word(b[96] as u64),
            is_dummy: Bit::from_word(b[97] as u64),
            bin: u64::from_be_bytes(b[98..106].try_into().ok()?),
            origin: u64::from_be_bytes(b[106..114].try_into().ok()?),
        })
    }
}

impl Routable for AggPacket {
    fn bin(&self) -> u64 {
        self.bin
    }
    fn is_dummy(&self) -> Bit {
        self.is_dummy
    }
    fn filler(bin: u64) -> Self {
        AggPacket {
            is_dummy: Bit::ONE,
            bin,
            ..AggPacket::default()
        }
    }
}

/// Registered clients and their carrier labels.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    by_client: BTreeMap<ClientId, Label>,
    labels: HashSet<Label>,
}

impl Registry {
    pub fn new() -> Registry {
        Registry::default()
    }

    pub fn register(&mut self, client: ClientId, label: Label) -> Result<(), PingError> {
        if label.is_null() {
            return Err(PingError::NullLabel(client));
        }
        if self.by_client.contains_key(&client) {
            return Err(PingError::DuplicateClient(client));
        }
        if !self.labels.insert(label) {
            return Err(PingError::DuplicateLabel(client));
        }
        self.by_client.insert(client, label);
        Ok(())
    }

    pub fn unregister(&mut self, client: ClientId) {
        if let Some(l) = self.by_client.remove(&client) {
            self.labels.remove(&l);
        }
    }

    pub fn len(&self) -> usize {
        self.by_client.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_client.is_empty()
    }

    pub fn contains(&self, client: ClientId) -> bool {
        self.by_client.contains_key(&client)
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.by_client.keys().copied()
    }

    /// Clients in carrier order (ascending label).
    pub fn by_label(&self) -> Vec<(Label, ClientId)> {
        let mut v: Vec<(Label, ClientId)> = self.by_client.iter().map(|(&c, &l)| (l, c)).collect();
        v.sort_unstable();
        v
    }
}

/// Unseals one notification per registered client, in client order. Missing
/// or unauthentic packets become blanks, so the count is always the registry
/// size.
fn unseal_round<R: Tracer + ?Sized>(
    keys: &ServiceKeyPair,
    registry: &Registry,
    inputs: &[(ClientId, Vec<u8>)],
    tracer: &mut R,
) -> Vec<AggPacket> {
    let mut by_client: HashMap<ClientId, &[u8]> = HashMap::with_capacity(inputs.len());
    for (c, ct) in inputs {
        if !registry.contains(*c) {
            log::warn!("notification from unregistered client {c} dropped");
            continue;
        }
        if by_client.insert(*c, ct).is_some() {
            log::warn!("second notification from client {c} this round dropped");
        }
    }
    registry
        .clients()
        .enumerate()
        .map(|(i, c)| {
            tracer.one(OpKind::ScanWrite, i);
            let plain = by_client
                .get(&c)
                .and_then(|ct| keys.unseal(ct).ok())
                .and_then(|pt| TokenPlain::decode(&pt).ok())
                .unwrap_or_else(TokenPlain::blank);
            AggPacket::notification(plain)
        })
        .collect()
}

/// Sort by (label, is_carrier), fold, compact carriers to the front.
/// Returns the number of carriers.
pub fn oblivious_aggregate<G, R>(pkts: &mut Vec<AggPacket>, rng: &mut G, tracer: &mut R) -> usize
where
    G: RngCore + ?Sized,
    R: Tracer + ?Sized,
{
    osort(pkts, |p| (p.label, p.is_carrier.word()), tracer);
    entry_dedup(pkts, rng, tracer);
    ocompact_by(pkts, |p| p.is_carrier, tracer)
}

/// One single-node round: returns each registered client's digest.
pub fn ping_round<G, R>(
    keys: &ServiceKeyPair,
    registry: &Registry,
    inputs: &[(ClientId, Vec<u8>)],
    rng: &mut G,
    tracer: &mut R,
) -> Vec<(ClientId, NotfVec)>
where
    G: RngCore + ?Sized,
    R: Tracer + ?Sized,
{
    let mut pkts = unseal_round(keys, registry, inputs, tracer);
    let order = registry.by_label();
    pkts.extend(order.iter().map(|(l, _)| AggPacket::carrier(*l)));
    let carriers = oblivious_aggregate(&mut pkts, rng, tracer);
    debug_assert_eq!(carriers, order.len());
    order
        .iter()
        .zip(pkts)
        .map(|((_, c), p)| (*c, p.vec))
        .collect()
}

/// Forward OR fold over a label-sorted sequence. Each group keeps one
/// survivor (its last packet, the carrier if there is one) holding the group
/// OR; the others get a fresh random label and the dummy flag.
pub fn entry_dedup<G, R>(pkts: &mut [AggPacket], rng: &mut G, tracer: &mut R)
where
    G: RngCore + ?Sized,
    R: Tracer + ?Sized,
{
    for i in 1..pkts.len() {
        let fresh = Label::random(rng);
        let (lo, hi) = pkts.split_at_mut(i);
        let prev = &mut lo[i - 1];
        let cur = &mut hi[0];
        tracer.pair(OpKind::Equal, i - 1, i);
        let is_rep = cur.label.obl_eq(&prev.label);
        let agg = prev.vec.or(&cur.vec);
        tracer.one(OpKind::Choose, i);
        cur.vec.cmov(&agg, is_rep);
        tracer.one(OpKind::Choose, i - 1);
        prev.label.cmov(&fresh, is_rep);
        prev.is_dummy = is_rep;
    }
}

/// Client-facing node in scaled mode.
pub struct PingEntry {
    keys: ServiceKeyPair,
    registry: Registry,
    backends: usize,
    lambda: u32,
}

impl PingEntry {
    pub fn new(keys: ServiceKeyPair, backends: usize, lambda: u32) -> PingEntry {
        PingEntry {
            keys,
            registry: Registry::new(),
            backends,
            lambda,
        }
    }

    pub fn with_registry(keys: ServiceKeyPair, registry: Registry, backends: usize, lambda: u32) -> PingEntry {
        PingEntry {
            keys,
            registry,
            backends,
            lambda,
        }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn registry_mut(&mut self) -> &mut Registry {
        &mut self.registry
    }

    /// Sub-batch size per backend for this entry's public batch size.
    pub fn plan(&self) -> BinPlan {
        BinPlan::new(2 * self.registry.len(), self.backends, self.lambda)
    }

    /// Unseal, add carriers, fold per label, relabel duplicates, and split
    /// into one padded sub-batch per backend.
    pub fn prepare<G, R>(
        &self,
        inputs: &[(ClientId, Vec<u8>)],
        rng: &mut G,
        tracer: &mut R,
    ) -> Result<Vec<Vec<AggPacket>>, PingError>
    where
        G: RngCore + CryptoRng + ?Sized,
        R: Tracer + ?Sized,
    {
        let mut pkts = unseal_round(&self.keys, &self.registry, inputs, tracer);
        pkts.extend(
            self.registry
                .by_label()
                .iter()
                .map(|(l, _)| AggPacket::carrier(*l)),
        );
        osort(&mut pkts, |p| (p.label, p.is_carrier.word()), tracer);
        entry_dedup(&mut pkts, rng, tracer);
        for (i, p) in pkts.iter_mut().enumerate() {
            tracer.one(OpKind::ScanWrite, i);
            p.bin = bin_of(&p.label.to_bytes(), self.backends);
        }
        let plan = self.plan();
        Ok(oblivious_bin_assign(pkts, plan.backends, plan.z_bound, tracer)?)
    }

    /// Pulls this entry's carriers out of the backend replies.
    pub fn finish<R: Tracer + ?Sized>(
        &self,
        replies: Vec<Vec<AggPacket>>,
        tracer: &mut R,
    ) -> Result<Vec<(ClientId, NotfVec)>, PingError> {
        let order = self.registry.by_label();
        let carriers = gather(
            replies,
            self.backends,
            order.len(),
            |p: &AggPacket| p.is_carrier,
            |p| p.label,
            tracer,
        )?;
        Ok(order
            .iter()
            .zip(carriers)
            .map(|((_, c), p)| (*c, p.vec))
            .collect())
    }
}

/// Backend aggregation over the sub-batches from every entry. Each reply
/// has the same length and order as the corresponding request.
pub fn backend_aggregate<G, R>(
    subs: Vec<Vec<AggPacket>>,
    rng: &mut G,
    tracer: &mut R,
) -> Vec<Vec<AggPacket>>
where
    G: RngCore + ?Sized,
    R: Tracer + ?Sized,
{
    let sizes: Vec<usize> = subs.iter().map(Vec::len).collect();
    let mut all: Vec<AggPacket> = subs.into_iter().flatten().collect();
    for (i, p) in all.iter_mut().enumerate() {
        p.origin = i as u64;
    }
    osort(&mut all, |p| (p.label, p.is_carrier.word()), tracer);
    entry_dedup(&mut all, rng, tracer);
    osort(&mut all, |p| p.origin, tracer);
    let mut rest = all.into_iter();
    sizes
        .into_iter()
        .map(|n| rest.by_ref().take(n).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::seal;
    use crate::obliv::{AccessTrace, NoTrace};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    struct World {
        keys: ServiceKeyPair,
        registry: Registry,
        labels: Vec<Label>,
        rng: ChaCha20Rng,
    }

    fn world(n: usize, seed: u64) -> World {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let keys = ServiceKeyPair::generate(&mut rng);
        let mut registry = Registry::new();
        let mut labels = Vec::new();
        for c in 0..n {
            let l = Label::random(&mut rng);
            registry.register(ClientId(c as u64 + 1), l).unwrap();
            labels.push(l);
        }
        World {
            keys,
            registry,
            labels,
            rng,
        }
    }

    impl World {
        fn token(&mut self, to: usize, bit: usize) -> Vec<u8> {
            let t = TokenPlain {
                vec: NotfVec::one_hot(bit),
                label: self.labels[to],
            };
            seal(&t.encode(), &self.keys.public(), &mut self.rng)
        }

        fn blank(&mut self) -> Vec<u8> {
            seal(&TokenPlain::blank().encode(), &self.keys.public(), &mut self.rng)
        }

        /// Every client sends: (recipient index, bit) or blank.
        fn random_inputs(&mut self, p_active: f64) -> (Vec<(ClientId, Vec<u8>)>, Vec<NotfVec>) {
            let n = self.labels.len();
            let mut expect = vec![NotfVec::zero(); n];
            let mut inputs = Vec::new();
            for c in 0..n {
                let ct = if self.rng.gen_bool(p_active) {
                    let to = self.rng.gen_range(0..n);
                    let bit = self.rng.gen_range(0..512);
                    expect[to].set(bit);
                    self.token(to, bit)
                } else {
                    self.blank()
                };
                inputs.push((ClientId(c as u64 + 1), ct));
            }
            (inputs, expect)
        }

        fn check(&self, digests: &[(ClientId, NotfVec)], expect: &[NotfVec]) {
            assert_eq!(digests.len(), expect.len());
            for (c, v) in digests {
                assert_eq!(v, &expect[(c.0 - 1) as usize], "client {c}");
            }
        }
    }

    #[test]
    fn registry_rejects_bad_labels() {
        let mut r = Registry::new();
        assert_eq!(r.register(ClientId(1), Label::NULL), Err(PingError::NullLabel(ClientId(1))));
        r.register(ClientId(1), Label([1, 0, 0, 0])).unwrap();
        assert!(r.register(ClientId(2), Label([1, 0, 0, 0])).is_err());
        assert!(r.register(ClientId(1), Label([2, 0, 0, 0])).is_err());
    }

    #[test]
    fn all_idle_gives_zero_digests() {
        let mut w = world(10, 1);
        let inputs: Vec<_> = (1..=10).map(|c| (ClientId(c), w.blank())).collect();
        let d = ping_round(&w.keys, &w.registry, &inputs, &mut w.rng, &mut NoTrace);
        assert_eq!(d.len(), 10);
        assert!(d.iter().all(|(_, v)| v.is_zero()));
    }

    #[test]
    fn two_senders_one_recipient() {
        let mut w = world(3, 2);
        // client 1 (A) sets bit 7 for B = index 1; client 3 (C) sets bit 2 for B
        let a = w.token(1, 7);
        let c = w.token(1, 2);
        let b = w.blank();
        let inputs = vec![(ClientId(1), a), (ClientId(2), b), (ClientId(3), c)];
        let d = ping_round(&w.keys, &w.registry, &inputs, &mut w.rng, &mut NoTrace);
        let digest: HashMap<ClientId, NotfVec> = d.into_iter().collect();
        assert_eq!(digest[&ClientId(2)].ones(), vec![2, 7]);
        assert!(digest[&ClientId(1)].is_zero());
        assert!(digest[&ClientId(3)].is_zero());
    }

    #[test]
    fn random_round_matches_oracle() {
        let mut w = world(1000, 3);
        let (inputs, expect) = w.random_inputs(0.7);
        let d = ping_round(&w.keys, &w.registry, &inputs, &mut w.rng, &mut NoTrace);
        w.check(&d, &expect);
    }

    #[test]
    fn missing_and_garbage_packets_become_blanks() {
        let mut w = world(4, 4);
        let good = w.token(0, 1);
        let inputs = vec![
            (ClientId(2), good),
            (ClientId(3), vec![0u8; 144]),
            (ClientId(99), w.blank()),
        ];
        let d = ping_round(&w.keys, &w.registry, &inputs, &mut w.rng, &mut NoTrace);
        let mut expect = vec![NotfVec::zero(); 4];
        expect[0].set(1);
        w.check(&d, &expect);
    }

    #[test]
    fn carriers_only() {
        let labels = [Label([3, 0, 0, 0]), Label([1, 0, 0, 0])];
        let mut pkts: Vec<AggPacket> = labels.iter().map(|&l| AggPacket::carrier(l)).collect();
        assert_eq!(oblivious_aggregate(&mut pkts, &mut ChaCha20Rng::seed_from_u64(0), &mut NoTrace), 2);
        assert_eq!(pkts[0].label, labels[1]);
        assert_eq!(pkts[1].label, labels[0]);
        assert!(pkts.iter().all(|p| p.vec.is_zero()));
    }

    #[test]
    fn round_trace_depends_only_on_sizes() {
        let mut w = world(64, 5);
        let mut reference = None;
        for i in 0..20 {
            let (inputs, _) = w.random_inputs(i as f64 / 20.0);
            let mut t = AccessTrace::new();
            ping_round(&w.keys, &w.registry, &inputs, &mut w.rng, &mut t);
            let d = t.digest();
            match reference {
                None => reference = Some(d),
                Some(r) => assert_eq!(r, d),
            }
        }
    }

    #[test]
    fn dedup_groups() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let l = Label::random(&mut rng);
        let other = Label::random(&mut rng);
        let mut pkts = vec![
            AggPacket::notification(TokenPlain { vec: NotfVec::one_hot(1), label: l }),
            AggPacket::notification(TokenPlain { vec: NotfVec::one_hot(2), label: l }),
            AggPacket::notification(TokenPlain { vec: NotfVec::one_hot(3), label: l }),
            AggPacket::notification(TokenPlain { vec: NotfVec::one_hot(4), label: other }),
        ];
        osort(&mut pkts, |p| (p.label, p.is_carrier.word()), &mut NoTrace);
        entry_dedup(&mut pkts, &mut rng, &mut NoTrace);
        let survivors: Vec<&AggPacket> = pkts.iter().filter(|p| p.is_dummy == Bit::ZERO).collect();
        assert_eq!(survivors.len(), 2);
        let s = survivors.iter().find(|p| p.label == l).unwrap();
        assert_eq!(s.vec.ones(), vec![1, 2, 3]);
        let labels: HashSet<Label> = pkts.iter().map(|p| p.label).collect();
        assert_eq!(labels.len(), 4);
    }

    #[test]
    fn dedup_distinct_labels_has_no_dummies() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut pkts: Vec<AggPacket> = (0..50).map(|_| AggPacket::carrier(Label::random(&mut rng))).collect();
        osort(&mut pkts, |p| (p.label, p.is_carrier.word()), &mut NoTrace);
        entry_dedup(&mut pkts, &mut rng, &mut NoTrace);
        assert!(pkts.iter().all(|p| p.is_dummy == Bit::ZERO));
    }

    /// Clients spread over entries, scaled rounds vs the single-node oracle.
    fn scaled_round(w: &mut World, inputs: &[(ClientId, Vec<u8>)], entries: usize, backends: usize) -> Vec<(ClientId, NotfVec)> {
        let mut nodes: Vec<PingEntry> = (0..entries).map(|_| PingEntry::new(w.keys.clone(), backends, 128)).collect();
        for (l, c) in w.registry.by_label() {
            nodes[(c.0 as usize) % entries].registry_mut().register(c, l).unwrap();
        }
        let mut to_backend: Vec<Vec<Vec<AggPacket>>> = vec![Vec::new(); backends];
        for e in &nodes {
            let mine: Vec<_> = inputs.iter().filter(|(c, _)| e.registry().contains(*c)).cloned().collect();
            for (b, sub) in e.prepare(&mine, &mut w.rng, &mut NoTrace).unwrap().into_iter().enumerate() {
                to_backend[b].push(sub);
            }
        }
        let replies: Vec<Vec<Vec<AggPacket>>> = to_backend.into_iter().map(|s| backend_aggregate(s, &mut ChaCha20Rng::seed_from_u64(1), &mut NoTrace)).collect();
        let mut out = Vec::new();
        for (ei, e) in nodes.iter().enumerate() {
            let mine: Vec<Vec<AggPacket>> = replies.iter().map(|r| r[ei].clone()).collect();
            out.extend(e.finish(mine, &mut NoTrace).unwrap());
        }
        out
    }

    #[test]
    fn scaled_matches_single_node() {
        let mut w = world(120, 8);
        for (entries, backends) in [(1, 1), (2, 1), (2, 4), (3, 8)] {
            let (inputs, expect) = w.random_inputs(0.8);
            let mut got = scaled_round(&mut w, &inputs, entries, backends);
            got.sort_by_key(|(c, _)| *c);
            w.check(&got, &expect);
            let mut single = ping_round(&w.keys, &w.registry, &inputs, &mut w.rng, &mut NoTrace);
            single.sort_by_key(|(c, _)| *c);
            assert_eq!(got, single);
        }
    }

    #[test]
    fn packet_codec_round_trip() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let p = AggPacket {
            label: Label::random(&mut rng),
            vec: NotfVec::one_hot(9),
            is_carrier: Bit::ONE,
            is_dummy: Bit::ZERO,
            bin: 3,
            origin: 77,
        };
        let mut buf = Vec::new();
        p.encode(&mut buf);
        assert_eq!(buf.len(), AggPacket::ENCODED_LEN);
        assert_eq!(AggPacket::decode(&buf), Some(p));
    }
}
