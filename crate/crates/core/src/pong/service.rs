//! Request-level Pong: stores message packets under their retrieval tokens
//! and answers read requests. Also the entry/backend split for scaled mode.

use super::oht::OhtError;
use super::store::{MergeMode, PongState, StoreConfig, WriteEntry};
use crate::crypto::RetrievalToken;
use crate::obl_struct;
use crate::obliv::{Bit, OpKind, Tracer};
use crate::protocol::wire::{MsgPlain, ReadPlain, ResponsePlain, MSG_CT_LEN};
use crate::protocol::{ClientId, Params};
use crate::router::{bin_of, gather, oblivious_bin_assign, BinPlan, Routable, RouterError};

const CT_WORDS: usize = MSG_CT_LEN.div_ceil(8);

/// Stored value: sender and E2E ciphertext packed into words.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StoredMsg {
    pub sender: u64,
    pub ct: [u64; CT_WORDS],
}

impl Default for StoredMsg {
    fn default() -> Self {
        StoredMsg {
            sender: 0,
            ct: [0; CT_WORDS],
        }
    }
}

obl_struct!(StoredMsg { sender, ct });

impl StoredMsg {
    pub fn new(sender: ClientId, ct: &[u8; MSG_CT_LEN]) -> StoredMsg {
        let mut padded = [0u8; CT_WORDS * 8];
        padded[..MSG_CT_LEN].copy_from_slice(ct);
        let mut words = [0u64; CT_WORDS];
        for (w, c) in words.iter_mut().zip(padded.chunks_exact(8)) {
            *w = u64::from_be_bytes(c.try_into().unwrap());
        }
        StoredMsg {
            sender: sender.0,
            ct: words,
        }
    }

    pub fn ct_bytes(&self) -> Box<[u8; MSG_CT_LEN]> {
        let mut padded = [0u8; CT_WORDS * 8];
        for (c, w) in padded.chunks_exact_mut(8).zip(self.ct) {
            c.copy_from_slice(&w.to_be_bytes());
        }
        Box::new(padded[..MSG_CT_LEN].try_into().unwrap())
    }

    fn response(&self, found: Bit) -> ResponsePlain {
        ResponsePlain {
            found: found.declassify(),
            sender: ClientId(self.sender),
            ct: self.ct_bytes(),
        }
    }
}

pub struct PongService {
    state: PongState<StoredMsg>,
}

impl PongService {
    pub fn new(params: &Params, merge: MergeMode, seed: u64) -> PongService {
        PongService {
            state: PongState::new(StoreConfig::from_params(params, merge), seed),
        }
    }

    pub fn with_config(cfg: StoreConfig, seed: u64) -> PongService {
        PongService {
            state: PongState::new(cfg, seed),
        }
    }

    pub fn state(&self) -> &PongState<StoredMsg> {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut PongState<StoredMsg> {
        &mut self.state
    }

    /// Stores one round's message packets as one write batch.
    pub fn write<R: Tracer + ?Sized>(&mut self, msgs: &[MsgPlain], tracer: &mut R) -> Result<(), OhtError> {
        let batch = msgs
            .iter()
            .map(|m| WriteEntry {
                token: m.token.0,
                dummy: Bit::from_bool(m.dummy),
                value: StoredMsg::new(m.sender, &m.ct),
            })
            .collect();
        self.state.obl_write(batch, tracer)
    }

    /// Answers one round's read requests, in order.
    pub fn read<R: Tracer + ?Sized>(
        &mut self,
        reqs: &[ReadPlain],
        tracer: &mut R,
    ) -> Result<Vec<ResponsePlain>, OhtError> {
        let keys: Vec<(u64, Bit)> = reqs
            .iter()
            .map(|r| (r.token.0, Bit::from_bool(r.dummy)))
            .collect();
        Ok(self
            .state
            .obl_read(&keys, tracer)?
            .into_iter()
            .map(|(found, v)| v.response(found))
            .collect())
    }
}

/// Unit routed between Pong entries and backends.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PongItem {
    pub token: u64,
    pub dummy: Bit,
    /// Padding added by bin assignment.
    pub filler: Bit,
    pub found: Bit,
    pub bin: u64,
    /// Request position at the entry.
    pub tag: u64,
    pub value: StoredMsg,
}

obl_struct!(PongItem {
    token,
    dummy,
    filler,
    found,
    bin,
    tag,
    value
});

impl PongItem {
    pub const ENCODED_LEN: usize = 8 + 3 + 8 + 8 + 8 + CT_WORDS * 8;

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.token.to_be_bytes());
        out.push(self.dummy.word() as u8);
        out.push(self.filler.word() as u8);
        out.push(self.found.word() as u8);
        out.extend_from_slice(&self.bin.to_be_bytes());
        out.extend_from_slice(&self.tag.to_be_bytes());
        out.extend_from_slice(&self.value.sender.to_be_bytes());
        for w in self.value.ct {
            out.extend_from_slice(&w.to_be_bytes());
        }
    }

    pub fn decode(b: &[u8]) -> Option<PongItem> {
        if b.len() != Self::ENCODED_LEN {
            return None;
        }
        let word = |at: usize| u64::from_be_bytes(b[at..at + 8].try_into().unwrap());
        let mut ct = [0u64; CT_WORDS];
        for (i, w) in ct.iter_mut().enumerate() {
            *w = word(35 + 8 * i);
        }
        Some(PongItem {
            token: word(0),
            dummy: Bit::from_word(b[8] as u64),
            filler: Bit::from_word(b[9] as u64),
            found: Bit::from_word(b[10] as u64),
            bin: word(11),
            tag: word(19),
            value: StoredMsg {
                sender: word(27),
                ct,
            },
        })
    }
}

impl Routable for PongItem {
    fn bin(&self) -> u64 {
        self.bin
    }
    // client dummies still travel: a dropped read would lose its reply slot
    fn is_dummy(&self) -> Bit {
        self.filler
    }
    fn filler(bin: u64) -> Self {
        PongItem {
            dummy: Bit::ONE,
            filler: Bit::ONE,
            bin,
            ..PongItem::default()
        }
    }
}

fn token_bin(token: u64, backends: usize) -> u64 {
    bin_of(&token.to_be_bytes(), backends)
}

/// Client-facing Pong node in scaled mode. Stateless apart from the plan.
pub struct PongEntry {
    backends: usize,
    lambda: u32,
}

impl PongEntry {
    pub fn new(backends: usize, lambda: u32) -> PongEntry {
        PongEntry { backends, lambda }
    }

    pub fn plan(&self, n: usize) -> BinPlan {
        BinPlan::new(n, self.backends, self.lambda)
    }

    pub fn route_writes<R: Tracer + ?Sized>(
        &self,
        msgs: &[MsgPlain],
        tracer: &mut R,
    ) -> Result<Vec<Vec<PongItem>>, RouterError> {
        let items = msgs
            .iter()
            .enumerate()
            .map(|(i, m)| {
                tracer.one(OpKind::ScanWrite, i);
                PongItem {
                    token: m.token.0,
                    dummy: Bit::from_bool(m.dummy),
                    bin: token_bin(m.token.0, self.backends),
                    tag: i as u64,
                    value: StoredMsg::new(m.sender, &m.ct),
                    ..PongItem::default()
                }
            })
            .collect();
        let plan = self.plan(msgs.len());
        oblivious_bin_assign(items, plan.backends, plan.z_bound, tracer)
    }

    pub fn route_reads<R: Tracer + ?Sized>(
        &self,
        reqs: &[ReadPlain],
        tracer: &mut R,
    ) -> Result<Vec<Vec<PongItem>>, RouterError> {
        let items = reqs
            .iter()
            .enumerate()
            .map(|(i, r)| {
                tracer.one(OpKind::ScanWrite, i);
                PongItem {
                    token: r.token.0,
                    dummy: Bit::from_bool(r.dummy),
                    bin: token_bin(r.token.0, self.backends),
                    tag: i as u64,
                    ..PongItem::default()
                }
            })
            .collect();
        let plan = self.plan(reqs.len());
        oblivious_bin_assign(items, plan.backends, plan.z_bound, tracer)
    }

    /// Collects the `n` replies for this entry's read requests, in request order.
    pub fn finish_reads<R: Tracer + ?Sized>(
        &self,
        replies: Vec<Vec<PongItem>>,
        n: usize,
        tracer: &mut R,
    ) -> Result<Vec<ResponsePlain>, RouterError> {
        let items = gather(replies, self.backends, n, |it: &PongItem| !it.filler, |it| it.tag, tracer)?;
        Ok(items.iter().map(|it| it.value.response(it.found)).collect())
    }
}

/// Backend write: all entries' sub-batches form one write batch.
pub fn backend_write<R: Tracer + ?Sized>(
    svc: &mut PongService,
    subs: Vec<Vec<PongItem>>,
    tracer: &mut R,
) -> Result<(), OhtError> {
    let batch = subs
        .into_iter()
        .flatten()
        .map(|it| WriteEntry {
            token: it.token,
            dummy: it.dummy | it.filler,
            value: it.value,
        })
        .collect();
    svc.state.obl_write(batch, tracer)
}

/// Backend read: answers every entry's sub-batch in place.
pub fn backend_read<R: Tracer + ?Sized>(
    svc: &mut PongService,
    mut subs: Vec<Vec<PongItem>>,
    tracer: &mut R,
) -> Result<Vec<Vec<PongItem>>, OhtError> {
    let keys: Vec<(u64, Bit)> = subs
        .iter()
        .flatten()
        .map(|it| (it.token, it.dummy | it.filler))
        .collect();
    let mut results = svc.state.obl_read(&keys, tracer)?.into_iter();
    for it in subs.iter_mut().flatten() {
        let (found, value) = results.next().expect("one result per request");
        it.found = found;
        it.value = value;
    }
    Ok(subs)
}

impl From<&PongItem> for ReadPlain {
    fn from(it: &PongItem) -> ReadPlain {
        ReadPlain {
            token: RetrievalToken(it.token),
            dummy: it.dummy.declassify(),
        }
    }
}
