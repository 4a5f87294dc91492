//! Client SDK: friend list, per-round packet generation, digest parsing and
//! the retrieval queue.
//!
//! Every round a client emits one notification and one message packet, then
//! after its digest arrives one read request. Real and idle packets have the
//! same length. A client sends at most one real message per round; extra
//! messages wait in the outbox.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use crate::crypto::{
    aead_decrypt, aead_encrypt, derive_token, seal, RetrievalToken, ServicePublicKey, SymKey, KEY_LEN,
};
use crate::protocol::wire::{
    encode_notf_plain, frame_message, unframe_message, MsgPlain, ReadPlain, ResponsePlain, TokenPlain, WireError,
    MSG_CT_LEN, NOTF_PLAIN_LEN, SEALED_TOKEN_LEN,
};
use crate::protocol::{ClientId, Label, NotfVec, Params};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClientError {
    #[error("friend list is full ({0} friends)")]
    FriendListFull(usize),
    #[error("{0} is not a friend")]
    UnknownFriend(ClientId),
    #[error("{0} is already a friend")]
    DuplicateFriend(ClientId),
    #[error("slot {0} is taken or out of range")]
    BadSlot(usize),
    #[error("no notification token for {0} yet")]
    NoToken(ClientId),
    #[error("message is {len} bytes, limit is {max}")]
    MessageTooLong { len: usize, max: usize },
    #[error("friends file line {line}: {reason}")]
    FriendsFile { line: usize, reason: String },
    #[error(transparent)]
    Wire(#[from] WireError),
}

pub struct FriendRecord {
    pub id: ClientId,
    /// Slot in my notification vector.
    pub idx: usize,
    sk: SymKey,
    pub send_counter: u64,
    pub recv_counter: u64,
    /// The friend's sealed token, used to notify them.
    pub notf_token: Option<Vec<u8>>,
}

impl FriendRecord {
    pub fn secret(&self) -> &SymKey {
        &self.sk
    }
}

impl fmt::Debug for FriendRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FriendRecord")
            .field("id", &self.id)
            .field("idx", &self.idx)
            .field("send_counter", &self.send_counter)
            .field("recv_counter", &self.recv_counter)
            .finish_non_exhaustive()
    }
}

/// One line of a friends file: `id hex_sk hex_sealed_token idx`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FriendLine {
    pub id: ClientId,
    pub sk: [u8; KEY_LEN],
    pub token: Vec<u8>,
    pub idx: usize,
}

impl FriendLine {
    pub fn of(f: &FriendRecord) -> Option<FriendLine> {
        Some(FriendLine {
            id: f.id,
            sk: *f.sk.as_bytes(),
            token: f.notf_token.clone()?,
            idx: f.idx,
        })
    }

    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {}",
            self.id.0,
            hex::encode(self.sk),
            hex::encode(&self.token),
            self.idx
        )
    }
}

/// Parses a friends file. Blank lines and `#` comments are skipped.
pub fn parse_friends(text: &str) -> Result<Vec<FriendLine>, ClientError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| ClientError::FriendsFile {
            line: n + 1,
            reason: reason.into(),
        };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad("expected `id hex_sk hex_sealed_token idx`"));
        }
        let id = f[0].parse().map_err(|_| bad("bad id"))?;
        let sk = hex::decode(f[1])
            .ok()
            .and_then(|b| <[u8; KEY_LEN]>::try_from(b).ok())
            .ok_or_else(|| bad("bad secret key"))?;
        let token = hex::decode(f[2]).map_err(|_| bad("bad token hex"))?;
        if token.len() != SEALED_TOKEN_LEN {
            return Err(bad("sealed token has the wrong length"));
        }
        let idx = f[3].parse().map_err(|_| bad("bad slot"))?;
        out.push(FriendLine {
            id: ClientId(id),
            sk,
            token,
            idx,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueuedToken {
    pub token: RetrievalToken,
    pub friend: ClientId,
    pub idx: usize,
    seq: u64,
}

type Priority = Box<dyn Fn(&QueuedToken) -> i64 + Send>;

/// Pending retrievals. FIFO unless a priority function is set, in which case
/// the highest priority pops first (FIFO among equals).
#[derive(Default)]
pub struct TokenQueue {
    items: VecDeque<QueuedToken>,
    priority: Option<Priority>,
    next_seq: u64,
}

impl TokenQueue {
    pub fn set_priority(&mut self, f: impl Fn(&QueuedToken) -> i64 + Send + 'static) {
        self.priority = Some(Box::new(f));
    }

    pub fn push(&mut self, token: RetrievalToken, friend: ClientId, idx: usize) {
        self.items.push_back(QueuedToken {
            token,
            friend,
            idx,
            seq: self.next_seq,
        });
        self.next_seq += 1;
    }

    /// Puts a token back after a failed read, keeping its place.
    pub fn restore(&mut self, q: QueuedToken) {
        let at = self.items.iter().position(|x| x.seq > q.seq).unwrap_or(self.items.len());
        self.items.insert(at, q);
    }

    pub fn pop(&mut self) -> Option<QueuedToken> {
        let at = match &self.priority {
            None => 0,
            Some(f) => {
                let mut best = None;
                for (i, q) in self.items.iter().enumerate() {
                    let p = f(q);
                    if best.map_or(true, |(bp, _)| p > bp) {
                        best = Some((p, i));
                    }
                }
                best?.1
            }
        };
        self.items.remove(at)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Delivered {
    pub round: u64,
    pub from: u64,
    #[serde(serialize_with = "as_text")]
    pub text: Vec<u8>,
}

fn as_text<S: serde::Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&String::from_utf8_lossy(b))
}

pub struct Client {
    id: ClientId,
    label: Label,
    ping_pk: ServicePublicKey,
    max_friends: usize,
    msg_len: usize,
    friends: Vec<Option<FriendRecord>>,
    by_id: HashMap<ClientId, usize>,
    outbox: VecDeque<(ClientId, Vec<u8>)>,
    queue: TokenQueue,
    inbox: Vec<Delivered>,
    in_flight_msg: Option<(ClientId, Vec<u8>)>,
    in_flight_read: Option<QueuedToken>,
    rng: ChaCha20Rng,
}

impl Client {
    pub fn new(id: ClientId, ping_pk: ServicePublicKey, params: &Params, seed: u64) -> Client {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let label = Label::random(&mut rng);
        Client {
            id,
            label,
            ping_pk,
            max_friends: params.max_friends,
            msg_len: params.msg_len,
            friends: (0..params.max_friends).map(|_| None).collect(),
            by_id: HashMap::new(),
            outbox: VecDeque::new(),
            queue: TokenQueue::default(),
            inbox: Vec::new(),
            in_flight_msg: None,
            in_flight_read: None,
            rng,
        }
    }

    pub fn id(&self) -> ClientId {
        self.id
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn friend(&self, id: ClientId) -> Option<&FriendRecord> {
        self.by_id.get(&id).and_then(|&i| self.friends[i].as_ref())
    }

    pub fn friends(&self) -> impl Iterator<Item = &FriendRecord> {
        self.friends.iter().flatten()
    }

    pub fn inbox(&self) -> &[Delivered] {
        &self.inbox
    }

    pub fn take_inbox(&mut self) -> Vec<Delivered> {
        std::mem::take(&mut self.inbox)
    }

    pub fn queue(&self) -> &TokenQueue {
        &self.queue
    }

    pub fn queue_mut(&mut self) -> &mut TokenQueue {
        &mut self.queue
    }

    pub fn outbox_len(&self) -> usize {
        self.outbox.len()
    }

    /// Sealed token for the friend in slot `idx`: one-hot at `idx` plus my label.
    fn my_token(&mut self, idx: usize) -> Vec<u8> {
        let t = TokenPlain {
            vec: NotfVec::one_hot(idx),
            label: self.label,
        };
        seal(&t.encode(), &self.ping_pk, &mut self.rng)
    }

    /// Adds a friend in the lowest free slot. Returns the slot and the sealed
    /// token to hand to the friend out of band.
    pub fn add_friend(&mut self, id: ClientId, sk: SymKey) -> Result<(usize, Vec<u8>), ClientError> {
        let idx = self
            .friends
            .iter()
            .position(Option::is_none)
            .ok_or(ClientError::FriendListFull(self.max_friends))?;
        self.insert_friend(id, sk, idx, None)?;
        Ok((idx, self.my_token(idx)))
    }

    /// Re-creates a friend from saved state (friends file).
    pub fn restore_friend(
        &mut self,
        id: ClientId,
        sk: SymKey,
        idx: usize,
        notf_token: Vec<u8>,
    ) -> Result<(), ClientError> {
        if idx >= self.max_friends || self.friends[idx].is_some() {
            return Err(ClientError::BadSlot(idx));
        }
        self.insert_friend(id, sk, idx, Some(notf_token))
    }

    fn insert_friend(&mut self, id: ClientId, sk: SymKey, idx: usize, notf_token: Option<Vec<u8>>) -> Result<(), ClientError> {
        if self.by_id.contains_key(&id) {
            return Err(ClientError::DuplicateFriend(id));
        }
        self.friends[idx] = Some(FriendRecord {
            id,
            idx,
            sk,
            send_counter: 0,
            recv_counter: 0,
            notf_token,
        });
        self.by_id.insert(id, idx);
        Ok(())
    }

    pub fn load_friends(&mut self, lines: &[FriendLine]) -> Result<(), ClientError> {
        for l in lines {
            self.restore_friend(l.id, SymKey::from_bytes(l.sk), l.idx, l.token.clone())?;
        }
        Ok(())
    }

    pub fn set_notf_token(&mut self, id: ClientId, token: Vec<u8>) -> Result<(), ClientError> {
        let idx = *self.by_id.get(&id).ok_or(ClientError::UnknownFriend(id))?;
        self.friends[idx].as_mut().expect("indexed friend").notf_token = Some(token);
        Ok(())
    }

    fn friend_mut(&mut self, id: ClientId) -> Result<&mut FriendRecord, ClientError> {
        let idx = *self.by_id.get(&id).ok_or(ClientError::UnknownFriend(id))?;
        Ok(self.friends[idx].as_mut().expect("indexed friend"))
    }

    /// Queues a message for a later round.
    pub fn send(&mut self, to: ClientId, text: &[u8]) -> Result<(), ClientError> {
        if text.len() > self.msg_len {
            return Err(ClientError::MessageTooLong {
                len: text.len(),
                max: self.msg_len,
            });
        }
        let f = self.friend(to).ok_or(ClientError::UnknownFriend(to))?;
        if f.notf_token.is_none() {
            return Err(ClientError::NoToken(to));
        }
        self.outbox.push_back((to, text.to_vec()));
        Ok(())
    }

    /// Notification plaintext: the buddy's sealed token, or a sealed blank.
    pub fn gen_notf(&mut self, buddy: Option<ClientId>) -> Result<[u8; NOTF_PLAIN_LEN], ClientError> {
        let sealed = match buddy {
            Some(id) => self
                .friend(id)
                .ok_or(ClientError::UnknownFriend(id))?
                .notf_token
                .clone()
                .ok_or(ClientError::NoToken(id))?,
            None => seal(&TokenPlain::blank().encode(), &self.ping_pk, &mut self.rng),
        };
        Ok(encode_notf_plain(&sealed)?)
    }

    /// Message packet for `buddy`, or a dummy. A real message advances the
    /// pair's send counter.
    pub fn gen_msg(&mut self, buddy: Option<(ClientId, &[u8])>) -> Result<MsgPlain, ClientError> {
        let me = self.id;
        match buddy {
            Some((id, text)) => {
                if text.len() > self.msg_len {
                    return Err(ClientError::MessageTooLong {
                        len: text.len(),
                        max: self.msg_len,
                    });
                }
                let framed = frame_message(text)?;
                let idx = *self.by_id.get(&id).ok_or(ClientError::UnknownFriend(id))?;
                let f = self.friends[idx].as_mut().expect("indexed friend");
                let token = derive_token(&f.sk, id, me, f.send_counter);
                let ct = aead_encrypt(&f.sk, &framed, &token.0.to_be_bytes(), &mut self.rng);
                f.send_counter += 1;
                Ok(MsgPlain {
                    token,
                    dummy: false,
                    sender: me,
                    ct: Box::new(ct.try_into().expect("fixed ciphertext length")),
                })
            }
            None => {
                let mut ct = [0u8; MSG_CT_LEN];
                self.rng.fill(&mut ct[..]);
                Ok(MsgPlain {
                    token: RetrievalToken(self.rng.gen()),
                    dummy: true,
                    sender: me,
                    ct: Box::new(ct),
                })
            }
        }
    }

    /// Tokens for every set bit of a digest, queued for retrieval.
    pub fn parse_notf(&mut self, digest: &NotfVec) -> Vec<RetrievalToken> {
        let me = self.id;
        let mut out = Vec::new();
        for b in digest.ones() {
            let Some(f) = self.friends.get_mut(b).and_then(Option::as_mut) else {
                log::warn!("client {me}: digest bit {b} has no friend");
                continue;
            };
            let token = derive_token(&f.sk, me, f.id, f.recv_counter);
            f.recv_counter += 1;
            self.queue.push(token, f.id, b);
            out.push(token);
        }
        out
    }

    /// First half of a round: one notification and one message packet.
    pub fn send_phase(&mut self) -> ([u8; NOTF_PLAIN_LEN], MsgPlain) {
        let next = self.outbox.pop_front();
        let (notf, msg) = match &next {
            Some((to, text)) => (
                self.gen_notf(Some(*to)).expect("checked when queued"),
                self.gen_msg(Some((*to, text))).expect("checked when queued"),
            ),
            None => (
                self.gen_notf(None).expect("blank always seals"),
                self.gen_msg(None).expect("dummy always builds"),
            ),
        };
        self.in_flight_msg = next;
        (notf, msg)
    }

    /// The round's packets did not reach the servers: undo the send so the
    /// message goes out again next round under the same token.
    pub fn send_failed(&mut self) {
        if let Some((to, text)) = self.in_flight_msg.take() {
            if let Ok(f) = self.friend_mut(to) {
                f.send_counter -= 1;
            }
            self.outbox.push_front((to, text));
        }
    }

    /// Second half of a round: take the digest, issue one read request.
    pub fn read_phase(&mut self, digest: &NotfVec) -> ReadPlain {
        self.in_flight_msg = None;
        self.parse_notf(digest);
        self.next_read()
    }

    pub fn next_read(&mut self) -> ReadPlain {
        match self.queue.pop() {
            Some(q) => {
                self.in_flight_read = Some(q);
                ReadPlain {
                    token: q.token,
                    dummy: false,
                }
            }
            None => {
                self.in_flight_read = None;
                ReadPlain {
                    token: RetrievalToken(self.rng.gen()),
                    dummy: true,
                }
            }
        }
    }

    pub fn read_failed(&mut self) {
        if let Some(q) = self.in_flight_read.take() {
            self.queue.restore(q);
        }
    }

    /// Handles the round's read response. Returns the delivered message, if any.
    pub fn on_response(&mut self, resp: &ResponsePlain, round: u64) -> Option<&Delivered> {
        let q = self.in_flight_read.take()?;
        if !resp.found {
            log::warn!("client {}: token from {} not found", self.id, q.friend);
            return None;
        }
        if resp.sender != q.friend {
            log::warn!("client {}: response sender {} does not match {}", self.id, resp.sender, q.friend);
            return None;
        }
        let f = self.friend(q.friend)?;
        let framed = match aead_decrypt(&f.sk, &resp.ct[..], &q.token.0.to_be_bytes()) {
            Ok(p) => p,
            Err(e) => {
                log::warn!("client {}: message from {} rejected: {e}", self.id, q.friend);
                return None;
            }
        };
        let text = unframe_message(&framed).ok()?;
        self.inbox.push(Delivered {
            round,
            from: q.friend.0,
            text,
        });
        self.inbox.last()
    }
}

/// Makes `a` and `b` friends under a fresh shared secret and swaps tokens.
pub fn befriend<R: rand::RngCore + rand::CryptoRng>(a: &mut Client, b: &mut Client, rng: &mut R) -> Result<(), ClientError> {
    let sk = SymKey::random(rng);
    let (_, tok_a) = a.add_friend(b.id(), sk.clone())?;
    let (_, tok_b) = b.add_friend(a.id(), sk)?;
    a.set_notf_token(b.id(), tok_b)?;
    b.set_notf_token(a.id(), tok_a)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::ServiceKeyPair;
    use crate::protocol::wire::decode_notf_plain;

    fn setup() -> (ServiceKeyPair, Client, Client, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let keys = ServiceKeyPair::generate(&mut rng);
        let p = Params::default();
        let a = Client::new(ClientId(1), keys.public(), &p, 10);
        let b = Client::new(ClientId(2), keys.public(), &p, 11);
        (keys, a, b, rng)
    }

    fn unseal_notf(keys: &ServiceKeyPair, plain: &[u8]) -> TokenPlain {
        let sealed = decode_notf_plain(plain).unwrap();
        TokenPlain::decode(&keys.unseal(sealed).unwrap()).unwrap()
    }

    #[test]
    fn first_friend_gets_slot_zero() {
        let (keys, mut a, _, mut rng) = setup();
        let (idx, tok) = a.add_friend(ClientId(2), SymKey::random(&mut rng)).unwrap();
        assert_eq!(idx, 0);
        let t = TokenPlain::decode(&keys.unseal(&tok).unwrap()).unwrap();
        assert_eq!(t.vec.ones(), vec![0]);
        assert_eq!(t.label, a.label());
    }

    #[test]
    fn friend_list_capacity() {
        let (_, mut a, _, mut rng) = setup();
        for i in 0..512 {
            a.add_friend(ClientId(100 + i), SymKey::random(&mut rng)).unwrap();
        }
        assert_eq!(
            a.add_friend(ClientId(9999), SymKey::random(&mut rng)),
            Err(ClientError::FriendListFull(512))
        );
    }

    #[test]
    fn idle_and_real_notifications() {
        let (keys, mut a, mut b, mut rng) = setup();
        // give b some earlier friends so a lands at slot 3
        for i in 0..3 {
            b.add_friend(ClientId(50 + i), SymKey::random(&mut rng)).unwrap();
        }
        befriend(&mut a, &mut b, &mut rng).unwrap();
        let idle = a.gen_notf(None).unwrap();
        let real = a.gen_notf(Some(ClientId(2))).unwrap();
        assert_eq!(idle.len(), real.len());
        let t = unseal_notf(&keys, &idle);
        assert!(t.vec.is_zero() && t.label.is_null());
        let t = unseal_notf(&keys, &real);
        assert_eq!(t.vec.ones(), vec![3]);
        assert_eq!(t.label, b.label());
    }

    #[test]
    fn message_tokens_agree_with_receiver() {
        let (_, mut a, mut b, mut rng) = setup();
        befriend(&mut a, &mut b, &mut rng).unwrap();
        let m0 = a.gen_msg(Some((ClientId(2), b"one"))).unwrap();
        let m1 = a.gen_msg(Some((ClientId(2), b"two"))).unwrap();
        assert_ne!(m0.token, m1.token);
        let slot = a.friend(ClientId(2)).unwrap().idx;
        assert_eq!(slot, 0);
        // b's slot for a is 0 as well; set the bit twice in two digests
        let t0 = b.parse_notf(&NotfVec::one_hot(0));
        let t1 = b.parse_notf(&NotfVec::one_hot(0));
        assert_eq!(t0, vec![m0.token]);
        assert_eq!(t1, vec![m1.token]);
        let dummy = a.gen_msg(None).unwrap();
        assert!(dummy.dummy);
        assert_eq!(dummy.encode().len(), m0.encode().len());
    }

    #[test]
    fn oversized_message_rejected() {
        let (_, mut a, mut b, mut rng) = setup();
        befriend(&mut a, &mut b, &mut rng).unwrap();
        assert!(matches!(
            a.send(ClientId(2), &[0u8; 257]),
            Err(ClientError::MessageTooLong { .. })
        ));
        assert_eq!(a.outbox_len(), 0);
    }

    #[test]
    fn unknown_bit_ignored() {
        let (_, mut a, _, _) = setup();
        assert!(a.parse_notf(&NotfVec::one_hot(5)).is_empty());
        assert!(a.parse_notf(&NotfVec::zero()).is_empty());
    }

    #[test]
    fn response_delivers_and_dummy_does_not() {
        let (_, mut a, mut b, mut rng) = setup();
        befriend(&mut a, &mut b, &mut rng).unwrap();
        a.send(ClientId(2), b"hello").unwrap();
        let (_, msg) = a.send_phase();
        let read = b.read_phase(&NotfVec::one_hot(0));
        assert_eq!(read.token, msg.token);
        let resp = ResponsePlain {
            found: true,
            sender: msg.sender,
            ct: msg.ct.clone(),
        };
        assert_eq!(b.on_response(&resp, 7).unwrap().text, b"hello");
        let read = b.read_phase(&NotfVec::zero());
        assert!(read.dummy);
        assert!(b.on_response(&ResponsePlain::not_found(), 8).is_none());
        assert_eq!(b.inbox().len(), 1);
    }

    #[test]
    fn failed_send_is_retried_with_same_token() {
        let (_, mut a, mut b, mut rng) = setup();
        befriend(&mut a, &mut b, &mut rng).unwrap();
        a.send(ClientId(2), b"x").unwrap();
        let (_, m1) = a.send_phase();
        a.send_failed();
        let (_, m2) = a.send_phase();
        assert_eq!(m1.token, m2.token);
        assert!(!m2.dummy);
    }

    #[test]
    fn priority_queue_order() {
        let mut q = TokenQueue::default();
        q.push(RetrievalToken(1), ClientId(1), 0);
        q.push(RetrievalToken(2), ClientId(2), 1);
        q.push(RetrievalToken(3), ClientId(2), 1);
        q.set_priority(|t| if t.friend == ClientId(2) { 1 } else { 0 });
        assert_eq!(q.pop().unwrap().token, RetrievalToken(2));
        let third = q.pop().unwrap();
        assert_eq!(third.token, RetrievalToken(3));
        q.restore(third);
        assert_eq!(q.pop().unwrap().token, RetrievalToken(3));
        assert_eq!(q.pop().unwrap().token, RetrievalToken(1));
        assert!(q.pop().is_none());
    }

    #[test]
    fn friends_file_round_trip() {
        let (keys, mut a, mut b, mut rng) = setup();
        befriend(&mut a, &mut b, &mut rng).unwrap();
        let text = format!(
            "# saved\n\n{}\n",
            a.friends().filter_map(FriendLine::of).map(|l| l.to_line()).collect::<Vec<_>>().join("\n")
        );
        let lines = parse_friends(&text).unwrap();
        assert_eq!(lines.len(), 1);
        let mut a2 = Client::new(ClientId(1), keys.public(), &Params::default(), 10);
        a2.load_friends(&lines).unwrap();
        let f = a2.friend(ClientId(2)).unwrap();
        assert_eq!(f.secret().as_bytes(), a.friend(ClientId(2)).unwrap().secret().as_bytes());
        assert_eq!(f.notf_token, a.friend(ClientId(2)).unwrap().notf_token);

        assert!(matches!(parse_friends("1 zz 00 0"), Err(ClientError::FriendsFile { line: 1, .. })));
        assert!(parse_friends("1 2 3").is_err());
    }
}
