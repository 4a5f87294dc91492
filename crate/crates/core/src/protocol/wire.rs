//! Frame layout and fixed-size packet bodies.
//!
//! Frame: `kind (1) ‖ round (8, BE) ‖ body`. On TCP each frame is preceded by
//! a 4-byte big-endian length. Client-facing kinds have one body length each;
//! inter-node batch kinds carry a count-dependent body.

use std::io::{self, Read, Write};

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use super::{ClientId, Label, NotfVec, LABEL_BYTES, MSG_LEN, NOTF_VEC_BYTES};
use crate::crypto::{
    aead_decrypt, aead_encrypt, CryptoError, RetrievalToken, SymKey, AEAD_OVERHEAD, KEY_LEN,
    SEAL_OVERHEAD,
};

pub const FRAME_HEADER_LEN: usize = 9;
pub const MAX_FRAME_LEN: usize = 64 << 20;

/// Unsealed notification token: vector ‖ label.
pub const TOKEN_PLAIN_LEN: usize = NOTF_VEC_BYTES + LABEL_BYTES;
pub const SEALED_TOKEN_LEN: usize = TOKEN_PLAIN_LEN + SEAL_OVERHEAD;
/// Channel ciphertext of a notification, as sent by clients.
pub const NOTF_BODY_LEN: usize = 256;
pub const NOTF_PLAIN_LEN: usize = NOTF_BODY_LEN - AEAD_OVERHEAD;

/// Message text framed as `len (2) ‖ text ‖ zero padding`.
pub const MSG_FRAMED_LEN: usize = 2 + MSG_LEN;
/// End-to-end ciphertext of a message under the friendship key.
pub const MSG_CT_LEN: usize = MSG_FRAMED_LEN + AEAD_OVERHEAD;
pub const MSG_PLAIN_LEN: usize = 8 + 1 + 8 + MSG_CT_LEN;
pub const READ_PLAIN_LEN: usize = 8 + 1;
pub const RESPONSE_PLAIN_LEN: usize = 1 + 8 + MSG_CT_LEN;
pub const HELLO_PLAIN_LEN: usize = KEY_LEN + LABEL_BYTES + 8;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("frame truncated ({0} bytes)")]
    Truncated(usize),
    #[error("unknown frame kind {0}")]
    Kind(u8),
    #[error("{kind:?} body is {got} bytes, expected {expected}")]
    Length {
        kind: FrameKind,
        expected: usize,
        got: usize,
    },
    #[error("expected {expected:?} frame, got {got:?}")]
    UnexpectedKind { expected: FrameKind, got: FrameKind },
    #[error("malformed {0} payload")]
    Payload(&'static str),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum FrameKind {
    /// Client → server: session key, label and id sealed to the service key.
    Hello = 1,
    /// Server → client: current round, under the session key.
    Welcome = 2,
    Notf = 3,
    Digest = 4,
    Msg = 5,
    Read = 6,
    Response = 7,
    /// Entry → backend padded sub-batch (variable length).
    SubBatch = 8,
    /// Backend → entry processed sub-batch (variable length).
    SubReply = 9,
    /// Either direction: fatal round error, UTF-8 reason in the clear.
    Error = 10,
}

impl FrameKind {
    pub const ALL: [FrameKind; 10] = [
        FrameKind::Hello,
        FrameKind::Welcome,
        FrameKind::Notf,
        FrameKind::Digest,
        FrameKind::Msg,
        FrameKind::Read,
        FrameKind::Response,
        FrameKind::SubBatch,
        FrameKind::SubReply,
        FrameKind::Error,
    ];

    pub fn from_u8(b: u8) -> Result<FrameKind, WireError> {
        FrameKind::ALL
            .iter()
            .copied()
            .find(|k| *k as u8 == b)
            .ok_or(WireError::Kind(b))
    }

    /// Fixed body length, or `None` for count-dependent kinds.
    pub fn body_len(self) -> Option<usize> {
        match self {
            FrameKind::Hello => Some(HELLO_PLAIN_LEN + SEAL_OVERHEAD),
            FrameKind::Welcome => Some(8 + AEAD_OVERHEAD),
            FrameKind::Notf => Some(NOTF_BODY_LEN),
            FrameKind::Digest => Some(NOTF_VEC_BYTES + AEAD_OVERHEAD),
            FrameKind::Msg => Some(MSG_PLAIN_LEN + AEAD_OVERHEAD),
            FrameKind::Read => Some(READ_PLAIN_LEN + AEAD_OVERHEAD),
            FrameKind::Response => Some(RESPONSE_PLAIN_LEN + AEAD_OVERHEAD),
            FrameKind::SubBatch | FrameKind::SubReply | FrameKind::Error => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub round: u64,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(kind: FrameKind, round: u64, body: Vec<u8>) -> Frame {
        Frame { kind, round, body }
    }

    pub fn error(round: u64, reason: &str) -> Frame {
        Frame::new(FrameKind::Error, round, reason.as_bytes().to_vec())
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN + self.body.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.kind as u8);
        out.extend_from_slice(&self.round.to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Frame, WireError> {
        if bytes.len() < FRAME_HEADER_LEN {
            return Err(WireError::Truncated(bytes.len()));
        }
        let kind = FrameKind::from_u8(bytes[0])?;
        let round = u64::from_be_bytes(bytes[1..9].try_into().unwrap());
        let body = &bytes[9..];
        if let Some(expected) = kind.body_len() {
            if body.len() != expected {
                return Err(WireError::Length {
                    kind,
                    expected,
                    got: body.len(),
                });
            }
        }
        Ok(Frame::new(kind, round, body.to_vec()))
    }

    pub fn expect(&self, kind: FrameKind) -> Result<(), WireError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(WireError::UnexpectedKind {
                expected: kind,
                got: self.kind,
            })
        }
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    let bytes = frame.encode();
    w.write_all(&(bytes.len() as u32).to_be_bytes())?;
    w.write_all(&bytes)?;
    w.flush()
}

pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Frame> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len)?;
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Frame::decode(&buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn frame_ad(kind: FrameKind, round: u64) -> [u8; 9] {
    let mut ad = [0u8; 9];
    ad[0] = kind as u8;
    ad[1..].copy_from_slice(&round.to_be_bytes());
    ad
}

/// Per-session AEAD channel. Kind and round are bound as associated data,
/// so a frame replayed into another round fails authentication.
#[derive(Clone, Debug)]
pub struct Channel {
    key: SymKey,
}

impl Channel {
    pub fn new(key: SymKey) -> Channel {
        Channel { key }
    }

    pub fn key(&self) -> &SymKey {
        &self.key
    }

    pub fn seal<R: RngCore + CryptoRng>(
        &self,
        kind: FrameKind,
        round: u64,
        plaintext: &[u8],
        rng: &mut R,
    ) -> Frame {
        let body = aead_encrypt(&self.key, plaintext, &frame_ad(kind, round), rng);
        Frame::new(kind, round, body)
    }

    pub fn open(&self, frame: &Frame, kind: FrameKind) -> Result<Vec<u8>, WireError> {
        frame.expect(kind)?;
        Ok(aead_decrypt(
            &self.key,
            &frame.body,
            &frame_ad(frame.kind, frame.round),
        )?)
    }
}

/// What a notification token unseals to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenPlain {
    pub vec: NotfVec,
    pub label: Label,
}

impl TokenPlain {
    pub fn blank() -> TokenPlain {
        TokenPlain {
            vec: NotfVec::zero(),
            label: Label::NULL,
        }
    }

    pub fn encode(&self) -> [u8; TOKEN_PLAIN_LEN] {
        let mut out = [0u8; TOKEN_PLAIN_LEN];
        out[..NOTF_VEC_BYTES].copy_from_slice(&self.vec.to_bytes());
        out[NOTF_VEC_BYTES..].copy_from_slice(&self.label.to_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Result<TokenPlain, WireError> {
        if b.len() != TOKEN_PLAIN_LEN {
            return Err(WireError::Payload("token"));
        }
        Ok(TokenPlain {
            vec: NotfVec::from_bytes(b[..NOTF_VEC_BYTES].try_into().unwrap()),
            label: Label::from_bytes(b[NOTF_VEC_BYTES..].try_into().unwrap()),
        })
    }
}

/// Notification channel plaintext: the sealed token, zero padded.
pub fn encode_notf_plain(sealed_token: &[u8]) -> Result<[u8; NOTF_PLAIN_LEN], WireError> {
    if sealed_token.len() != SEALED_TOKEN_LEN {
        return Err(WireError::Payload("sealed token"));
    }
    let mut out = [0u8; NOTF_PLAIN_LEN];
    out[..SEALED_TOKEN_LEN].copy_from_slice(sealed_token);
    Ok(out)
}

pub fn decode_notf_plain(b: &[u8]) -> Result<&[u8], WireError> {
    if b.len() != NOTF_PLAIN_LEN {
        return Err(WireError::Payload("notification"));
    }
    Ok(&b[..SEALED_TOKEN_LEN])
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HelloPlain {
    pub session_key: SymKey,
    /// Ping registers this label for the client's carrier; Pong ignores it.
    pub label: Label,
    pub client: ClientId,
}

impl HelloPlain {
    pub fn encode(&self) -> [u8; HELLO_PLAIN_LEN] {
        let mut out = [0u8; HELLO_PLAIN_LEN];
        out[..KEY_LEN].copy_from_slice(self.session_key.as_bytes());
        out[KEY_LEN..KEY_LEN + LABEL_BYTES].copy_from_slice(&self.label.to_bytes());
        out[KEY_LEN + LABEL_BYTES..].copy_from_slice(&self.client.0.to_be_bytes());
        out
    }

    pub fn decode(b: &[u8]) -> Result<HelloPlain, WireError> {
        if b.len() != HELLO_PLAIN_LEN {
            return Err(WireError::Payload("hello"));
        }
        Ok(HelloPlain {
            session_key: SymKey::from_bytes(b[..KEY_LEN].try_into().unwrap()),
            label: Label::from_bytes(b[KEY_LEN..KEY_LEN + LABEL_BYTES].try_into().unwrap()),
            client: ClientId(u64::from_be_bytes(
                b[KEY_LEN + LABEL_BYTES..].try_into().unwrap(),
            )),
        })
    }
}

/// Message packet: `token ‖ dummy ‖ sender ‖ E2E ciphertext`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MsgPlain {
    pub token: RetrievalToken,
    pub dummy: bool,
    pub sender: ClientId,
    pub ct: Box<[u8; MSG_CT_LEN]>,
}

impl MsgPlain {
    pub fn encode(&self) -> [u8; MSG_PLAIN_LEN] {
        let mut out = [0u8; MSG_PLAIN_LEN];
        out[..8].copy_from_slice(&self.token.0.to_be_bytes());
        out[8] = self.dummy as u8;
        out[9..17].copy_from_slice(&self.sender.0.to_be_bytes());
        out[17..].copy_from_slice(&self.ct[..]);
        out
    }

    pub fn decode(b: &[u8]) -> Result<MsgPlain, WireError> {
        if b.len() != MSG_PLAIN_LEN || b[8] > 1 {
            return Err(WireError::Payload("message"));
        }
        Ok(MsgPlain {
            token: RetrievalToken(u64::from_be_bytes(b[..8].try_into().unwrap())),
            dummy: b[8] == 1,
            sender: ClientId(u64::from_be_bytes(b[9..17].try_into().unwrap())),
            ct: Box::new(b[17..].try_into().unwrap()),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReadPlain {
    pub token: RetrievalToken,
    pub dummy: bool,
}

impl ReadPlain {
    pub fn encode(&self) -> [u8; READ_PLAIN_LEN] {
        let mut out = [0u8; READ_PLAIN_LEN];
        out[..8].copy_from_slice(&self.token.0.to_be_bytes());
        out[8] = self.dummy as u8;
        out
    }

    pub fn decode(b: &[u8]) -> Result<ReadPlain, WireError> {
        if b.len() != READ_PLAIN_LEN || b[8] > 1 {
            return Err(WireError::Payload("read request"));
        }
        Ok(ReadPlain {
            token: RetrievalToken(u64::from_be_bytes(b[..8].try_into().unwrap())),
            dummy: b[8] == 1,
        })
    }
}

/// Read response: `found ‖ sender ‖ E2E ciphertext` (zeros when not found).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResponsePlain {
    pub found: bool,
    pub sender: ClientId,
    pub ct: Box<[u8; MSG_CT_LEN]>,
}

impl ResponsePlain {
    pub fn not_found() -> ResponsePlain {
        ResponsePlain {
            found: false,
            sender: ClientId(0),
            ct: Box::new([0u8; MSG_CT_LEN]),
        }
    }

    pub fn encode(&self) -> [u8; RESPONSE_PLAIN_LEN] {
        let mut out = [0u8; RESPONSE_PLAIN_LEN];
        out[0] = self.found as u8;
        out[1..9].copy_from_slice(&self.sender.0.to_be_bytes());
        out[9..].copy_from_slice(&self.ct[..]);
        out
    }

    pub fn decode(b: &[u8]) -> Result<ResponsePlain, WireError> {
        if b.len() != RESPONSE_PLAIN_LEN || b[0] > 1 {
            return Err(WireError::Payload("response"));
        }
        Ok(ResponsePlain {
            found: b[0] == 1,
            sender: ClientId(u64::from_be_bytes(b[1..9].try_into().unwrap())),
            ct: Box::new(b[9..].try_into().unwrap()),
        })
    }
}

pub fn encode_digest(v: &NotfVec) -> [u8; NOTF_VEC_BYTES] {
    v.to_bytes()
}

pub fn decode_digest(b: &[u8]) -> Result<NotfVec, WireError> {
    let arr: &[u8; NOTF_VEC_BYTES] = b.try_into().map_err(|_| WireError::Payload("digest"))?;
    Ok(NotfVec::from_bytes(arr))
}

/// Pads message text to the fixed framed length.
pub fn frame_message(text: &[u8]) -> Result<[u8; MSG_FRAMED_LEN], WireError> {
    if text.len() > MSG_LEN {
        return Err(WireError::Payload("message text too long"));
    }
    let mut out = [0u8; MSG_FRAMED_LEN];
    out[..2].copy_from_slice(&(text.len() as u16).to_be_bytes());
    out[2..2 + text.len()].copy_from_slice(text);
    Ok(out)
}

pub fn unframe_message(b: &[u8]) -> Result<Vec<u8>, WireError> {
    if b.len() != MSG_FRAMED_LEN {
        return Err(WireError::Payload("framed message"));
    }
    let len = u16::from_be_bytes([b[0], b[1]]) as usize;
    if len > MSG_LEN {
        return Err(WireError::Payload("framed message length"));
    }
    Ok(b[2..2 + len].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    fn random_ct(r: &mut ChaCha20Rng) -> Box<[u8; MSG_CT_LEN]> {
        let mut ct = Box::new([0u8; MSG_CT_LEN]);
        r.fill_bytes(&mut ct[..]);
        ct
    }

    #[test]
    fn frame_round_trip() {
        let f = Frame::new(FrameKind::Read, 42, vec![3u8; READ_PLAIN_LEN + AEAD_OVERHEAD]);
        assert_eq!(Frame::decode(&f.encode()).unwrap(), f);
    }

    #[test]
    fn truncated_frame_rejected() {
        let f = Frame::new(FrameKind::Notf, 1, vec![0u8; NOTF_BODY_LEN]);
        let bytes = f.encode();
        assert!(matches!(
            Frame::decode(&bytes[..bytes.len() - 1]),
            Err(WireError::Length { .. })
        ));
        assert_eq!(Frame::decode(&bytes[..4]), Err(WireError::Truncated(4)));
        let mut bad = bytes.clone();
        bad[0] = 99;
        assert_eq!(Frame::decode(&bad), Err(WireError::Kind(99)));
    }

    #[test]
    fn one_hot_notification_round_trip() {
        let t = TokenPlain {
            vec: NotfVec::one_hot(5),
            label: Label([1, 2, 3, 4]),
        };
        assert_eq!(TokenPlain::decode(&t.encode()).unwrap(), t);
    }

    #[test]
    fn dummy_msg_round_trip() {
        let mut r = rng();
        let m = MsgPlain {
            token: RetrievalToken(r.gen()),
            dummy: true,
            sender: ClientId(0),
            ct: random_ct(&mut r),
        };
        assert_eq!(MsgPlain::decode(&m.encode()).unwrap(), m);
        assert!(MsgPlain::decode(&m.encode()[1..]).is_err());
    }

    #[test]
    fn channel_binds_round_and_kind() {
        let mut r = rng();
        let ch = Channel::new(SymKey::random(&mut r));
        let f = ch.seal(FrameKind::Read, 3, b"abcdefghi", &mut r);
        assert_eq!(ch.open(&f, FrameKind::Read).unwrap(), b"abcdefghi");
        let mut replay = f.clone();
        replay.round = 4;
        assert!(ch.open(&replay, FrameKind::Read).is_err());
        assert!(ch.open(&f, FrameKind::Msg).is_err());
    }

    #[test]
    fn message_framing() {
        let f = frame_message(b"hi").unwrap();
        assert_eq!(unframe_message(&f).unwrap(), b"hi");
        assert!(frame_message(&[0u8; MSG_LEN + 1]).is_err());
        assert_eq!(unframe_message(&frame_message(&[7u8; MSG_LEN]).unwrap()).unwrap().len(), MSG_LEN);
    }

    #[test]
    fn tcp_framing_round_trip() {
        let f = Frame::new(FrameKind::SubBatch, 9, vec![1, 2, 3]);
        let mut buf = Vec::new();
        write_frame(&mut buf, &f).unwrap();
        assert_eq!(read_frame(&mut &buf[..]).unwrap(), f);
    }

    /// Encoded length per kind is constant over 10^4 random packets.
    #[test]
    fn encoded_lengths_are_constant() {
        let mut r = rng();
        let ch = Channel::new(SymKey::random(&mut r));
        let kp = crate::crypto::ServiceKeyPair::generate(&mut r);
        let mut lens: std::collections::HashMap<FrameKind, std::collections::HashSet<usize>> =
            Default::default();
        for i in 0..10_000u64 {
            let round = r.gen();
            let mut vec = NotfVec::zero();
            if r.gen_bool(0.5) {
                vec.set(r.gen_range(0..512));
            }
            let tok = TokenPlain {
                vec,
                label: Label::random(&mut r),
            };
            let sealed = crate::crypto::seal(&tok.encode(), &kp.public(), &mut r);
            let notf = ch.seal(FrameKind::Notf, round, &encode_notf_plain(&sealed).unwrap(), &mut r);
            let msg = MsgPlain {
                token: RetrievalToken(r.gen()),
                dummy: r.gen(),
                sender: ClientId(r.gen()),
                ct: random_ct(&mut r),
            };
            let read = ReadPlain {
                token: RetrievalToken(r.gen()),
                dummy: r.gen(),
            };
            let resp = if i % 2 == 0 {
                ResponsePlain::not_found()
            } else {
                ResponsePlain {
                    found: true,
                    sender: ClientId(r.gen()),
                    ct: random_ct(&mut r),
                }
            };
            let hello = HelloPlain {
                session_key: SymKey::random(&mut r),
                label: Label::random(&mut r),
                client: ClientId(r.gen()),
            };
            let frames = [
                Frame::new(
                    FrameKind::Hello,
                    round,
                    crate::crypto::seal(&hello.encode(), &kp.public(), &mut r),
                ),
                ch.seal(FrameKind::Welcome, round, &round.to_be_bytes(), &mut r),
                notf,
                ch.seal(FrameKind::Digest, round, &encode_digest(&vec), &mut r),
                ch.seal(FrameKind::Msg, round, &msg.encode(), &mut r),
                ch.seal(FrameKind::Read, round, &read.encode(), &mut r),
                ch.seal(FrameKind::Response, round, &resp.encode(), &mut r),
            ];
            for f in frames {
                let bytes = f.encode();
                assert_eq!(Frame::decode(&bytes).unwrap(), f);
                lens.entry(f.kind).or_default().insert(bytes.len());
            }
        }
        assert_eq!(lens.len(), 7);
        for (kind, set) in lens {
            assert_eq!(set.len(), 1, "{kind:?} lengths vary: {set:?}");
        }
    }
}
