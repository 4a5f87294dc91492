//! Shared types, deployment parameters and wire formats.

mod config;
mod params;
pub mod wire;

use std::fmt;

use rand::{Rng, RngCore};

use crate::obliv::{Bit, Obl, OblOrd};

pub use config::{Config, ConfigError, NodeRole};
pub use params::{Params, ParamsError};

/// Maximum friend-list size supported by the fixed wire layout.
pub const MAX_FRIENDS_CAP: usize = 512;
pub const NOTF_WORDS: usize = MAX_FRIENDS_CAP / 64;
pub const NOTF_VEC_BYTES: usize = MAX_FRIENDS_CAP / 8;
pub const LABEL_BYTES: usize = 32;
/// Message bodies are padded to this many bytes on the wire.
pub const MSG_LEN: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClientId(pub u64);

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// 256-bit rendezvous label. The all-zero value is reserved: idle
/// notifications carry it and no registered client may own it.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label(pub [u64; 4]);

impl Label {
    pub const NULL: Label = Label([0; 4]);

    /// Uniform non-null label.
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Label {
        loop {
            let l = Label([rng.gen(), rng.gen(), rng.gen(), rng.gen()]);
            if !l.is_null() {
                return l;
            }
        }
    }

    pub fn is_null(&self) -> bool {
        self.0 == [0; 4]
    }

    pub fn to_bytes(&self) -> [u8; LABEL_BYTES] {
        let mut out = [0u8; LABEL_BYTES];
        for (i, w) in self.0.iter().enumerate() {
            out[i * 8..i * 8 + 8].copy_from_slice(&w.to_be_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8; LABEL_BYTES]) -> Label {
        let mut w = [0u64; 4];
        for (i, x) in w.iter_mut().enumerate() {
            *x = u64::from_be_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
        }
        Label(w)
    }
}

impl fmt::Debug for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Label({:016x}..)", self.0[0])
    }
}

impl Obl for Label {
    #[inline(always)]
    fn cmov(&mut self, src: &Self, flag: Bit) {
        self.0.cmov(&src.0, flag)
    }
    #[inline(always)]
    fn cswap(a: &mut Self, b: &mut Self, flag: Bit) {
        <[u64; 4]>::cswap(&mut a.0, &mut b.0, flag)
    }
    #[inline(always)]
    fn obl_eq(&self, other: &Self) -> Bit {
        self.0.obl_eq(&other.0)
    }
}

impl OblOrd for Label {
    #[inline(always)]
    fn obl_lt(&self, other: &Self) -> Bit {
        self.0.obl_lt(&other.0)
    }
    #[inline(always)]
    fn obl_key_eq(&self, other: &Self) -> Bit {
        self.0.obl_key_eq(&other.0)
    }
}

/// Notification bit-vector, one bit per friend slot.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct NotfVec(pub [u64; NOTF_WORDS]);

impl NotfVec {
    pub fn zero() -> NotfVec {
        NotfVec::default()
    }

    pub fn one_hot(idx: usize) -> NotfVec {
        let mut v = NotfVec::zero();
        v.set(idx);
        v
    }

    pub fn set(&mut self, idx: usize) {
        assert!(idx < MAX_FRIENDS_CAP, "friend index {idx} out of range");
        self.0[idx / 64] |= 1 << (idx % 64);
    }

    pub fn get(&self, idx: usize) -> bool {
        idx < MAX_FRIENDS_CAP && self.0[idx / 64] >> (idx % 64) & 1 == 1
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&w| w == 0)
    }

    pub fn count(&self) -> u32 {
        self.0.iter().map(|w| w.count_ones()).sum()
    }

    /// Set bit positions in ascending order.
    pub fn ones(&self) -> Vec<usize> {
        (0..MAX_FRIENDS_CAP).filter(|&i| self.get(i)).collect()
    }

    pub fn or(&self, other: &NotfVec) -> NotfVec {
        let mut out = *self;
        for (a, b) in out.0.iter_mut().zip(other.0.iter()) {
            *a |= *b;
        }
        out
    }

    pub fn to_bytes(&self) -> [u8; NOTF_VEC_BYTES] {
        let mut out = [0u8; NOTF_VEC_BYTES];
        for (i, w) in self.0.iter().enumerate() {
            out[i * 8..i * 8 + 8].copy_from_slice(&w.to_be_bytes());
        }
        out
    }

    pub fn from_bytes(b: &[u8; NOTF_VEC_BYTES]) -> NotfVec {
        let mut w = [0u64; NOTF_WORDS];
        for (i, x) in w.iter_mut().enumerate() {
            *x = u64::from_be_bytes(b[i * 8..i * 8 + 8].try_into().unwrap());
        }
        NotfVec(w)
    }
}

impl fmt::Debug for NotfVec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NotfVec{:?}", self.ones())
    }
}

impl Obl for NotfVec {
    #[inline(always)]
    fn cmov(&mut self, src: &Self, flag: Bit) {
        self.0.cmov(&src.0, flag)
    }
    #[inline(always)]
    fn cswap(a: &mut Self, b: &mut Self, flag: Bit) {
        <[u64; NOTF_WORDS]>::cswap(&mut a.0, &mut b.0, flag)
    }
    #[inline(always)]
    fn obl_eq(&self, other: &Self) -> Bit {
        self.0.obl_eq(&other.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn label_bytes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let l = Label::random(&mut rng);
            assert!(!l.is_null());
            assert_eq!(Label::from_bytes(&l.to_bytes()), l);
        }
    }

    #[test]
    fn label_order_matches_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let a = Label::random(&mut rng);
            let b = Label::random(&mut rng);
            assert_eq!(a.obl_lt(&b).declassify(), a.to_bytes() < b.to_bytes());
        }
    }

    #[test]
    fn notf_vec_bits() {
        let mut v = NotfVec::one_hot(7);
        v.set(2);
        v.set(511);
        assert_eq!(v.ones(), vec![2, 7, 511]);
        assert_eq!(v.count(), 3);
        assert_eq!(NotfVec::from_bytes(&v.to_bytes()), v);
        assert!(!v.get(512));
        assert_eq!(v.or(&NotfVec::one_hot(3)).ones(), vec![2, 3, 7, 511]);
    }
}
