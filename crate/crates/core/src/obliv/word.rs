//! Branch-free word primitives.
//!
//! Selection is mask arithmetic on 64-bit words: `mask = 0 - flag`,
//! `out = b ^ (mask & (a ^ b))`. No routine here branches on a flag or on
//! operand values; loop bounds depend only on operand lengths.

use std::ops::{BitAnd, BitOr, BitXor, Not};

/// A secret boolean held in a machine word (0 or 1).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Bit(u64);

impl Bit {
    pub const ZERO: Bit = Bit(0);
    pub const ONE: Bit = Bit(1);

    #[inline(always)]
    pub fn from_bool(b: bool) -> Bit {
        Bit(b as u64)
    }

    /// Only the low bit is kept.
    #[inline(always)]
    pub fn from_word(w: u64) -> Bit {
        Bit(w & 1)
    }

    #[inline(always)]
    pub fn word(self) -> u64 {
        self.0
    }

    #[inline(always)]
    pub fn mask(self) -> u64 {
        self.0.wrapping_neg()
    }

    /// Reveal the bit. Callers must only do this for values that are public.
    #[inline(always)]
    pub fn declassify(self) -> bool {
        self.0 == 1
    }
}

impl Not for Bit {
    type Output = Bit;
    #[inline(always)]
    fn not(self) -> Bit {
        Bit(self.0 ^ 1)
    }
}

impl BitAnd for Bit {
    type Output = Bit;
    #[inline(always)]
    fn bitand(self, rhs: Bit) -> Bit {
        Bit(self.0 & rhs.0)
    }
}

impl BitOr for Bit {
    type Output = Bit;
    #[inline(always)]
    fn bitor(self, rhs: Bit) -> Bit {
        Bit(self.0 | rhs.0)
    }
}

impl BitXor for Bit {
    type Output = Bit;
    #[inline(always)]
    fn bitxor(self, rhs: Bit) -> Bit {
        Bit(self.0 ^ rhs.0)
    }
}

/// `a` if `flag` else `b`.
#[inline(always)]
pub fn choose_word(flag: Bit, a: u64, b: u64) -> u64 {
    b ^ (flag.mask() & (a ^ b))
}

#[inline(always)]
pub fn eq_word(a: u64, b: u64) -> Bit {
    let d = a ^ b;
    // high bit of (d | -d) is set iff d != 0
    Bit(((d | d.wrapping_neg()) >> 63) ^ 1)
}

#[inline(always)]
pub fn lt_word(a: u64, b: u64) -> Bit {
    // borrow out of a - b
    Bit((((!a) & b) | (((!a) | b) & a.wrapping_sub(b))) >> 63)
}

#[inline(always)]
pub fn gt_word(a: u64, b: u64) -> Bit {
    lt_word(b, a)
}

#[inline(always)]
pub fn ge_word(a: u64, b: u64) -> Bit {
    !lt_word(a, b)
}

/// Oblivious choose over equal-length word sequences.
///
/// Panics on a length mismatch (caller bug; lengths are public).
pub fn obl_choose(flag: Bit, a: &[u64], b: &[u64]) -> Vec<u64> {
    assert_eq!(a.len(), b.len(), "obl_choose: operand lengths differ");
    a.iter().zip(b).map(|(&x, &y)| choose_word(flag, x, y)).collect()
}

/// 1 iff the two sequences are equal. Touches every word.
pub fn obl_equal(a: &[u64], b: &[u64]) -> Bit {
    assert_eq!(a.len(), b.len(), "obl_equal: operand lengths differ");
    let mut acc = 0u64;
    for (&x, &y) in a.iter().zip(b) {
        acc |= x ^ y;
    }
    eq_word(acc, 0)
}

/// Values that can be conditionally moved and swapped without branching.
pub trait Obl: Sized {
    /// `*self = src` if `flag`, otherwise unchanged.
    fn cmov(&mut self, src: &Self, flag: Bit);

    /// Swap `a` and `b` if `flag`.
    fn cswap(a: &mut Self, b: &mut Self, flag: Bit);

    /// Equality over the full representation.
    fn obl_eq(&self, other: &Self) -> Bit;
}

/// `a` if `flag` else `b`, for any [`Obl`] value.
#[inline]
pub fn select<T: Obl + Clone>(flag: Bit, a: &T, b: &T) -> T {
    let mut out = b.clone();
    out.cmov(a, flag);
    out
}

macro_rules! obl_uint {
    ($($t:ty),*) => {$(
        impl Obl for $t {
            #[inline(always)]
            fn cmov(&mut self, src: &Self, flag: Bit) {
                let m = flag.mask() as $t;
                *self ^= m & (*self ^ *src);
            }
            #[inline(always)]
            fn cswap(a: &mut Self, b: &mut Self, flag: Bit) {
                let m = flag.mask() as $t;
                let t = m & (*a ^ *b);
                *a ^= t;
                *b ^= t;
            }
            #[inline(always)]
            fn obl_eq(&self, other: &Self) -> Bit {
                eq_word((*self ^ *other) as u64, 0)
            }
        }
    )*};
}

obl_uint!(u8, u16, u32, u64, usize);

impl Obl for u128 {
    #[inline(always)]
    fn cmov(&mut self, src: &Self, flag: Bit) {
        let m = (flag.mask() as u128) | ((flag.mask() as u128) << 64);
        *self ^= m & (*self ^ *src);
    }
    #[inline(always)]
    fn cswap(a: &mut Self, b: &mut Self, flag: Bit) {
        let m = (flag.mask() as u128) | ((flag.mask() as u128) << 64);
        let t = m & (*a ^ *b);
        *a ^= t;
        *b ^= t;
    }
    #[inline(always)]
    fn obl_eq(&self, other: &Self) -> Bit {
        let d = *self ^ *other;
        eq_word((d as u64) | ((d >> 64) as u64), 0)
    }
}

impl Obl for Bit {
    #[inline(always)]
    fn cmov(&mut self, src: &Self, flag: Bit) {
        self.0.cmov(&src.0, flag)
    }
    #[inline(always)]
    fn cswap(a: &mut Self, b: &mut Self, flag: Bit) {
        u64::cswap(&mut a.0, &mut b.0, flag)
    }
    #[inline(always)]
    fn obl_eq(&self, other: &Self) -> Bit {
        eq_word(self.0, other.0)
    }
}

impl Obl for () {
    #[inline(always)]
    fn cmov(&mut self, _src: &Self, _flag: Bit) {}
    #[inline(always)]
    fn cswap(_a: &mut Self, _b: &mut Self, _flag: Bit) {}
    #[inline(always)]
    fn obl_eq(&self, _other: &Self) -> Bit {
        Bit::ONE
    }
}

impl<T: Obl, const N: usize> Obl for [T; N] {
    #[inline]
    fn cmov(&mut self, src: &Self, flag: Bit) {
        for (d, s) in self.iter_mut().zip(src) {
            d.cmov(s, flag);
        }
    }
    #[inline]
    fn cswap(a: &mut Self, b: &mut Self, flag: Bit) {
        for (x, y) in a.iter_mut().zip(b.iter_mut()) {
            T::cswap(x, y, flag);
        }
    }
    #[inline]
    fn obl_eq(&self, other: &Self) -> Bit {
        let mut acc = Bit::ONE;
        for (x, y) in self.iter().zip(other) {
            acc = acc & x.obl_eq(y);
        }
        acc
    }
}

/// Vectors must have equal (public) lengths.
impl<T: Obl> Obl for Vec<T> {
    fn cmov(&mut self, src: &Self, flag: Bit) {
        assert_eq!(self.len(), src.len(), "cmov: length mismatch");
        for (d, s) in self.iter_mut().zip(src) {
            d.cmov(s, flag);
        }
    }
    fn cswap(a: &mut Self, b: &mut Self, flag: Bit) {
        assert_eq!(a.len(), b.len(), "cswap: length mismatch");
        for (x, y) in a.iter_mut().zip(b.iter_mut()) {
            T::cswap(x, y, flag);
        }
    }
    fn obl_eq(&self, other: &Self) -> Bit {
        assert_eq!(self.len(), other.len(), "obl_eq: length mismatch");
        let mut acc = Bit::ONE;
        for (x, y) in self.iter().zip(other) {
            acc = acc & x.obl_eq(y);
        }
        acc
    }
}

impl<A: Obl, B: Obl> Obl for (A, B) {
    #[inline]
    fn cmov(&mut self, src: &Self, flag: Bit) {
        self.0.cmov(&src.0, flag);
        self.1.cmov(&src.1, flag);
    }
    #[inline]
    fn cswap(a: &mut Self, b: &mut Self, flag: Bit) {
        A::cswap(&mut a.0, &mut b.0, flag);
        B::cswap(&mut a.1, &mut b.1, flag);
    }
    #[inline]
    fn obl_eq(&self, other: &Self) -> Bit {
        self.0.obl_eq(&other.0) & self.1.obl_eq(&other.1)
    }
}

/// Keys with a branch-free strict ordering.
pub trait OblOrd {
    fn obl_lt(&self, other: &Self) -> Bit;
    fn obl_key_eq(&self, other: &Self) -> Bit;
}

impl OblOrd for u64 {
    #[inline(always)]
    fn obl_lt(&self, other: &Self) -> Bit {
        lt_word(*self, *other)
    }
    #[inline(always)]
    fn obl_key_eq(&self, other: &Self) -> Bit {
        eq_word(*self, *other)
    }
}

impl OblOrd for u128 {
    #[inline(always)]
    fn obl_lt(&self, other: &Self) -> Bit {
        let (ah, al) = ((*self >> 64) as u64, *self as u64);
        let (bh, bl) = ((*other >> 64) as u64, *other as u64);
        lt_word(ah, bh) | (eq_word(ah, bh) & lt_word(al, bl))
    }
    #[inline(always)]
    fn obl_key_eq(&self, other: &Self) -> Bit {
        self.obl_eq(other)
    }
}

/// Lexicographic, most significant word first.
impl<const N: usize> OblOrd for [u64; N] {
    #[inline]
    fn obl_lt(&self, other: &Self) -> Bit {
        let mut lt = Bit::ZERO;
        let mut eq = Bit::ONE;
        for i in 0..N {
            lt = lt | (eq & lt_word(self[i], other[i]));
            eq = eq & eq_word(self[i], other[i]);
        }
        lt
    }
    #[inline]
    fn obl_key_eq(&self, other: &Self) -> Bit {
        self.obl_eq(other)
    }
}

impl<A: OblOrd, B: OblOrd> OblOrd for (A, B) {
    #[inline]
    fn obl_lt(&self, other: &Self) -> Bit {
        self.0.obl_lt(&other.0) | (self.0.obl_key_eq(&other.0) & self.1.obl_lt(&other.1))
    }
    #[inline]
    fn obl_key_eq(&self, other: &Self) -> Bit {
        self.0.obl_key_eq(&other.0) & self.1.obl_key_eq(&other.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn choose_examples() {
        assert_eq!(obl_choose(Bit::ONE, &[7], &[9]), vec![7]);
        assert_eq!(obl_choose(Bit::ZERO, &[7], &[9]), vec![9]);
        let x = [1, 2, 3];
        assert_eq!(obl_choose(Bit::ONE, &x, &x), x.to_vec());
        assert_eq!(obl_choose(Bit::ZERO, &x, &x), x.to_vec());
    }

    #[test]
    fn equal_examples() {
        assert_eq!(obl_equal(&[3, 3], &[3, 3]), Bit::ONE);
        assert_eq!(obl_equal(&[3, 3], &[3, 4]), Bit::ZERO);
        assert_eq!(obl_equal(&[], &[]), Bit::ONE);
    }

    #[test]
    #[should_panic(expected = "lengths differ")]
    fn choose_length_mismatch_panics() {
        obl_choose(Bit::ONE, &[1, 2], &[1]);
    }

    #[test]
    fn equal_on_random_self_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let len = rng.gen_range(0..8);
            let x: Vec<u64> = (0..len).map(|_| rng.gen()).collect();
            assert_eq!(obl_equal(&x, &x), Bit::ONE);
        }
    }

    #[test]
    fn lexicographic_order() {
        assert!([1u64, 5].obl_lt(&[2, 0]).declassify());
        assert!(![2u64, 0].obl_lt(&[1, 5]).declassify());
        assert!([1u64, 4].obl_lt(&[1, 5]).declassify());
        assert!(![1u64, 5].obl_lt(&[1, 5]).declassify());
    }

    proptest! {
        #[test]
        fn word_comparisons_match_native(a: u64, b: u64) {
            prop_assert_eq!(lt_word(a, b).declassify(), a < b);
            prop_assert_eq!(eq_word(a, b).declassify(), a == b);
            prop_assert_eq!(ge_word(a, b).declassify(), a >= b);
        }

        #[test]
        fn choose_word_matches_branch(f: bool, a: u64, b: u64) {
            prop_assert_eq!(choose_word(Bit::from_bool(f), a, b), if f { a } else { b });
        }

        #[test]
        fn cswap_swaps_iff_flag(f: bool, a: [u64; 3], b: [u64; 3]) {
            let (mut x, mut y) = (a, b);
            <[u64; 3]>::cswap(&mut x, &mut y, Bit::from_bool(f));
            if f { prop_assert_eq!((x, y), (b, a)); } else { prop_assert_eq!((x, y), (a, b)); }
        }

        #[test]
        fn u128_order_matches_native(a: u128, b: u128) {
            prop_assert_eq!(a.obl_lt(&b).declassify(), a < b);
        }
    }
}
