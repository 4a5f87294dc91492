//! Data-oblivious primitives: branch-free choose/equal, bitonic sort and
//! order-preserving compaction, all instrumented with an access-trace hook.

mod compact;
mod sort;
mod trace;
mod word;

pub use compact::{ocompact, ocompact_by};
pub use sort::{osort, osort_keys};
pub use trace::{AccessTrace, NoTrace, OpCounter, OpKind, TraceDigest, TraceEvent, Tracer, NO_POS};
pub use word::{
    choose_word, eq_word, ge_word, gt_word, lt_word, obl_choose, obl_equal, select, Bit, Obl,
    OblOrd,
};

/// Implements [`Obl`] for a struct field by field.
///
/// ```
/// use pingpong::obl_struct;
/// #[derive(Default)]
/// struct Rec { key: u64, val: [u64; 2] }
/// obl_struct!(Rec { key, val });
/// ```
#[macro_export]
macro_rules! obl_struct {
    ($t:ty { $($f:ident),+ $(,)? }) => {
        impl $crate::obliv::Obl for $t {
            #[inline(always)]
            fn cmov(&mut self, src: &Self, flag: $crate::obliv::Bit) {
                $( $crate::obliv::Obl::cmov(&mut self.$f, &src.$f, flag); )+
            }
            #[inline(always)]
            fn cswap(a: &mut Self, b: &mut Self, flag: $crate::obliv::Bit) {
                $( $crate::obliv::Obl::cswap(&mut a.$f, &mut b.$f, flag); )+
            }
            #[inline(always)]
            fn obl_eq(&self, other: &Self) -> $crate::obliv::Bit {
                let mut eq = $crate::obliv::Bit::ONE;
                $( eq = eq & $crate::obliv::Obl::obl_eq(&self.$f, &other.$f); )+
                eq
            }
        }
    };
}
