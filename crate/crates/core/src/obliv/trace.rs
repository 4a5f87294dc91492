//! Access-trace recording.
//!
//! Every oblivious routine takes a `&mut impl Tracer`. Production callers pass
//! [`NoTrace`], which compiles to nothing. Tests pass an [`AccessTrace`] (full
//! event log) or an [`OpCounter`] (per-kind totals). Events carry positions
//! only, never data, so two runs over equal-shape inputs must produce
//! byte-identical traces.

use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum OpKind {
    CompareSwap = 0,
    ScanRead = 1,
    ScanWrite = 2,
    Choose = 3,
    Equal = 4,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::CompareSwap,
        OpKind::ScanRead,
        OpKind::ScanWrite,
        OpKind::Choose,
        OpKind::Equal,
    ];
}

/// Marker for a single-index event.
pub const NO_POS: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TraceEvent {
    pub kind: OpKind,
    pub a: u64,
    pub b: u64,
}

impl TraceEvent {
    pub fn to_bytes(&self) -> [u8; 17] {
        let mut out = [0u8; 17];
        out[0] = self.kind as u8;
        out[1..9].copy_from_slice(&self.a.to_be_bytes());
        out[9..17].copy_from_slice(&self.b.to_be_bytes());
        out
    }
}

pub trait Tracer {
    fn record(&mut self, kind: OpKind, a: usize, b: usize);

    #[inline(always)]
    fn one(&mut self, kind: OpKind, a: usize) {
        self.record(kind, a, usize::MAX);
    }

    #[inline(always)]
    fn pair(&mut self, kind: OpKind, a: usize, b: usize) {
        self.record(kind, a, b);
    }
}

impl<T: Tracer + ?Sized> Tracer for &mut T {
    #[inline(always)]
    fn record(&mut self, kind: OpKind, a: usize, b: usize) {
        (**self).record(kind, a, b)
    }
}

/// Zero-cost tracer used outside of tests.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoTrace;

impl Tracer for NoTrace {
    #[inline(always)]
    fn record(&mut self, _kind: OpKind, _a: usize, _b: usize) {}
}

/// Full ordered event log.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AccessTrace {
    events: Vec<TraceEvent>,
}

impl AccessTrace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> &[TraceEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn clear(&mut self) {
        self.events.clear();
    }

    /// Canonical serialization: 17 bytes per event.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.events.len() * 17);
        for e in &self.events {
            out.extend_from_slice(&e.to_bytes());
        }
        out
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for e in &self.events {
            h.update(e.to_bytes());
        }
        h.finalize().into()
    }

    pub fn count(&self, kind: OpKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

impl Tracer for AccessTrace {
    #[inline]
    fn record(&mut self, kind: OpKind, a: usize, b: usize) {
        let conv = |x: usize| if x == usize::MAX { NO_POS } else { x as u64 };
        self.events.push(TraceEvent {
            kind,
            a: conv(a),
            b: conv(b),
        });
    }
}

/// Per-kind event totals; the cheap way to measure oblivious work.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounter {
    counts: [u64; 5],
}

impl OpCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, kind: OpKind) -> u64 {
        self.counts[kind as usize]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn reset(&mut self) {
        self.counts = [0; 5];
    }
}

impl Tracer for OpCounter {
    #[inline(always)]
    fn record(&mut self, kind: OpKind, _a: usize, _b: usize) {
        self.counts[kind as usize] += 1;
    }
}

/// Streams events into SHA-256 without keeping them; for very long traces.
#[derive(Clone, Debug, Default)]
pub struct TraceDigest {
    hasher: Sha256,
    len: u64,
}

impl TraceDigest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn finish(self) -> ([u8; 32], u64) {
        (self.hasher.finalize().into(), self.len)
    }
}

impl Tracer for TraceDigest {
    #[inline]
    fn record(&mut self, kind: OpKind, a: usize, b: usize) {
        let conv = |x: usize| if x == usize::MAX { NO_POS } else { x as u64 };
        let ev = TraceEvent {
            kind,
            a: conv(a),
            b: conv(b),
        };
        self.hasher.update(ev.to_bytes());
        self.len += 1;
    }
}
