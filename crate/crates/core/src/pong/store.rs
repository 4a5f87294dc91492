//! Hierarchical message store: OBin buffer, OMT list, stash and merges.
//!
//! A group of `k` write batches first lives as `k-1` temporary OBins (one per
//! batch), then as one consolidated OBin built over all `k`. Raw copies of
//! each completed group sit in the stash; once `m` groups are stashed they
//! are merged into one OMT and their OBins leave the buffer. Reads scan every
//! OBin and then every OMT.

use std::collections::VecDeque;
use std::sync::Arc;
use std::thread::JoinHandle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use super::oht::{Oht, OhtError};
use crate::obliv::{choose_word, Bit, NoTrace, Obl, OpKind, Tracer};
use crate::protocol::Params;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MergeMode {
    /// Merge runs to completion inside the triggering write.
    Inline,
    /// Merge waits in [`PongState::pending_merge`] until the caller runs it.
    Manual,
    /// Merge runs on a worker thread and commits when the next operation
    /// finds it finished.
    Background,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StoreConfig {
    pub k: usize,
    pub m: usize,
    pub n_batches: usize,
    pub z: usize,
    pub epsilon: f64,
    pub merge: MergeMode,
}

impl StoreConfig {
    pub fn from_params(p: &Params, merge: MergeMode) -> StoreConfig {
        StoreConfig {
            k: p.k,
            m: p.m,
            n_batches: p.n_batches,
            z: p.z,
            epsilon: p.epsilon_oht,
            merge,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct StoreMetrics {
    pub writes: u64,
    pub reads: u64,
    pub lookups: u64,
    pub merges: u64,
    pub rebuilds: u64,
    pub expired_batches: u64,
}

/// One entry of a write batch. Dummy entries are stored under a fresh random
/// key so the batch size never depends on which entries are real.
#[derive(Clone, Debug)]
pub struct WriteEntry<V> {
    pub token: u64,
    pub dummy: Bit,
    pub value: V,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Temp,
    Consolidated,
}

struct OBin<V> {
    id: u64,
    kind: BinKind,
    batches: usize,
    table: Arc<Oht<V>>,
}

struct Omt<V> {
    batches: usize,
    table: Arc<Oht<V>>,
}

struct StashGroup<V> {
    bin_id: u64,
    entries: Vec<(u64, V)>,
}

/// Background merge input: raw stash copies of `m` groups.
pub struct MergeJob<V> {
    entries: Vec<(u64, V)>,
    bin_ids: Vec<u64>,
    batches: usize,
    z: usize,
    epsilon: f64,
    seed: [u8; 32],
}

pub struct MergeResult<V> {
    table: Oht<V>,
    bin_ids: Vec<u64>,
    batches: usize,
}

impl<V: Obl + Default + Clone> MergeJob<V> {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn run<R: Tracer + ?Sized>(self, tracer: &mut R) -> Result<MergeResult<V>, OhtError> {
        let mut rng = ChaCha20Rng::from_seed(self.seed);
        let table = Oht::build(self.entries, self.z, self.epsilon, &mut rng, tracer)?;
        Ok(MergeResult {
            table,
            bin_ids: self.bin_ids,
            batches: self.batches,
        })
    }
}

enum Pending<V> {
    Waiting(MergeJob<V>),
    Running(JoinHandle<Result<MergeResult<V>, OhtError>>),
}

pub struct PongState<V> {
    cfg: StoreConfig,
    rng: ChaCha20Rng,
    buf: Vec<OBin<V>>,
    omts: VecDeque<Omt<V>>,
    stash: VecDeque<StashGroup<V>>,
    temp_stash: Vec<Vec<(u64, V)>>,
    temp_bin: usize,
    pending: Option<Pending<V>>,
    next_id: u64,
    metrics: StoreMetrics,
}

impl<V> PongState<V>
where
    V: Obl + Default + Clone + Send + Sync + 'static,
{
    pub fn new(cfg: StoreConfig, seed: u64) -> PongState<V> {
        assert!(cfg.k > 0 && cfg.m > 0, "k and m must be positive");
        PongState {
            cfg,
            rng: ChaCha20Rng::seed_from_u64(seed),
            buf: Vec::new(),
            omts: VecDeque::new(),
            stash: VecDeque::new(),
            temp_stash: Vec::new(),
            temp_bin: 0,
            pending: None,
            next_id: 0,
            metrics: StoreMetrics::default(),
        }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.cfg
    }

    pub fn metrics(&self) -> StoreMetrics {
        self.metrics
    }

    /// |Buf|: OBins currently scanned by reads.
    pub fn bins(&self) -> usize {
        self.buf.len()
    }

    /// |T|: OMTs currently scanned by reads.
    pub fn tables(&self) -> usize {
        self.omts.len()
    }

    /// Lookups a read request performs right now.
    pub fn lookups_per_read(&self) -> usize {
        self.buf.len() + self.omts.len()
    }

    /// Stashed groups not yet handed to a merge.
    pub fn stash_groups(&self) -> usize {
        self.stash.len()
    }

    pub fn temp_bin(&self) -> usize {
        self.temp_bin
    }

    pub fn temp_bins(&self) -> usize {
        self.buf.iter().filter(|b| b.kind == BinKind::Temp).count()
    }

    pub fn merge_pending(&self) -> bool {
        self.pending.is_some()
    }

    pub fn stored_batches(&self) -> usize {
        self.buf.iter().map(|b| b.batches).sum::<usize>()
            + self.omts.iter().map(|t| t.batches).sum::<usize>()
    }

    /// Public shape of the store: sizes of the bins and tables a read scans.
    pub fn shape(&self) -> Vec<(BinKind, usize)> {
        self.buf.iter().map(|b| (b.kind, b.table.len())).collect()
    }

    pub fn omt_sizes(&self) -> Vec<usize> {
        self.omts.iter().map(|t| t.table.len()).collect()
    }

    /// Writes one batch. Foreground work is one OHT build over this batch, or
    /// over the whole group when it completes; merges are traced separately.
    pub fn obl_write<R: Tracer + ?Sized>(
        &mut self,
        batch: Vec<WriteEntry<V>>,
        tracer: &mut R,
    ) -> Result<(), OhtError> {
        self.poll_merge()?;
        let mut raw = Vec::with_capacity(batch.len());
        for (i, e) in batch.into_iter().enumerate() {
            tracer.one(OpKind::Choose, i);
            let noise = self.rng.gen();
            raw.push((choose_word(e.dummy, noise, e.token), e.value));
        }

        let id = self.next_id;
        self.next_id += 1;
        if self.temp_bin + 1 < self.cfg.k {
            let table = self.build(raw.clone(), tracer)?;
            self.buf.push(OBin {
                id,
                kind: BinKind::Temp,
                batches: 1,
                table: Arc::new(table),
            });
            self.temp_stash.push(raw);
            self.temp_bin += 1;
        } else {
            self.buf.retain(|b| b.kind != BinKind::Temp);
            let mut all: Vec<(u64, V)> = self.temp_stash.drain(..).flatten().collect();
            all.extend(raw);
            let table = self.build(all.clone(), tracer)?;
            self.buf.push(OBin {
                id,
                kind: BinKind::Consolidated,
                batches: self.cfg.k,
                table: Arc::new(table),
            });
            self.stash.push_back(StashGroup {
                bin_id: id,
                entries: all,
            });
            self.temp_bin = 0;
        }
        self.metrics.writes += 1;

        if self.stash.len() >= self.cfg.m {
            self.trigger_merge()?;
        }
        self.expire()
    }

    /// Answers a batch of requests. Each request looks up every OBin, then
    /// every OMT; after a hit (or for a dummy request) the remaining lookups
    /// are dummy accesses.
    pub fn obl_read<R: Tracer + ?Sized>(
        &mut self,
        requests: &[(u64, Bit)],
        tracer: &mut R,
    ) -> Result<Vec<(Bit, V)>, OhtError> {
        self.poll_merge()?;
        let tables: Vec<Arc<Oht<V>>> = self
            .buf
            .iter()
            .map(|b| b.table.clone())
            .chain(self.omts.iter().map(|t| t.table.clone()))
            .collect();
        let mut out = Vec::with_capacity(requests.len());
        for (i, &(key, dummy)) in requests.iter().enumerate() {
            let mut found = Bit::ZERO;
            let mut value = V::default();
            for (t, table) in tables.iter().enumerate() {
                tracer.pair(OpKind::ScanRead, i, t);
                let (hit, v) = table.lookup(key, found | dummy, self.rng.gen(), tracer);
                value.cmov(&v, hit);
                found = found | hit;
            }
            out.push((found, value));
        }
        self.metrics.reads += requests.len() as u64;
        self.metrics.lookups += (requests.len() * tables.len()) as u64;
        Ok(out)
    }

    /// Takes a waiting merge job (manual mode) so the caller can run it,
    /// possibly on another thread, and later [`commit_merge`](Self::commit_merge).
    pub fn take_merge_job(&mut self) -> Option<MergeJob<V>> {
        match self.pending.take() {
            Some(Pending::Waiting(job)) => Some(job),
            other => {
                self.pending = other;
                None
            }
        }
    }

    /// Installs a finished merge: the OMT joins T and its source OBins leave Buf.
    pub fn commit_merge(&mut self, result: MergeResult<V>) {
        self.metrics.rebuilds += result.table.rebuilds() as u64;
        self.metrics.merges += 1;
        self.buf.retain(|b| !result.bin_ids.contains(&b.id));
        self.omts.push_back(Omt {
            batches: result.batches,
            table: Arc::new(result.table),
        });
    }

    /// Runs and commits any pending merge now.
    pub fn finish_merge(&mut self) -> Result<(), OhtError> {
        let result = match self.pending.take() {
            None => return Ok(()),
            Some(Pending::Waiting(job)) => job.run(&mut NoTrace)?,
            Some(Pending::Running(h)) => h.join().expect("merge thread panicked")?,
        };
        self.commit_merge(result);
        Ok(())
    }

    fn poll_merge(&mut self) -> Result<(), OhtError> {
        if let Some(Pending::Running(h)) = &self.pending {
            if h.is_finished() {
                self.finish_merge()?;
            }
        }
        Ok(())
    }

    fn build<R: Tracer + ?Sized>(
        &mut self,
        entries: Vec<(u64, V)>,
        tracer: &mut R,
    ) -> Result<Oht<V>, OhtError> {
        let t = Oht::build(entries, self.cfg.z, self.cfg.epsilon, &mut self.rng, tracer)?;
        self.metrics.rebuilds += t.rebuilds() as u64;
        Ok(t)
    }

    fn trigger_merge(&mut self) -> Result<(), OhtError> {
        // a merge still running at the next trigger must land first
        self.finish_merge()?;
        let groups: Vec<StashGroup<V>> = self.stash.drain(..self.cfg.m).collect();
        let bin_ids = groups.iter().map(|g| g.bin_id).collect();
        let entries = groups.into_iter().flat_map(|g| g.entries).collect();
        let job = MergeJob {
            entries,
            bin_ids,
            batches: self.cfg.m * self.cfg.k,
            z: self.cfg.z,
            epsilon: self.cfg.epsilon,
            seed: self.rng.gen(),
        };
        match self.cfg.merge {
            MergeMode::Inline => {
                let result = job.run(&mut NoTrace)?;
                self.commit_merge(result);
            }
            MergeMode::Manual => self.pending = Some(Pending::Waiting(job)),
            MergeMode::Background => {
                self.pending = Some(Pending::Running(std::thread::spawn(move || {
                    job.run(&mut NoTrace)
                })))
            }
        }
        Ok(())
    }

    /// Drops the oldest containers until at most N batches remain. The
    /// schedule depends only on batch counts.
    fn expire(&mut self) -> Result<(), OhtError> {
        while self.stored_batches() > self.cfg.n_batches {
            if let Some(t) = self.omts.pop_front() {
                self.metrics.expired_batches += t.batches as u64;
            } else if self.pending.is_some() {
                self.finish_merge()?;
            } else if let Some(pos) = self.buf.iter().position(|b| b.kind == BinKind::Consolidated) {
                let bin = self.buf.remove(pos);
                self.stash.retain(|g| g.bin_id != bin.id);
                self.metrics.expired_batches += bin.batches as u64;
            } else {
                break;
            }
        }
        Ok(())
    }
}
