//! Backend node. Each entry keeps one connection open. The sub-batches an
//! operation receives for one round form one backend batch, released once
//! every entry has sent that round or moved past it.

use std::collections::BTreeMap;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{
    decode_sub, encode_sub, spawn_acceptor, spawn_metrics, sub_header, NetError, PongCounters, ServerHandle, Session,
    SubOp,
};
use crate::crypto::SymKey;
use crate::obliv::NoTrace;
use crate::ping::{backend_aggregate, AggPacket};
use crate::pong::{backend_read, backend_write, MergeMode, PongItem, PongService};
use crate::protocol::wire::{read_frame, Channel, Frame, FrameKind};
use crate::protocol::Params;

#[derive(Clone, Debug)]
pub enum BackendKind {
    Ping,
    Pong(Params),
}

#[derive(Clone)]
pub struct BackendConfig {
    pub listen: String,
    pub internal_key: SymKey,
    pub entries: usize,
    pub kind: BackendKind,
    pub metrics: Option<String>,
    pub seed: Option<u64>,
}

struct Queued {
    entry: u32,
    round: u64,
    body: Vec<u8>,
    reply: Arc<Session>,
}

struct State {
    entries: usize,
    pending: BTreeMap<(SubOp, u64), Vec<Option<Queued>>>,
    /// Latest round each entry has sent, per operation.
    latest: BTreeMap<SubOp, Vec<Option<u64>>>,
    pong: Option<PongService>,
    rng: ChaCha20Rng,
}

pub fn spawn_backend(cfg: BackendConfig) -> Result<ServerHandle, NetError> {
    if cfg.entries == 0 {
        return Err(NetError::Protocol("backend needs at least one entry".into()));
    }
    let listener = TcpListener::bind(&cfg.listen)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let batches = Arc::new(AtomicU64::new(0));
    let counters = Arc::new(PongCounters::default());
    let seed = cfg.seed.unwrap_or_else(rand::random);
    let state = Arc::new(Mutex::new(State {
        entries: cfg.entries,
        pending: BTreeMap::new(),
        latest: BTreeMap::new(),
        pong: match &cfg.kind {
            BackendKind::Ping => None,
            BackendKind::Pong(p) => Some(PongService::new(p, MergeMode::Background, seed)),
        },
        rng: ChaCha20Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
    }));
    let mut threads = Vec::new();
    {
        let (key, state, batches, counters) = (cfg.internal_key.clone(), state.clone(), batches.clone(), counters.clone());
        threads.push(spawn_acceptor(listener, stop.clone(), move |s| {
            serve_entry(s, &key, &state, &batches, &counters)
        })?);
    }
    if let Some(m) = &cfg.metrics {
        let c = counters.clone();
        let b = batches.clone();
        let (maddr, t) = spawn_metrics(m, stop.clone(), move || {
            format!("batches {}\n{}", b.load(Ordering::SeqCst), c.render())
        })?;
        log::info!("backend metrics on {maddr}");
        threads.push(t);
    }
    log::info!("backend listening on {addr}");
    Ok(ServerHandle {
        addr,
        stop,
        rounds: batches,
        threads,
    })
}

fn serve_entry(
    mut stream: TcpStream,
    key: &SymKey,
    state: &Mutex<State>,
    batches: &AtomicU64,
    counters: &PongCounters,
) {
    let Ok(out) = stream.try_clone() else { return };
    let session = Arc::new(Session {
        channel: Channel::new(key.clone()),
        out: Mutex::new(out),
    });
    loop {
        let Ok(frame) = read_frame(&mut stream) else { break };
        let body = match session.channel.open(&frame, FrameKind::SubBatch) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("entry link: {e}");
                let _ = session.send(&Frame::error(frame.round, "bad sub-batch"));
                break;
            }
        };
        let (op, entry, _) = match sub_header(&body) {
            Ok(h) => h,
            Err(e) => {
                log::warn!("entry link: {e}");
                break;
            }
        };
        let mut st = state.lock().unwrap();
        if entry as usize >= st.entries {
            drop(st);
            let _ = session.send(&Frame::error(frame.round, "unknown entry index"));
            break;
        }
        let (n, e, round) = (st.entries, entry as usize, frame.round);
        let latest = &mut st.latest.entry(op).or_insert_with(|| vec![None; n])[e];
        if latest.is_some_and(|l| l >= round) {
            drop(st);
            let _ = session.send(&Frame::error(round, "round already sent"));
            continue;
        }
        *latest = Some(round);
        st.pending.entry((op, round)).or_insert_with(|| (0..n).map(|_| None).collect())[e] = Some(Queued {
            entry,
            round,
            body,
            reply: session.clone(),
        });
        while let Some(batch) = pop_ready(&mut st, op) {
            if let Err(e) = process(&mut st, op, &batch, counters) {
                log::error!("backend batch failed: {e}");
                for q in &batch {
                    let _ = q.reply.send(&Frame::error(q.round, &e.to_string()));
                }
            }
            batches.fetch_add(1, Ordering::SeqCst);
        }
    }
}

fn pop_ready(st: &mut State, op: SubOp) -> Option<Vec<Queued>> {
    let (&key, slots) = st.pending.range((op, 0)..=(op, u64::MAX)).next()?;
    let latest = st.latest.get(&op)?;
    let ready = slots
        .iter()
        .zip(latest)
        .all(|(slot, l)| slot.is_some() || l.is_some_and(|l| l > key.1));
    if !ready {
        return None;
    }
    Some(st.pending.remove(&key)?.into_iter().flatten().collect())
}

fn process(st: &mut State, op: SubOp, batch: &[Queued], counters: &PongCounters) -> Result<(), NetError> {
    let State { pong, rng, .. } = st;
    let replies: Vec<Vec<u8>> = match (op, pong.as_mut()) {
        (SubOp::Aggregate, None) => {
            let subs = decode_all::<AggPacket>(batch)?;
            backend_aggregate(subs, rng, &mut NoTrace)
                .iter()
                .enumerate()
                .map(|(e, items)| encode_sub(op, batch[e].entry, items))
                .collect()
        }
        (SubOp::Write, Some(svc)) => {
            let subs = decode_all::<PongItem>(batch)?;
            if subs.iter().any(|s| !s.is_empty()) {
                backend_write(svc, subs, &mut NoTrace)?;
            }
            counters.absorb(svc.state());
            batch.iter().map(|q| encode_sub::<PongItem>(op, q.entry, &[])).collect()
        }
        (SubOp::Read, Some(svc)) => {
            let subs = decode_all::<PongItem>(batch)?;
            let out = backend_read(svc, subs, &mut NoTrace)?;
            counters.absorb(svc.state());
            out.iter()
                .enumerate()
                .map(|(e, items)| encode_sub(op, batch[e].entry, items))
                .collect()
        }
        _ => {
            return Err(NetError::Protocol(format!("{op:?} sent to the wrong kind of backend")));
        }
    };
    for (q, pt) in batch.iter().zip(replies) {
        let frame = q.reply.channel.seal(FrameKind::SubReply, q.round, &pt, rng);
        if let Err(e) = q.reply.send(&frame) {
            log::warn!("reply to entry: {e}");
        }
    }
    Ok(())
}

fn decode_all<T: super::WireItem>(batch: &[Queued]) -> Result<Vec<Vec<T>>, NetError> {
    batch
        .iter()
        .map(|q| Ok(decode_sub::<T>(&q.body)?.2))
        .collect()
}
