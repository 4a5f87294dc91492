//! Pong over TCP. Requests are filed by round number. Rounds are processed
//! strictly in order: write round `r` closes once every connected client has
//! sent its message packet or half a round after `r` ends on the wall clock;
//! read round `r` closes after write round `r`, once every client has asked
//! or half a round after the digests of `r` went out.

use std::collections::BTreeMap;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{
    accept_hello, spawn_acceptor, spawn_metrics, unix_ms, wall_round, BackendLinks, FrontRole, NetError, PongCounters, RoundInbox,
    ServerHandle, Session, Sessions, SubOp, POLL,
};
use crate::crypto::{RetrievalToken, ServiceKeyPair};
use crate::obliv::NoTrace;
use crate::pong::{MergeMode, PongEntry, PongItem, PongService};
use crate::protocol::wire::{read_frame, write_frame, Channel, Frame, FrameKind, MsgPlain, ReadPlain, MSG_CT_LEN};
use crate::protocol::{ClientId, Params};

#[derive(Clone)]
pub struct PongServerConfig {
    pub listen: String,
    pub keys: ServiceKeyPair,
    pub params: Params,
    pub role: FrontRole,
    /// Stop after this many write rounds.
    pub max_rounds: Option<u64>,
    pub metrics: Option<String>,
    pub connect_patience: Duration,
    pub seed: Option<u64>,
}

impl PongServerConfig {
    pub fn new(listen: &str, keys: ServiceKeyPair, params: Params) -> PongServerConfig {
        PongServerConfig {
            listen: listen.into(),
            keys,
            params,
            role: FrontRole::Single,
            max_rounds: None,
            metrics: None,
            connect_patience: Duration::from_secs(30),
            seed: None,
        }
    }
}

struct Shared {
    sessions: Sessions,
    writes: RoundInbox<MsgPlain>,
    reads: RoundInbox<ReadPlain>,
    /// Next write and read rounds to close.
    open_w: u64,
    open_r: u64,
}

enum Store {
    Single(Box<PongService>),
    Entry {
        entry: PongEntry,
        links: BackendLinks,
    },
}

pub fn spawn_pong_server(cfg: PongServerConfig) -> Result<ServerHandle, NetError> {
    cfg.params
        .validate()
        .map_err(|e| NetError::Protocol(e.to_string()))?;
    let listener = TcpListener::bind(&cfg.listen)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let rounds = Arc::new(AtomicU64::new(0));
    let counters = Arc::new(PongCounters::default());
    let seed = cfg.seed.unwrap_or_else(rand::random);
    let store = match &cfg.role {
        FrontRole::Single => Store::Single(Box::new(PongService::new(&cfg.params, MergeMode::Background, seed))),
        FrontRole::Entry { index, backends } => Store::Entry {
            entry: PongEntry::new(backends.len(), cfg.params.lambda),
            links: BackendLinks::connect(*index, cfg.keys.internal_key(), backends, cfg.connect_patience)?,
        },
    };
    let shared = Arc::new(Mutex::new(Shared {
        sessions: Sessions::new(),
        writes: RoundInbox::default(),
        reads: RoundInbox::default(),
        open_w: wall_round(cfg.params.round_ms),
        open_r: wall_round(cfg.params.round_ms),
    }));

    let mut threads = Vec::new();
    {
        let (keys, shared) = (cfg.keys.clone(), shared.clone());
        threads.push(spawn_acceptor(listener, stop.clone(), move |s| serve_client(s, &keys, &shared))?);
    }
    if let Some(m) = &cfg.metrics {
        let c = counters.clone();
        let (maddr, t) = spawn_metrics(m, stop.clone(), move || c.render())?;
        log::info!("pong metrics on {maddr}");
        threads.push(t);
    }
    {
        let (stop, rounds) = (stop.clone(), rounds.clone());
        threads.push(thread::spawn(move || {
            let mut worker = Worker {
                cfg: &cfg,
                store,
                shared: &shared,
                counters: &counters,
                rng: ChaCha20Rng::seed_from_u64(seed.rotate_left(17)),
                forwarded: (0, 0),
            };
            if let Err(e) = worker.run(&stop, &rounds) {
                log::error!("pong round failed: {e}");
            }
            stop.store(true, Ordering::SeqCst);
        }));
    }
    log::info!("pong listening on {addr}");
    Ok(ServerHandle {
        addr,
        stop,
        rounds,
        threads,
    })
}

fn serve_client(mut stream: TcpStream, keys: &ServiceKeyPair, shared: &Mutex<Shared>) {
    let hello = match accept_hello(&mut stream, keys) {
        Ok(h) => h,
        Err(e) => {
            log::warn!("rejected hello: {e}");
            let _ = write_frame(&mut stream, &Frame::error(0, "bad hello"));
            return;
        }
    };
    let Ok(out) = stream.try_clone() else { return };
    let session = Arc::new(Session {
        channel: Channel::new(hello.session_key.clone()),
        out: Mutex::new(out),
    });
    let client = hello.client;
    {
        let mut sh = shared.lock().unwrap();
        if sh.sessions.contains_key(&client) {
            drop(sh);
            let _ = session.send(&Frame::error(0, "client already connected"));
            return;
        }
        sh.sessions.insert(client, session.clone());
        let open = sh.open_w;
        let welcome = session
            .channel
            .seal(FrameKind::Welcome, open, &open.to_be_bytes(), &mut rand::thread_rng());
        if session.send(&welcome).is_err() {
            sh.sessions.remove(&client);
            return;
        }
    }
    loop {
        let Ok(frame) = read_frame(&mut stream) else { break };
        let kind = frame.kind;
        let body = match session.channel.open(&frame, kind) {
            Ok(b) if matches!(kind, FrameKind::Msg | FrameKind::Read) => b,
            Ok(_) => {
                log::warn!("client {client}: unexpected {kind:?}");
                break;
            }
            Err(e) => {
                log::warn!("client {client}: {e}");
                break;
            }
        };
        let mut sh = shared.lock().unwrap();
        let open = if kind == FrameKind::Msg { sh.open_w } else { sh.open_r };
        if frame.round + 1 < open {
            drop(sh);
            log::warn!("client {client}: stale {kind:?} for round {} (open {open})", frame.round);
            let _ = session.send(&Frame::error(frame.round, &format!("stale {kind:?}")));
            continue;
        }
        let filed = if kind == FrameKind::Msg {
            match MsgPlain::decode(&body) {
                Ok(mut m) => {
                    // the sender field is the session's, whatever the packet says
                    m.sender = client;
                    Some(sh.writes.insert(client, frame.round, open, m))
                }
                Err(_) => None,
            }
        } else {
            ReadPlain::decode(&body)
                .ok()
                .map(|r| sh.reads.insert(client, frame.round, open, r))
        };
        if filed.is_none() {
            log::warn!("client {client}: malformed {kind:?}");
        }
    }
    let mut sh = shared.lock().unwrap();
    sh.sessions.remove(&client);
    sh.writes.forget(client);
    sh.reads.forget(client);
}

struct Worker<'a> {
    cfg: &'a PongServerConfig,
    store: Store,
    shared: &'a Mutex<Shared>,
    counters: &'a PongCounters,
    rng: ChaCha20Rng,
    /// Entry only: (write batches, read requests) forwarded.
    forwarded: (u64, u64),
}

struct Job<T> {
    round: u64,
    /// Requests by client, with the connected clients that sent nothing
    /// filled in server-side.
    batch: BTreeMap<ClientId, (T, bool)>,
    sessions: Sessions,
}

impl Worker<'_> {
    fn run(&mut self, stop: &AtomicBool, rounds: &AtomicU64) -> Result<(), NetError> {
        while !stop.load(Ordering::SeqCst) {
            let mut busy = false;
            if let Some(job) = self.next_write() {
                self.write(job)?;
                let done = rounds.fetch_add(1, Ordering::SeqCst) + 1;
                if self.cfg.max_rounds.is_some_and(|m| done >= m) {
                    return Ok(());
                }
                busy = true;
            }
            if let Some(job) = self.next_read() {
                self.read(job)?;
                busy = true;
            }
            if !busy {
                thread::sleep(POLL);
            }
        }
        Ok(())
    }

    /// Wall-clock ms at which round `r` closes without stragglers.
    fn deadline(&self, r: u64) -> u64 {
        let p = self.cfg.params.round_ms.max(1);
        (r + 1) * p + p / 2
    }

    fn next_write(&mut self) -> Option<Job<MsgPlain>> {
        let mut sh = self.shared.lock().unwrap();
        let r = sh.open_w;
        let n = sh.writes.count(r);
        let complete = n > 0 && n >= sh.sessions.len();
        if !complete && unix_ms() < self.deadline(r) {
            return None;
        }
        sh.open_w = r + 1;
        let got = sh.writes.take(r);
        let mut batch: BTreeMap<ClientId, (MsgPlain, bool)> = got.into_iter().map(|(c, m)| (c, (m, true))).collect();
        for c in sh.sessions.keys() {
            batch.entry(*c).or_insert_with(|| {
                (
                    MsgPlain {
                        token: RetrievalToken(self.rng.gen()),
                        dummy: true,
                        sender: *c,
                        ct: Box::new([0u8; MSG_CT_LEN]),
                    },
                    false,
                )
            });
        }
        Some(Job {
            round: r,
            batch,
            sessions: Sessions::new(),
        })
    }

    fn next_read(&mut self) -> Option<Job<ReadPlain>> {
        let mut sh = self.shared.lock().unwrap();
        let r = sh.open_r;
        if r >= sh.open_w {
            return None;
        }
        let n = sh.reads.count(r);
        let complete = n > 0 && n >= sh.sessions.len();
        if !complete && unix_ms() < self.deadline(r + 1) {
            return None;
        }
        sh.open_r = r + 1;
        let got = sh.reads.take(r);
        let mut batch: BTreeMap<ClientId, (ReadPlain, bool)> = got.into_iter().map(|(c, q)| (c, (q, true))).collect();
        for c in sh.sessions.keys() {
            batch.entry(*c).or_insert_with(|| {
                (
                    ReadPlain {
                        token: RetrievalToken(self.rng.gen()),
                        dummy: true,
                    },
                    false,
                )
            });
        }
        Some(Job {
            round: r,
            batch,
            sessions: sh.sessions.clone(),
        })
    }

    fn write(&mut self, job: Job<MsgPlain>) -> Result<(), NetError> {
        let msgs: Vec<MsgPlain> = job.batch.into_values().map(|(m, _)| m).collect();
        match &mut self.store {
            Store::Single(svc) => {
                if !msgs.is_empty() {
                    svc.write(&msgs, &mut NoTrace)?;
                }
                self.counters.absorb(svc.state());
            }
            Store::Entry { entry, links } => {
                let subs = entry.route_writes(&msgs, &mut NoTrace)?;
                links.exchange::<PongItem, _>(SubOp::Write, job.round, subs, &mut self.rng)?;
                self.forwarded.0 += 1;
                self.counters.writes.store(self.forwarded.0, Ordering::SeqCst);
            }
        }
        log::debug!("pong write round {}: {} packets", job.round, msgs.len());
        Ok(())
    }

    fn read(&mut self, job: Job<ReadPlain>) -> Result<(), NetError> {
        let (clients, reqs): (Vec<(ClientId, bool)>, Vec<ReadPlain>) =
            job.batch.into_iter().map(|(c, (r, real))| ((c, real), r)).unzip();
        let resps = match &mut self.store {
            Store::Single(svc) => {
                let out = if reqs.is_empty() {
                    Vec::new()
                } else {
                    svc.read(&reqs, &mut NoTrace)?
                };
                self.counters.absorb(svc.state());
                out
            }
            Store::Entry { entry, links } => {
                let subs = entry.route_reads(&reqs, &mut NoTrace)?;
                let replies = links.exchange(SubOp::Read, job.round, subs, &mut self.rng)?;
                self.forwarded.1 += reqs.len() as u64;
                self.counters.reads.store(self.forwarded.1, Ordering::SeqCst);
                entry.finish_reads(replies, reqs.len(), &mut NoTrace)?
            }
        };
        for ((c, real), resp) in clients.into_iter().zip(resps) {
            if !real {
                continue;
            }
            let Some(s) = job.sessions.get(&c) else { continue };
            let frame = s.channel.seal(FrameKind::Response, job.round, &resp.encode(), &mut self.rng);
            if let Err(e) = s.send(&frame) {
                log::warn!("response to client {c}: {e}");
            }
        }
        Ok(())
    }
}
