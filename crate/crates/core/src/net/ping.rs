//! Ping over TCP. A tick thread closes one round every `round_ms`,
//! aggregates (locally or through the backends) and pushes one digest to
//! every registered client.

use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{
    accept_hello, sleep_until, spawn_acceptor, spawn_metrics, wall_round, BackendLinks, FrontRole, NetError, RoundInbox, ServerHandle,
    Session, Sessions, SubOp,
};
use crate::crypto::ServiceKeyPair;
use crate::obliv::NoTrace;
use crate::ping::{ping_round, PingEntry, Registry};
use crate::protocol::wire::{decode_notf_plain, encode_digest, read_frame, write_frame, Channel, Frame, FrameKind};
use crate::protocol::{ClientId, NotfVec};

#[derive(Clone)]
pub struct PingServerConfig {
    pub listen: String,
    pub keys: ServiceKeyPair,
    pub round_ms: u64,
    pub lambda: u32,
    pub role: FrontRole,
    /// Stop after this many rounds.
    pub max_rounds: Option<u64>,
    pub metrics: Option<String>,
    /// How long an entry keeps retrying its backends at startup.
    pub connect_patience: Duration,
}

impl PingServerConfig {
    pub fn new(listen: &str, keys: ServiceKeyPair) -> PingServerConfig {
        PingServerConfig {
            listen: listen.into(),
            keys,
            round_ms: 1000,
            lambda: 128,
            role: FrontRole::Single,
            max_rounds: None,
            metrics: None,
            connect_patience: Duration::from_secs(30),
        }
    }
}

#[derive(Default)]
struct Counters {
    packets_in: AtomicU64,
    digests_out: AtomicU64,
    round_ms: AtomicU64,
}

struct Shared {
    /// Oldest round still accepting notifications.
    open: u64,
    registry: Registry,
    sessions: Sessions,
    inbox: RoundInbox<Vec<u8>>,
}

pub fn spawn_ping_server(cfg: PingServerConfig) -> Result<ServerHandle, NetError> {
    let listener = TcpListener::bind(&cfg.listen)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let rounds = Arc::new(AtomicU64::new(0));
    let counters = Arc::new(Counters::default());
    let shared = Arc::new(Mutex::new(Shared {
        open: wall_round(cfg.round_ms),
        registry: Registry::new(),
        sessions: Sessions::new(),
        inbox: RoundInbox::default(),
    }));
    let links = match &cfg.role {
        FrontRole::Single => None,
        FrontRole::Entry { index, backends } => Some(BackendLinks::connect(
            *index,
            cfg.keys.internal_key(),
            backends,
            cfg.connect_patience,
        )?),
    };

    let mut threads = Vec::new();
    {
        let (keys, shared, counters) = (cfg.keys.clone(), shared.clone(), counters.clone());
        threads.push(spawn_acceptor(listener, stop.clone(), move |s| {
            serve_client(s, &keys, &shared, &counters)
        })?);
    }
    if let Some(m) = &cfg.metrics {
        let c = counters.clone();
        let (maddr, t) = spawn_metrics(m, stop.clone(), move || {
            format!(
                "packets_in {}\ndigests_out {}\nround_ms {}\n",
                c.packets_in.load(Ordering::SeqCst),
                c.digests_out.load(Ordering::SeqCst),
                c.round_ms.load(Ordering::SeqCst)
            )
        })?;
        log::info!("ping metrics on {maddr}");
        threads.push(t);
    }
    {
        let (stop, rounds) = (stop.clone(), rounds.clone());
        threads.push(thread::spawn(move || {
            if let Err(e) = tick_loop(&cfg, links, &shared, &counters, &stop, &rounds) {
                log::error!("ping round failed: {e}");
            }
            stop.store(true, Ordering::SeqCst);
        }));
    }
    log::info!("ping listening on {addr}");
    Ok(ServerHandle {
        addr,
        stop,
        rounds,
        threads,
    })
}

fn serve_client(mut stream: TcpStream, keys: &ServiceKeyPair, shared: &Mutex<Shared>, counters: &Counters) {
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
    let mut rng = rand::thread_rng();
    {
        let mut sh = shared.lock().unwrap();
        if let Err(e) = sh.registry.register(client, hello.label) {
            drop(sh);
            log::warn!("client {client}: {e}");
            let _ = session.send(&Frame::error(0, &e.to_string()));
            return;
        }
        let open = sh.open;
        sh.sessions.insert(client, session.clone());
        let welcome = session.channel.seal(FrameKind::Welcome, open, &open.to_be_bytes(), &mut rng);
        if session.send(&welcome).is_err() {
            drop_client(&mut sh, client);
            return;
        }
    }
    log::info!("client {client} registered");
    loop {
        let frame = match read_frame(&mut stream) {
            Ok(f) => f,
            Err(_) => break,
        };
        let body = match session
            .channel
            .open(&frame, FrameKind::Notf)
            .and_then(|pt| decode_notf_plain(&pt).map(<[u8]>::to_vec))
        {
            Ok(b) => b,
            Err(e) => {
                log::warn!("client {client}: {e}");
                break;
            }
        };
        let mut sh = shared.lock().unwrap();
        // one round of grace: a notification that just missed its deadline
        // joins the next round instead of stranding the pair's counter
        if frame.round + 1 < sh.open {
            let open = sh.open;
            drop(sh);
            log::warn!("client {client}: stale notification for round {} (open {open})", frame.round);
            let _ = session.send(&Frame::error(frame.round, "stale round"));
            continue;
        }
        let open = sh.open;
        sh.inbox.insert(client, frame.round, open, body);
        counters.packets_in.fetch_add(1, Ordering::SeqCst);
    }
    drop_client(&mut shared.lock().unwrap(), client);
    log::info!("client {client} left");
}

fn drop_client(sh: &mut Shared, client: ClientId) {
    sh.sessions.remove(&client);
    sh.registry.unregister(client);
    sh.inbox.forget(client);
}

fn tick_loop(
    cfg: &PingServerConfig,
    mut links: Option<BackendLinks>,
    shared: &Mutex<Shared>,
    counters: &Counters,
    stop: &AtomicBool,
    rounds: &AtomicU64,
) -> Result<(), NetError> {
    let mut rng = ChaCha20Rng::from_entropy();
    let period = cfg.round_ms.max(1);
    let mut r = shared.lock().unwrap().open;
    loop {
        if !sleep_until((r + 1) * period, stop) {
            return Ok(());
        }
        let (registry, inputs, sessions) = {
            let mut sh = shared.lock().unwrap();
            sh.open = r + 1;
            let inputs: Vec<(ClientId, Vec<u8>)> = sh.inbox.take(r).into_iter().collect();
            (sh.registry.clone(), inputs, sh.sessions.clone())
        };
        let t0 = Instant::now();
        let digests: Vec<(ClientId, NotfVec)> = match links.as_mut() {
            None => ping_round(&cfg.keys, &registry, &inputs, &mut rng, &mut NoTrace),
            Some(links) => {
                let entry = PingEntry::with_registry(cfg.keys.clone(), registry, links.len(), cfg.lambda);
                let subs = entry.prepare(&inputs, &mut rng, &mut NoTrace)?;
                let replies = links.exchange(SubOp::Aggregate, r, subs, &mut rng)?;
                entry.finish(replies, &mut NoTrace)?
            }
        };
        counters.round_ms.store(t0.elapsed().as_millis() as u64, Ordering::SeqCst);
        let mut gone = Vec::new();
        for (c, v) in digests {
            let Some(s) = sessions.get(&c) else { continue };
            let frame = s.channel.seal(FrameKind::Digest, r, &encode_digest(&v), &mut rng);
            match s.send(&frame) {
                Ok(()) => {
                    counters.digests_out.fetch_add(1, Ordering::SeqCst);
                }
                Err(_) => gone.push(c),
            }
        }
        if !gone.is_empty() {
            let mut sh = shared.lock().unwrap();
            for c in gone {
                drop_client(&mut sh, c);
            }
        }
        log::debug!("ping round {r}: {} inputs", inputs.len());
        let done = rounds.fetch_add(1, Ordering::SeqCst) + 1;
        if cfg.max_rounds.is_some_and(|m| done >= m) {
            return Ok(());
        }
        r += 1;
    }
}
