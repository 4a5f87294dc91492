//! TCP deployment: Ping and Pong servers (single node or entry), backends
//! reached over sub-batch frames, and a blocking client driver.
//!
//! Every connection carries length-prefixed [`Frame`]s. A client opens each
//! session with a `Hello` sealed to the service key; entries and backends
//! share the service's internal key instead.

mod backend;
mod client;
mod ping;
mod pong;

use std::collections::{BTreeMap, HashMap};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use crate::crypto::{ServiceKeyPair, SymKey};
use crate::ping::{AggPacket, PingError};
use crate::pong::{OhtError, PongItem, PongState, StoredMsg};
use crate::protocol::wire::{read_frame, write_frame, Channel, Frame, FrameKind, HelloPlain, WireError};
use crate::protocol::ClientId;
use crate::router::RouterError;

pub use backend::{spawn_backend, BackendConfig, BackendKind};
pub use client::{NetClient, NetClientConfig};
pub use ping::{spawn_ping_server, PingServerConfig};
pub use pong::{spawn_pong_server, PongServerConfig};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("wire: {0}")]
    Wire(#[from] WireError),
    #[error("ping: {0}")]
    Ping(#[from] PingError),
    #[error("pong: {0}")]
    Pong(#[from] OhtError),
    #[error("routing: {0}")]
    Router(#[from] RouterError),
    #[error("client: {0}")]
    Client(#[from] crate::client::ClientError),
    #[error("peer error: {0}")]
    Remote(String),
    #[error("{0}")]
    Protocol(String),
}

/// Whether a node talks to clients alone or fronts a set of backends.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FrontRole {
    Single,
    Entry { index: usize, backends: Vec<String> },
}

/// Running server. Threads stop at the next poll after [`ServerHandle::stop`].
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    rounds: Arc<AtomicU64>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Rounds (Ping) or write batches (Pong, backend) completed so far.
    pub fn rounds_done(&self) -> u64 {
        self.rounds.load(Ordering::SeqCst)
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    /// Blocks until every worker thread exits.
    pub fn join(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

const POLL: Duration = Duration::from_millis(5);

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Round numbers are wall-clock based so that nodes started separately
/// agree on them: round `r` spans `[r·period, (r+1)·period)` ms since the
/// Unix epoch.
pub fn wall_round(period_ms: u64) -> u64 {
    unix_ms() / period_ms.max(1)
}

/// Sleeps until the wall clock reaches `at_ms`, or `stop` is raised.
/// Returns false if stopped.
fn sleep_until(at_ms: u64, stop: &AtomicBool) -> bool {
    loop {
        if stop.load(Ordering::SeqCst) {
            return false;
        }
        let now = unix_ms();
        if now >= at_ms {
            return true;
        }
        thread::sleep(POLL.min(Duration::from_millis(at_ms - now)));
    }
}

/// Accept loop that hands each connection to `handle` on its own thread.
fn spawn_acceptor<F>(listener: TcpListener, stop: Arc<AtomicBool>, handle: F) -> io::Result<JoinHandle<()>>
where
    F: Fn(TcpStream) + Send + Sync + 'static,
{
    listener.set_nonblocking(true)?;
    let handle = Arc::new(handle);
    Ok(thread::spawn(move || {
        while !stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_nodelay(true);
                    log::debug!("connection from {peer}");
                    let h = handle.clone();
                    thread::spawn(move || h(stream));
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                Err(e) => {
                    log::warn!("accept: {e}");
                    thread::sleep(POLL);
                }
            }
        }
    }))
}

/// Reads the client's `Hello` and returns its contents.
fn accept_hello(stream: &mut TcpStream, keys: &ServiceKeyPair) -> Result<HelloPlain, NetError> {
    let frame = read_frame(stream)?;
    frame.expect(FrameKind::Hello)?;
    let plain = keys
        .unseal(&frame.body)
        .map_err(|_| NetError::Protocol("hello does not unseal".into()))?;
    Ok(HelloPlain::decode(&plain)?)
}

/// Write half of a client session, shared between the reader thread and the
/// round worker.
struct Session {
    channel: Channel,
    out: Mutex<TcpStream>,
}

impl Session {
    fn send(&self, frame: &Frame) -> io::Result<()> {
        write_frame(&mut *self.out.lock().unwrap(), frame)
    }
}

type Sessions = HashMap<ClientId, Arc<Session>>;

/// Per-round request buffer holding at most one item per client per round.
/// A late item joins the oldest open round; an early one waits for its own.
#[derive(Debug)]
struct RoundInbox<T> {
    rounds: BTreeMap<u64, HashMap<ClientId, T>>,
}

impl<T> Default for RoundInbox<T> {
    fn default() -> Self {
        RoundInbox { rounds: BTreeMap::new() }
    }
}

impl<T> RoundInbox<T> {
    /// Returns the round the item was filed under.
    fn insert(&mut self, client: ClientId, tagged: u64, open: u64, item: T) -> u64 {
        let mut r = tagged.max(open);
        loop {
            let slot = self.rounds.entry(r).or_default();
            if !slot.contains_key(&client) {
                slot.insert(client, item);
                return r;
            }
            r += 1;
        }
    }

    fn count(&self, round: u64) -> usize {
        self.rounds.get(&round).map_or(0, HashMap::len)
    }

    fn take(&mut self, round: u64) -> HashMap<ClientId, T> {
        self.rounds.remove(&round).unwrap_or_default()
    }

    fn forget(&mut self, client: ClientId) {
        for m in self.rounds.values_mut() {
            m.remove(&client);
        }
    }
}

/// Counters served on a Pong metrics endpoint.
#[derive(Default)]
struct PongCounters {
    writes: AtomicU64,
    reads: AtomicU64,
    bins: AtomicU64,
    tables: AtomicU64,
    merges: AtomicU64,
    rebuilds: AtomicU64,
}

impl PongCounters {
    fn absorb(&self, st: &PongState<StoredMsg>) {
        let m = st.metrics();
        self.writes.store(m.writes, Ordering::SeqCst);
        self.reads.store(m.reads, Ordering::SeqCst);
        self.bins.store(st.bins() as u64, Ordering::SeqCst);
        self.tables.store(st.tables() as u64, Ordering::SeqCst);
        self.merges.store(m.merges, Ordering::SeqCst);
        self.rebuilds.store(m.rebuilds, Ordering::SeqCst);
    }

    fn render(&self) -> String {
        let get = |c: &AtomicU64| c.load(Ordering::SeqCst);
        format!(
            "writes {}\nreads {}\nbins {}\ntables {}\nmerges {}\nrebuilds {}\n",
            get(&self.writes),
            get(&self.reads),
            get(&self.bins),
            get(&self.tables),
            get(&self.merges),
            get(&self.rebuilds)
        )
    }
}

/// Operation carried by a sub-batch frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum SubOp {
    Aggregate = 0,
    Write = 1,
    Read = 2,
}

impl SubOp {
    fn from_u8(b: u8) -> Option<SubOp> {
        [SubOp::Aggregate, SubOp::Write, SubOp::Read].into_iter().find(|o| *o as u8 == b)
    }
}

/// Fixed-size record exchanged between entries and backends.
pub trait WireItem: Sized {
    const LEN: usize;
    fn put(&self, out: &mut Vec<u8>);
    fn get(b: &[u8]) -> Option<Self>;
}

impl WireItem for AggPacket {
    const LEN: usize = AggPacket::ENCODED_LEN;
    fn put(&self, out: &mut Vec<u8>) {
        self.encode(out)
    }
    fn get(b: &[u8]) -> Option<Self> {
        AggPacket::decode(b)
    }
}

impl WireItem for PongItem {
    const LEN: usize = PongItem::ENCODED_LEN;
    fn put(&self, out: &mut Vec<u8>) {
        self.encode(out)
    }
    fn get(b: &[u8]) -> Option<Self> {
        PongItem::decode(b)
    }
}

/// `op ‖ entry ‖ count ‖ items`
pub fn encode_sub<T: WireItem>(op: SubOp, entry: u32, items: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + items.len() * T::LEN);
    out.push(op as u8);
    out.extend_from_slice(&entry.to_be_bytes());
    out.extend_from_slice(&(items.len() as u32).to_be_bytes());
    for it in items {
        it.put(&mut out);
    }
    out
}

fn sub_header(b: &[u8]) -> Result<(SubOp, u32, usize), WireError> {
    if b.len() < 9 {
        return Err(WireError::Truncated(b.len()));
    }
    let op = SubOp::from_u8(b[0]).ok_or(WireError::Payload("sub-batch op"))?;
    let entry = u32::from_be_bytes(b[1..5].try_into().unwrap());
    let count = u32::from_be_bytes(b[5..9].try_into().unwrap()) as usize;
    Ok((op, entry, count))
}

pub fn decode_sub<T: WireItem>(b: &[u8]) -> Result<(SubOp, u32, Vec<T>), WireError> {
    let (op, entry, count) = sub_header(b)?;
    let body = &b[9..];
    if body.len() != count * T::LEN {
        return Err(WireError::Payload("sub-batch length"));
    }
    let items = body
        .chunks_exact(T::LEN)
        .map(T::get)
        .collect::<Option<Vec<T>>>()
        .ok_or(WireError::Payload("sub-batch item"))?;
    Ok((op, entry, items))
}

/// An entry's connections to every backend, in backend order.
struct BackendLinks {
    entry: u32,
    channel: Channel,
    conns: Vec<TcpStream>,
}

impl BackendLinks {
    fn connect(entry: usize, key: SymKey, addrs: &[String], patience: Duration) -> Result<BackendLinks, NetError> {
        let conns = addrs
            .iter()
            .map(|a| {
                let s = connect_retry(a, patience)?;
                // a backend that stops answering fails the round
                s.set_read_timeout(Some(patience))?;
                Ok(s)
            })
            .collect::<Result<Vec<_>, NetError>>()?;
        Ok(BackendLinks {
            entry: entry as u32,
            channel: Channel::new(key),
            conns,
        })
    }

    fn len(&self) -> usize {
        self.conns.len()
    }

    /// Scatters one sub-batch per backend and gathers the replies in
    /// backend order.
    fn exchange<T, G>(&mut self, op: SubOp, round: u64, subs: Vec<Vec<T>>, rng: &mut G) -> Result<Vec<Vec<T>>, NetError>
    where
        T: WireItem,
        G: RngCore + CryptoRng,
    {
        if subs.len() != self.conns.len() {
            return Err(NetError::Protocol(format!(
                "{} sub-batches for {} backends",
                subs.len(),
                self.conns.len()
            )));
        }
        for (conn, sub) in self.conns.iter_mut().zip(&subs) {
            let pt = encode_sub(op, self.entry, sub);
            write_frame(conn, &self.channel.seal(FrameKind::SubBatch, round, &pt, rng))?;
        }
        let mut out = Vec::with_capacity(subs.len());
        for conn in &mut self.conns {
            let frame = read_frame(conn)?;
            if frame.kind == FrameKind::Error {
                return Err(NetError::Remote(String::from_utf8_lossy(&frame.body).into()));
            }
            if frame.round != round {
                return Err(NetError::Protocol(format!("reply for round {} in round {round}", frame.round)));
            }
            let pt = self.channel.open(&frame, FrameKind::SubReply)?;
            let (got_op, _, items) = decode_sub::<T>(&pt)?;
            if got_op != op {
                return Err(NetError::Protocol("reply for another operation".into()));
            }
            out.push(items);
        }
        Ok(out)
    }
}

fn connect_retry(addr: &str, patience: Duration) -> Result<TcpStream, NetError> {
    let start = Instant::now();
    loop {
        let err = match addr.to_socket_addrs() {
            Ok(mut it) => match it.next() {
                Some(sa) => match TcpStream::connect(sa) {
                    Ok(s) => {
                        s.set_nodelay(true)?;
                        return Ok(s);
                    }
                    Err(e) => e,
                },
                None => io::Error::new(io::ErrorKind::NotFound, "no address"),
            },
            Err(e) => e,
        };
        if start.elapsed() >= patience {
            return Err(NetError::Io(io::Error::new(err.kind(), format!("{addr}: {err}"))));
        }
        thread::sleep(Duration::from_millis(50));
    }
}

/// Plain-text counters, one `name value` line each, written to every
/// connection on `addr`.
pub fn spawn_metrics<F>(addr: &str, stop: Arc<AtomicBool>, render: F) -> io::Result<(SocketAddr, JoinHandle<()>)>
where
    F: Fn() -> String + Send + Sync + 'static,
{
    use std::io::Write;
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let t = spawn_acceptor(listener, stop, move |mut s| {
        let _ = s.write_all(render().as_bytes());
    })?;
    Ok((local, t))
}

/// Fetches the metrics text served by [`spawn_metrics`].
pub fn fetch_metrics(addr: &str) -> io::Result<String> {
    use std::io::Read;
    let mut s = TcpStream::connect(addr)?;
    let mut text = String::new();
    s.read_to_string(&mut text)?;
    Ok(text)
}
