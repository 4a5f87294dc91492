//! Blocking client driver: one connection to Ping, one to Pong, and the
//! per-round schedule of one notification, one message packet and one read.

use std::io;
use std::net::TcpStream;
use std::time::Duration;

use rand::rngs::ThreadRng;

use super::{connect_retry, NetError};
use crate::client::{Client, Delivered};
use crate::crypto::{seal, ServicePublicKey, SymKey};
use crate::protocol::wire::{
    decode_digest, read_frame, write_frame, Channel, Frame, FrameKind, HelloPlain, ResponsePlain,
};

#[derive(Clone, Debug)]
pub struct NetClientConfig {
    pub ping_addr: String,
    pub ping_pk: ServicePublicKey,
    pub pong_addr: String,
    pub pong_pk: ServicePublicKey,
    /// Connect retry window, and the longest wait for any single frame.
    pub timeout: Duration,
}

struct Link {
    stream: TcpStream,
    channel: Channel,
}

impl Link {
    fn open(addr: &str, pk: &ServicePublicKey, client: &Client, timeout: Duration) -> Result<(Link, u64), NetError> {
        let mut stream = connect_retry(addr, timeout)?;
        stream.set_read_timeout(Some(timeout))?;
        let mut rng = rand::thread_rng();
        let hello = HelloPlain {
            session_key: SymKey::random(&mut rng),
            label: client.label(),
            client: client.id(),
        };
        let frame = Frame::new(FrameKind::Hello, 0, seal(&hello.encode(), pk, &mut rng));
        write_frame(&mut stream, &frame)?;
        let channel = Channel::new(hello.session_key);
        let reply = read_frame(&mut stream)?;
        if reply.kind == FrameKind::Error {
            return Err(NetError::Remote(String::from_utf8_lossy(&reply.body).into()));
        }
        let body = channel.open(&reply, FrameKind::Welcome)?;
        let round = u64::from_be_bytes(
            body.as_slice()
                .try_into()
                .map_err(|_| NetError::Protocol("welcome body".into()))?,
        );
        Ok((Link { stream, channel }, round))
    }

    fn send(&mut self, kind: FrameKind, round: u64, pt: &[u8], rng: &mut ThreadRng) -> io::Result<()> {
        write_frame(&mut self.stream, &self.channel.seal(kind, round, pt, rng))
    }
}

pub struct NetClient {
    client: Client,
    ping: Link,
    pong: Link,
    /// Round the next notification is tagged with.
    next: u64,
    rounds: u64,
}

impl NetClient {
    pub fn connect(client: Client, cfg: &NetClientConfig) -> Result<NetClient, NetError> {
        let (ping, round) = Link::open(&cfg.ping_addr, &cfg.ping_pk, &client, cfg.timeout)?;
        let (pong, _) = Link::open(&cfg.pong_addr, &cfg.pong_pk, &client, cfg.timeout)?;
        log::info!("client {} connected at round {round}", client.id());
        Ok(NetClient {
            client,
            ping,
            pong,
            next: round,
            rounds: 0,
        })
    }

    pub fn client(&self) -> &Client {
        &self.client
    }

    pub fn client_mut(&mut self) -> &mut Client {
        &mut self.client
    }

    pub fn into_client(self) -> Client {
        self.client
    }

    /// Rounds completed on this connection.
    pub fn rounds(&self) -> u64 {
        self.rounds
    }

    fn send_phase(&mut self, rng: &mut ThreadRng) -> Result<(), NetError> {
        let (notf, msg) = self.client.send_phase();
        let sent = self
            .ping
            .send(FrameKind::Notf, self.next, &notf, rng)
            .and_then(|_| self.pong.send(FrameKind::Msg, self.next, &msg.encode(), rng));
        if let Err(e) = sent {
            self.client.send_failed();
            return Err(e.into());
        }
        Ok(())
    }

    /// Runs `n` rounds, calling `on_deliver` for each delivered message.
    pub fn run<F: FnMut(&Delivered)>(&mut self, n: u64, mut on_deliver: F) -> Result<(), NetError> {
        let mut rng = rand::thread_rng();
        if self.rounds == 0 {
            self.send_phase(&mut rng)?;
        }
        for _ in 0..n {
            let round = loop {
                let f = read_frame(&mut self.ping.stream)?;
                if f.kind == FrameKind::Error {
                    log::warn!("ping: {}", String::from_utf8_lossy(&f.body));
                    continue;
                }
                let digest = decode_digest(&self.ping.channel.open(&f, FrameKind::Digest)?)?;
                let read = self.client.read_phase(&digest);
                if let Err(e) = self.pong.send(FrameKind::Read, f.round, &read.encode(), &mut rng) {
                    self.client.read_failed();
                    return Err(e.into());
                }
                break f.round;
            };
            self.next = round + 1;
            self.send_phase(&mut rng)?;
            loop {
                let f = match read_frame(&mut self.pong.stream) {
                    Ok(f) => f,
                    Err(e) => {
                        self.client.read_failed();
                        return Err(e.into());
                    }
                };
                if f.kind == FrameKind::Error {
                    let why = String::from_utf8_lossy(&f.body);
                    log::warn!("pong: {why}");
                    if why.contains("Read") {
                        self.client.read_failed();
                        break;
                    }
                    continue;
                }
                let resp = ResponsePlain::decode(&self.pong.channel.open(&f, FrameKind::Response)?)?;
                if let Some(d) = self.client.on_response(&resp, round) {
                    on_deliver(d);
                }
                break;
            }
            self.rounds += 1;
        }
        Ok(())
    }
}
