//! Localhost deployments: clients exchange messages through real sockets.

use std::thread;
use std::time::Duration;

use pingpong::client::{befriend, Client, Delivered};
use pingpong::crypto::ServiceKeyPair;
use pingpong::net::{
    spawn_backend, spawn_ping_server, spawn_pong_server, BackendConfig, BackendKind, FrontRole, NetClient,
    NetClientConfig, PingServerConfig, PongServerConfig, ServerHandle,
};
use pingpong::protocol::{ClientId, Params};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const ROUND_MS: u64 = 250;

fn params() -> Params {
    let mut p = Params::default();
    p.round_ms = ROUND_MS;
    p
}

struct Deployment {
    ping_keys: ServiceKeyPair,
    pong_keys: ServiceKeyPair,
    ping: Vec<ServerHandle>,
    pong: Vec<ServerHandle>,
    _backends: Vec<ServerHandle>,
}

fn deploy(entries: usize, backends: usize, rng: &mut ChaCha20Rng) -> Deployment {
    let ping_keys = ServiceKeyPair::generate(rng);
    let pong_keys = ServiceKeyPair::generate(rng);
    let mut held = Vec::new();
    let (mut ping_roles, mut pong_roles) = (vec![FrontRole::Single], vec![FrontRole::Single]);
    if entries > 1 || backends > 1 {
        let (mut ping_addrs, mut pong_addrs) = (Vec::new(), Vec::new());
        for b in 0..backends {
            for (kind, keys, out) in [
                (BackendKind::Ping, &ping_keys, &mut ping_addrs),
                (BackendKind::Pong(params()), &pong_keys, &mut pong_addrs),
            ] {
                let h = spawn_backend(BackendConfig {
                    listen: "127.0.0.1:0".into(),
                    internal_key: keys.internal_key(),
                    entries,
                    kind,
                    metrics: None,
                    seed: Some(b as u64),
                })
                .unwrap();
                out.push(h.addr().to_string());
                held.push(h);
            }
        }
        let roles = |addrs: &Vec<String>| -> Vec<FrontRole> {
            (0..entries)
                .map(|index| FrontRole::Entry {
                    index,
                    backends: addrs.clone(),
                })
                .collect()
        };
        ping_roles = roles(&ping_addrs);
        pong_roles = roles(&pong_addrs);
    }
    Deployment {
        ping: ping_roles.into_iter().map(|r| spawn_ping(&ping_keys, r)).collect(),
        pong: pong_roles.into_iter().map(|r| spawn_pong(&pong_keys, r)).collect(),
        ping_keys,
        pong_keys,
        _backends: held,
    }
}

fn spawn_ping(keys: &ServiceKeyPair, role: FrontRole) -> ServerHandle {
    let mut cfg = PingServerConfig::new("127.0.0.1:0", keys.clone());
    cfg.round_ms = ROUND_MS;
    cfg.role = role;
    spawn_ping_server(cfg).unwrap()
}

fn spawn_pong(keys: &ServiceKeyPair, role: FrontRole) -> ServerHandle {
    let mut cfg = PongServerConfig::new("127.0.0.1:0", keys.clone(), params());
    cfg.role = role;
    cfg.seed = Some(7);
    spawn_pong_server(cfg).unwrap()
}

/// Ring of `n` clients; client i sends one message to i+1. Returns each
/// client's deliveries.
fn exchange(entries: usize, backends: usize, n: usize, rounds: u64) -> Vec<Vec<Delivered>> {
    let _ = env_logger::builder().is_test(true).try_init();
    let mut rng = ChaCha20Rng::seed_from_u64(entries as u64 * 10 + backends as u64);
    let dep = deploy(entries, backends, &mut rng);
    let mut clients: Vec<Client> = (0..n)
        .map(|i| Client::new(ClientId(i as u64 + 1), dep.ping_keys.public(), &params(), 100 + i as u64))
        .collect();
    for i in 0..n {
        let j = (i + 1) % n;
        if clients[i].friend(ClientId(j as u64 + 1)).is_none() {
            let (a, b) = if i < j {
                let (x, y) = clients.split_at_mut(j);
                (&mut x[i], &mut y[0])
            } else {
                let (x, y) = clients.split_at_mut(i);
                (&mut y[0], &mut x[j])
            };
            befriend(a, b, &mut rng).unwrap();
        }
    }
    for (i, c) in clients.iter_mut().enumerate() {
        let to = ClientId(((i + 1) % n) as u64 + 1);
        c.send(to, format!("hello from {}", i + 1).as_bytes()).unwrap();
    }
    let workers: Vec<_> = clients
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            let cfg = NetClientConfig {
                ping_addr: dep.ping[i % dep.ping.len()].addr().to_string(),
                ping_pk: dep.ping_keys.public(),
                pong_addr: dep.pong[i % dep.pong.len()].addr().to_string(),
                pong_pk: dep.pong_keys.public(),
                timeout: Duration::from_secs(20),
            };
            thread::spawn(move || {
                let mut nc = NetClient::connect(c, &cfg).unwrap();
                nc.run(rounds, |_| {}).unwrap();
                nc.into_client().take_inbox()
            })
        })
        .collect();
    let out = workers.into_iter().map(|w| w.join().unwrap()).collect();
    drop(dep);
    out
}

fn check_ring(inboxes: &[Vec<Delivered>]) {
    let n = inboxes.len();
    for (j, inbox) in inboxes.iter().enumerate() {
        let from = (j + n - 1) % n + 1;
        assert_eq!(inbox.len(), 1, "client {} got {:?}; all {:?}", j + 1, inbox, inboxes);
        assert_eq!(inbox[0].from, from as u64);
        assert_eq!(inbox[0].text, format!("hello from {from}").into_bytes());
    }
}

#[test]
fn single_node_delivers_over_tcp() {
    check_ring(&exchange(1, 1, 3, 5));
}

#[test]
fn entries_and_backends_deliver_over_tcp() {
    check_ring(&exchange(2, 2, 4, 6));
}
