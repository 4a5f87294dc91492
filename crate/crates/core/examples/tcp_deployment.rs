//! Ping and Pong served over localhost TCP, each as one entry in front of
//! two backends, with three clients passing messages around a ring.

use std::thread;
use std::time::Duration;

use pingpong::client::{befriend, Client};
use pingpong::crypto::ServiceKeyPair;
use pingpong::net::{
    spawn_backend, spawn_ping_server, spawn_pong_server, BackendConfig, BackendKind, FrontRole, NetClient,
    NetClientConfig, PingServerConfig, PongServerConfig,
};
use pingpong::protocol::{ClientId, Params};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    env_logger::init();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut params = Params::default();
    params.round_ms = 300;
    let ping_keys = ServiceKeyPair::generate(&mut rng);
    let pong_keys = ServiceKeyPair::generate(&mut rng);

    let mut backends = Vec::new();
    let mut addrs = (Vec::new(), Vec::new());
    for _ in 0..2 {
        for (kind, keys, out) in [
            (BackendKind::Ping, &ping_keys, &mut addrs.0),
            (BackendKind::Pong(params.clone()), &pong_keys, &mut addrs.1),
        ] {
            let h = spawn_backend(BackendConfig {
                listen: "127.0.0.1:0".into(),
                internal_key: keys.internal_key(),
                entries: 1,
                kind,
                metrics: None,
                seed: None,
            })
            .unwrap();
            out.push(h.addr().to_string());
            backends.push(h);
        }
    }
    let mut pc = PingServerConfig::new("127.0.0.1:0", ping_keys.clone());
    pc.round_ms = params.round_ms;
    pc.role = FrontRole::Entry { index: 0, backends: addrs.0 };
    let ping = spawn_ping_server(pc).unwrap();
    let mut qc = PongServerConfig::new("127.0.0.1:0", pong_keys.clone(), params.clone());
    qc.role = FrontRole::Entry { index: 0, backends: addrs.1 };
    let pong = spawn_pong_server(qc).unwrap();

    let mut clients: Vec<Client> = (1..=3).map(|i| Client::new(ClientId(i), ping_keys.public(), &params, i)).collect();
    for (i, j) in [(0, 1), (1, 2), (0, 2)] {
        let (lo, hi) = clients.split_at_mut(j);
        befriend(&mut lo[i], &mut hi[0], &mut rng).unwrap();
    }
    for (i, c) in clients.iter_mut().enumerate() {
        let to = ClientId((i as u64 + 1) % 3 + 1);
        c.send(to, format!("ring hop from {}", i + 1).as_bytes()).unwrap();
    }

    let cfg = NetClientConfig {
        ping_addr: ping.addr().to_string(),
        ping_pk: ping_keys.public(),
        pong_addr: pong.addr().to_string(),
        pong_pk: pong_keys.public(),
        timeout: Duration::from_secs(10),
    };
    let workers: Vec<_> = clients
        .into_iter()
        .map(|c| {
            let cfg = cfg.clone();
            thread::spawn(move || {
                let mut nc = NetClient::connect(c, &cfg).unwrap();
                let id = nc.client().id();
                nc.run(5, |d| println!("client {id} got {:?} from {}", String::from_utf8_lossy(&d.text), d.from))
                    .unwrap();
            })
        })
        .collect();
    for w in workers {
        w.join().unwrap();
    }
    println!("ping ran {} rounds, pong {}", ping.rounds_done(), pong.rounds_done());
}
