//! One Ping round on a single node: clients seal one-hot notifications,
//! the service aggregates them obliviously and hands every registered
//! client its digest.

use pingpong::client::{befriend, Client};
use pingpong::crypto::ServiceKeyPair;
use pingpong::obliv::OpCounter;
use pingpong::ping::{ping_round, Registry};
use pingpong::protocol::wire::decode_notf_plain;
use pingpong::protocol::{ClientId, Params};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let keys = ServiceKeyPair::generate(&mut rng);
    let params = Params::default();
    let mut clients: Vec<Client> = (1..=4).map(|i| Client::new(ClientId(i), keys.public(), &params, i)).collect();
    for (i, j) in [(0, 1), (0, 2), (1, 3)] {
        let (lo, hi) = clients.split_at_mut(j);
        befriend(&mut lo[i], &mut hi[0], &mut rng).unwrap();
    }

    let mut registry = Registry::new();
    for c in &clients {
        registry.register(c.id(), c.label()).unwrap();
    }

    // 2 and 3 both notify 1; 4 notifies 2; 1 stays idle
    clients[1].send(ClientId(1), b"hi").unwrap();
    clients[2].send(ClientId(1), b"hey").unwrap();
    clients[3].send(ClientId(2), b"yo").unwrap();

    let inputs: Vec<(ClientId, Vec<u8>)> = clients
        .iter_mut()
        .map(|c| {
            let (notf, _msg) = c.send_phase();
            (c.id(), decode_notf_plain(&notf).unwrap().to_vec())
        })
        .collect();
    let mut ops = OpCounter::new();
    let digests = ping_round(&keys, &registry, &inputs, &mut rng, &mut ops);
    for (id, vec) in digests {
        let c = clients.iter().find(|c| c.id() == id).unwrap();
        let from: Vec<u64> = vec
            .ones()
            .into_iter()
            .filter_map(|idx| c.friends().find(|f| f.idx == idx).map(|f| f.id.0))
            .collect();
        println!("client {id}: notified by {from:?}");
    }
    println!("round cost: {} oblivious ops", ops.total());
}
