//! Two friends exchange a message through in-process Ping and Pong, one
//! phase at a time: notify and deposit, aggregate, fetch.

use pingpong::client::{befriend, Client};
use pingpong::crypto::ServiceKeyPair;
use pingpong::obliv::NoTrace;
use pingpong::ping::{ping_round, Registry};
use pingpong::pong::{MergeMode, PongService};
use pingpong::protocol::wire::decode_notf_plain;
use pingpong::protocol::{ClientId, Params};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn main() {
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let params = Params::default();
    let ping_keys = ServiceKeyPair::generate(&mut rng);
    let mut alice = Client::new(ClientId(1), ping_keys.public(), &params, 1);
    let mut bob = Client::new(ClientId(2), ping_keys.public(), &params, 2);
    befriend(&mut alice, &mut bob, &mut rng).unwrap();

    let mut registry = Registry::new();
    registry.register(alice.id(), alice.label()).unwrap();
    registry.register(bob.id(), bob.label()).unwrap();
    let mut pong = PongService::new(&params, MergeMode::Inline, 5);

    alice.send(bob.id(), b"lunch at noon?").unwrap();
    for round in 0..3u64 {
        // every client sends exactly one notification and one message packet
        let mut notfs = Vec::new();
        let mut msgs = Vec::new();
        for c in [&mut alice, &mut bob] {
            let (notf, msg) = c.send_phase();
            notfs.push((c.id(), decode_notf_plain(&notf).unwrap().to_vec()));
            msgs.push(msg);
        }
        let digests = ping_round(&ping_keys, &registry, &notfs, &mut rng, &mut NoTrace);
        pong.write(&msgs, &mut NoTrace).unwrap();

        // and exactly one read request
        let mut reads = Vec::new();
        for (id, vec) in &digests {
            let c = if *id == alice.id() { &mut alice } else { &mut bob };
            reads.push(c.read_phase(vec));
        }
        let responses = pong.read(&reads, &mut NoTrace).unwrap();
        for ((id, _), resp) in digests.iter().zip(&responses) {
            let c = if *id == alice.id() { &mut alice } else { &mut bob };
            if let Some(d) = c.on_response(resp, round) {
                println!("round {round}: client {id} got {:?} from {}", String::from_utf8_lossy(&d.text), d.from);
            }
        }
    }
    println!("alice inbox {}, bob inbox {}", alice.inbox().len(), bob.inbox().len());
}
