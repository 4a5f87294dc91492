//! Simulators: the same oblivious routines driven by random inputs that
//! share only the public sizes of a real run. Equal traces between a real
//! run and its simulator are the executable obliviousness check.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::obliv::{Bit, Obl, Tracer};
use crate::ping::{oblivious_aggregate, AggPacket};
use crate::pong::{Oht, OhtError, PongState, StoreConfig, WriteEntry};
use crate::protocol::{Label, NotfVec};

fn random_packet<G: RngCore>(rng: &mut G) -> AggPacket {
    let mut vec = NotfVec::zero();
    for w in vec.0.iter_mut() {
        *w = rng.gen();
    }
    AggPacket {
        label: Label::random(rng),
        vec,
        is_carrier: Bit::from_bool(rng.gen()),
        ..AggPacket::default()
    }
}

/// Aggregation over `n` random packets.
pub fn sim_obl_aggregation<R: Tracer + ?Sized>(n: usize, seed: u64, tracer: &mut R) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut pkts: Vec<AggPacket> = (0..n).map(|_| random_packet(&mut rng)).collect();
    oblivious_aggregate(&mut pkts, &mut rng, tracer);
}

/// Table build over `n` random distinct keys.
pub fn sim_oht_build<V, R>(n: usize, z: usize, epsilon: f64, seed: u64, tracer: &mut R) -> Result<Oht<V>, OhtError>
where
    V: Obl + Default + Clone,
    R: Tracer + ?Sized,
{
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let entries = (0..n).map(|_| (rng.gen(), V::default())).collect();
    Oht::build(entries, z, epsilon, &mut rng, tracer)
}

/// A store fed random batches of the real batch sizes.
pub struct SimPong<V> {
    state: PongState<V>,
    rng: ChaCha20Rng,
}

impl<V> SimPong<V>
where
    V: Obl + Default + Clone + Send + Sync + 'static,
{
    pub fn new(cfg: StoreConfig, seed: u64) -> SimPong<V> {
        SimPong {
            state: PongState::new(cfg, seed ^ 0x5349_4d50),
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn state(&self) -> &PongState<V> {
        &self.state
    }

    pub fn obl_write<R: Tracer + ?Sized>(&mut self, w: usize, tracer: &mut R) -> Result<(), OhtError> {
        let batch = (0..w)
            .map(|_| WriteEntry {
                token: self.rng.gen(),
                dummy: Bit::from_bool(self.rng.gen()),
                value: V::default(),
            })
            .collect();
        self.state.obl_write(batch, tracer)
    }

    pub fn obl_read<R: Tracer + ?Sized>(&mut self, r: usize, tracer: &mut R) -> Result<(), OhtError> {
        let reqs: Vec<(u64, Bit)> = (0..r)
            .map(|_| (self.rng.gen(), Bit::from_bool(self.rng.gen())))
            .collect();
        self.state.obl_read(&reqs, tracer).map(drop)
    }
}
