//! Named random streams derived from one master seed.
//!
//! Every consumer asks for its own stream by label, so results do not depend
//! on the order in which independent pieces of work are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// 32-byte stream key for `(master, label)`.
pub fn stream_key(master: u64, label: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.finalize().into()
}

/// Derived 64-bit seed, handy when a child computation takes a plain seed.
pub fn derive(master: u64, label: &str) -> u64 {
    let k = stream_key(master, label);
    u64::from_le_bytes(k[..8].try_into().unwrap())
}

pub fn stream(master: u64, label: &str) -> StreamRng {
    ChaCha8Rng::from_seed(stream_key(master, label))
}

/// Fill a buffer with standard normals from the given stream.
pub fn fill_normal(rng: &mut StreamRng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

/// Fill a buffer with ±1 entries.
pub fn fill_rademacher(rng: &mut StreamRng, out: &mut [f64]) {
    use rand::Rng;
    for v in out.iter_mut() {
        *v = if rng.random::<bool>() { 1.0 } else { -1.0 };
    }
}
