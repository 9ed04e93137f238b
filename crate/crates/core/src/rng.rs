//! Deterministic random substreams.
//!
//! Every consumer of randomness (a party in a given round, an adversary, the
//! partitioner) draws from its own ChaCha stream keyed by the master seed and
//! a small tuple of identifiers, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream domains. Keeping them distinct guarantees that, for example, party 3's
/// gradient sampling never shares a stream with adversary 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Init = 1,
    Partition = 2,
    Party = 3,
    Adversary = 4,
    Synthetic = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the stream for `(seed, domain, id, round)`.
pub fn substream(seed: u64, domain: Domain, id: u64, round: u64) -> StreamRng {
    let mut key = [0u8; 32];
    let mut state = splitmix64(seed);
    for (chunk, word) in key
        .chunks_exact_mut(8)
        .zip([domain as u64, id, round, 0x5349_474e_5347_4400])
    {
        state = splitmix64(state ^ word);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
