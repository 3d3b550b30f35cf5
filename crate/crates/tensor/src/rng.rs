//! The one named generator every stochastic choice is drawn from.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type NamedRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> NamedRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Serializable generator position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn capture(rng: &NamedRng) -> RngState {
    RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
}

pub fn restore(state: &RngState) -> NamedRng {
    let mut rng = ChaCha8Rng::from_seed(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(state.word_pos);
    rng
}

/// A fresh seed for a sub-stream (dropout masks, shuffles).
pub fn next_seed(rng: &mut NamedRng) -> u64 {
    rng.next_u64()
}
