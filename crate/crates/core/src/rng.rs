//! Counter-based random streams.
//!
//! Every random draw in a trial comes from a stream keyed by
//! `(seed, entity id, role)`. The key is expanded into a ChaCha8 key and the
//! entity id selects the ChaCha stream, so a patient's draws depend only on
//! its own id and never on how patients are distributed over threads or how
//! many other patients exist.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

/// What a stream is used for. Distinct roles give statistically independent
/// streams for the same entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamRole {
    Demographics = 1,
    Parameters = 2,
    Protocol = 3,
    Announcement = 4,
    Diffusion = 5,
    Measurement = 6,
}

#[inline]
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `(seed, id, role)`.
pub fn stream(seed: u64, id: u64, role: StreamRole) -> Stream {
    let mut state = seed ^ (role as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(id);
    rng
}

/// Stream for a bare seed, used by the single-entity entry points.
pub fn seeded(seed: u64) -> Stream {
    stream(seed, 0, StreamRole::Protocol)
}
