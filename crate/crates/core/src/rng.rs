use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG threaded through every stochastic operation.
pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a label.
pub fn derive(seed: u64, stream: u64) -> Rng {
    let mixed = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    ChaCha8Rng::seed_from_u64(mixed)
}
