use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent deterministic stream `stream` of generator `seed`.
///
/// Components draw from separate streams so that, for example, adding a
/// scaling network to a model does not shift the initialization of the
/// layers created before it.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
