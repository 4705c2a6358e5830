//! Deterministic RNG streams.
//!
//! One root seed fans out to independent per-component streams via ChaCha's
//! counter-based stream selection, so adding draws to one component never
//! perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream used for algorithm draws (MC samples, momenta, accept tests).
pub const STREAM_ALG: u64 = 0;
/// Stream used for model/ancestral sampling during tracing.
pub const STREAM_MODEL: u64 = 1;
/// Stream used for synthetic dataset generation.
pub const STREAM_DATA: u64 = 2;
/// Stream used for parameter initialization.
pub const STREAM_INIT: u64 = 3;

/// A deterministic RNG for (`seed`, `stream`).
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard normal draw.
pub fn standard_normal(rng: &mut Rng) -> f64 {
    rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng)
}

/// Uniform draw in [0, 1).
pub fn uniform(rng: &mut Rng) -> f64 {
    rand::Rng::random::<f64>(rng)
}
