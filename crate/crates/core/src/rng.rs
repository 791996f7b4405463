//! Seeded random streams. Every stochastic routine in the crate takes an
//! explicit `u64` seed and builds its generator here, so runs are
//! bit-reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type DetRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mix a base seed with a stream index (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream(seed: u64, stream: u64) -> DetRng {
    seeded(derive_seed(seed, stream))
}

#[inline]
pub fn normal(rng: &mut DetRng) -> f64 {
    rng.sample(StandardNormal)
}

#[inline]
pub fn uniform(rng: &mut DetRng) -> f64 {
    rng.random::<f64>()
}

#[inline]
pub fn bernoulli(rng: &mut DetRng, p: f64) -> u8 {
    u8::from(rng.random::<f64>() < p)
}

pub fn fill_normal(rng: &mut DetRng, out: &mut [f64]) {
    for v in out {
        *v = normal(rng);
    }
}
