//! Seed handling.
//!
//! Sequential randomness (network initialisation, batch sampling, ensemble
//! perturbations) comes from ChaCha streams derived from a root seed and a
//! stream name. Observation masks and noise use a stateless counter-based
//! generator keyed by `(seed, stream, t, k)`, so any entry can be produced
//! without drawing the ones before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_name(name: &str) -> u64 {
    // FNV-1a
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

/// Seed of the named sub-stream of `seed`.
pub fn derive_seed(seed: u64, name: &str) -> u64 {
    splitmix64(seed ^ splitmix64(hash_name(name)))
}

/// Deterministic ChaCha stream for `(seed, name)`.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name))
}

/// Stateless generator: every draw is a pure function of its key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(seed: u64, stream: &str) -> Self {
        CounterRng {
            key: derive_seed(seed, stream),
        }
    }

    fn bits(&self, t: u64, k: u64, lane: u64) -> u64 {
        let a = splitmix64(self.key ^ splitmix64(t.wrapping_mul(0xD1B5_4A32_D192_ED03)));
        let b = splitmix64(a ^ splitmix64(k.wrapping_mul(0xABC9_8388_FB8F_AC03)));
        splitmix64(b ^ lane.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7))
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&self, t: u64, k: u64) -> f64 {
        self.uniform_lane(t, k, 0)
    }

    fn uniform_lane(&self, t: u64, k: u64, lane: u64) -> f64 {
        (self.bits(t, k, lane) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller on two independent lanes.
    pub fn normal(&self, t: u64, k: u64) -> f64 {
        let u1 = 1.0 - self.uniform_lane(t, k, 1); // (0, 1]
        let u2 = self.uniform_lane(t, k, 2);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
