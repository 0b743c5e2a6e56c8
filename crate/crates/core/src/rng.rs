//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit stream. Independent work items
//! (configurations, replicates, grid cells) get their own sub-stream derived
//! from the run seed and the item's indices, so results do not depend on the
//! order or the number of workers that produce them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Root stream for a seed.
pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sub-stream keyed by `(seed, path...)`. Distinct paths give independent
/// ChaCha streams over the same key.
pub fn substream(seed: u64, path: &[u64]) -> Stream {
    let mut id = 0x5EED_0000_0000_0001u64;
    for &p in path {
        id = splitmix(id ^ splitmix(p.wrapping_add(0x1234_5678)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Uniform draw on the open interval (0, 1).
pub fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Standard normal variates by the Marsaglia polar method. Keeps the spare
/// variate so consecutive calls consume uniforms in pairs.
#[derive(Debug, Default, Clone)]
pub struct PolarNormal {
    spare: Option<f64>,
}

impl PolarNormal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        loop {
            let u = 2.0 * rng.random::<f64>() - 1.0;
            let v = 2.0 * rng.random::<f64>() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare = Some(v * f);
                return u * f;
            }
        }
    }
}
