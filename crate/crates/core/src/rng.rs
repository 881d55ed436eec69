//! Seed derivation and the Gaussian stream behind every perturbation.
//!
//! All randomness in the crate flows from explicit 64-bit seeds. Sub-seeds are
//! derived with [`mix64`], a SplitMix64-style avalanche mixer, so a run never
//! touches a global RNG and every stream can be regenerated on demand.
//!
//! The Gaussian stream is the polar Box–Muller method driven by
//! `ChaCha8Rng::seed_from_u64(seed)`; uniforms are the 53-bit
//! `Standard` `f64` draws of `rand`. The exact sequence is part of the
//! reproducibility contract and is pinned by golden tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Domain tag for minibatch seeds.
pub const BATCH_TAG: u64 = 0x42;
/// Domain tag for per-step perturbation-matrix sampling.
pub const SAMPLER_TAG: u64 = 0x4D;
/// Domain tag for block-order permutations.
pub const PERMUTATION_TAG: u64 = 0x5045_524D;
/// Domain tag for adaptive block draws.
pub const ADAPTIVE_TAG: u64 = 0x41;

const MIX_INIT: u64 = 0x243F_6A88_85A3_08D3;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into one well-mixed seed.
///
/// `mix64(&[a, b])` and `mix64(&[a, b, c])` are unrelated streams, which is how
/// step, batch and sampler seeds are kept independent.
pub fn mix64(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(MIX_INIT, |acc, &p| splitmix(acc ^ splitmix(p)))
}

/// Perturbation seed for step `t` of a run.
pub fn step_seed(master: u64, t: u64) -> u64 {
    mix64(&[master, t])
}

/// Minibatch seed for step `t` of a run.
pub fn batch_seed(master: u64, t: u64) -> u64 {
    mix64(&[master, t, BATCH_TAG])
}

/// Seeded RNG used everywhere a uniform or discrete draw is needed.
pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal variates regenerated from a seed.
#[derive(Debug, Clone)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl GaussianStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: seeded(seed),
            spare: None,
        }
    }

    #[inline]
    pub fn sample(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (a, b) = self.pair();
        self.spare = Some(b);
        a
    }

    #[inline]
    fn pair(&mut self) -> (f64, f64) {
        loop {
            let x = 2.0 * self.rng.gen::<f64>() - 1.0;
            let y = 2.0 * self.rng.gen::<f64>() - 1.0;
            let s = x * x + y * y;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                return (x * f, y * f);
            }
        }
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        if out.is_empty() {
            return;
        }
        let start = match self.spare.take() {
            Some(z) => {
                out[0] = z;
                1
            }
            None => 0,
        };
        let rest = &mut out[start..];
        let mut chunks = rest.chunks_exact_mut(2);
        for c in &mut chunks {
            let (a, b) = self.pair();
            c[0] = a;
            c[1] = b;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.sample();
        }
    }

    pub fn vector(&mut self, len: usize) -> Vec<f64> {
        let mut v = vec![0.0; len];
        self.fill(&mut v);
        v
    }
}

impl Iterator for GaussianStream {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        Some(self.sample())
    }
}
