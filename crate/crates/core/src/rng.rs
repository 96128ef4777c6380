//! Seeded random streams.
//!
//! Every random draw in a run comes from a substream derived from the root
//! seed and a key such as `(purpose, step, prompt slot)`. Substreams are
//! independent of the order in which they are created, so generation can be
//! fanned out without changing results.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a substream is used for. Part of the derivation key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Generate = 1,
    PromptChoice = 2,
    Drop = 3,
    Init = 4,
    MonteCarlo = 5,
}

#[derive(Debug, Clone)]
pub struct RandomStream {
    rng: ChaCha8Rng,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn from_seed(seed: u64) -> Self {
        Self::derive(seed, &[])
    }

    /// Substream keyed by `root` and `key`. Distinct keys give unrelated streams.
    pub fn derive(root: u64, key: &[u64]) -> Self {
        let mut state = root ^ 0x005E_ED0F_u64.wrapping_mul(key.len() as u64 + 1);
        for &k in key {
            state = splitmix64(&mut state) ^ k;
        }
        let mut seed = [0u8; 32];
        for chunk in seed.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        Self {
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn for_purpose(root: u64, purpose: Purpose, key: &[u64]) -> Self {
        let mut full = Vec::with_capacity(key.len() + 1);
        full.push(purpose as u64);
        full.extend_from_slice(key);
        Self::derive(root, &full)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}
