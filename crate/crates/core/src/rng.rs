//! Seed derivation and keyed Gaussian noise streams.
//!
//! All randomness in the crate flows from explicit seeds. Independent
//! consumers derive their own ChaCha streams so that results do not depend
//! on the order in which they draw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::numerics::Tensor;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of integers into a fresh seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(splitmix64(acc) ^ p))
}

pub fn rng_from(base: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, path))
}

pub fn normal_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Stream labels for [`NoiseSource`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseKey {
    TextLatent = 1,
    SpeechLatent = 2,
    Crop = 3,
    ScheduledSampling = 4,
}

/// Per-item source of reparameterization noise. Each key draws from its
/// own ChaCha stream, so a loss sees identical noise whether it runs alone
/// or inside a composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSource {
    seed: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    /// Noise for the `index`-th item of a batch drawn with `seed`.
    pub fn for_item(seed: u64, index: usize) -> Self {
        Self {
            seed: derive_seed(seed, &[index as u64]),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng(&self, key: NoiseKey) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(key as u64);
        rng
    }

    pub fn gaussian(&self, key: NoiseKey, rows: usize, cols: usize) -> Tensor {
        normal_tensor(&mut self.rng(key), rows, cols, 1.0)
    }
}

/// Serializable position of a ChaCha8 generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub const BYTES: usize = 32 + 8 + 16;

    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }

    pub fn to_bytes(&self) -> [u8; Self::BYTES] {
        let mut out = [0u8; Self::BYTES];
        out[..32].copy_from_slice(&self.seed);
        out[32..40].copy_from_slice(&self.stream.to_le_bytes());
        out[40..].copy_from_slice(&self.word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8; Self::BYTES]) -> Self {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&b[..32]);
        Self {
            seed,
            stream: u64::from_le_bytes(b[32..40].try_into().unwrap()),
            word_pos: u128::from_le_bytes(b[40..].try_into().unwrap()),
        }
    }
}
