//! Frozen encoders for ground photos and text prompts.
//!
//! Both sides must map into the same space. The bundled adapters are
//! deterministic stand-ins (random projection for images, hashed Gaussian
//! vectors for text) so that everything runs without pretrained weights.

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Embedding;
use crate::error::{Error, Result};

pub trait GroundEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, photo: &RgbImage) -> Result<Embedding>;
    /// Digest of every parameter; changes iff the encoder changes.
    fn checksum(&self) -> String;
}

pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, prompt: &str) -> Result<Embedding>;
    fn checksum(&self) -> String;
}

/// Which frozen adapter to build, and its seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub id: String,
    pub seed: u64,
}

pub const RANDOM_PROJECTION: &str = "random-projection";
pub const HASH_TEXT: &str = "hash-text";

fn gaussian_vec(seed: u64, dim: usize) -> Array1<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array1::from_shape_fn(dim, |_| StandardNormal.sample(&mut rng))
}

/// Seeded Gaussian projection of a downsampled, centered photo.
#[derive(Debug, Clone)]
pub struct RandomProjectionGround {
    side: u32,
    projection: Array2<f64>,
}

impl RandomProjectionGround {
    pub const DEFAULT_SIDE: u32 = 16;

    pub fn new(seed: u64, dim: usize, side: u32) -> Self {
        let inputs = 3 * (side as usize) * (side as usize);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (inputs as f64).sqrt();
        let projection = Array2::from_shape_fn((inputs, dim), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        RandomProjectionGround { side, projection }
    }

    pub fn side(&self) -> u32 {
        self.side
    }

    /// Downsampled pixels in `[-0.5, 0.5]`, channel-major.
    pub fn features(&self, photo: &RgbImage) -> Array1<f64> {
        let small = if photo.dimensions() == (self.side, self.side) {
            photo.clone()
        } else {
            image::imageops::resize(photo, self.side, self.side, FilterType::Triangle)
        };
        let n = (self.side * self.side) as usize;
        let mut x = Array1::zeros(3 * n);
        for (i, p) in small.pixels().enumerate() {
            for c in 0..3 {
                x[c * n + i] = f64::from(p[c]) / 255.0 - 0.5;
            }
        }
        x
    }
}

impl GroundEncoder for RandomProjectionGround {
    fn dim(&self) -> usize {
        self.projection.ncols()
    }

    fn encode(&self, photo: &RgbImage) -> Result<Embedding> {
        Embedding::normalize(self.features(photo).dot(&self.projection))
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.side.to_le_bytes());
        for v in &self.projection {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Prompt -> SHA-256 -> seeded Gaussian vector. Different prompts give
/// unrelated directions; the same prompt always gives the same vector.
#[derive(Debug, Clone)]
pub struct HashTextEncoder {
    seed: u64,
    dim: usize,
}

impl HashTextEncoder {
    pub fn new(seed: u64, dim: usize) -> Self {
        HashTextEncoder { seed, dim }
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, prompt: &str) -> Result<Embedding> {
        let prompt = prompt.trim();
        if prompt.is_empty() {
            return Err(Error::domain("empty prompt"));
        }
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(prompt.as_bytes());
        let digest = h.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        Embedding::normalize(gaussian_vec(seed, self.dim))
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(HASH_TEXT.as_bytes());
        h.update(self.seed.to_le_bytes());
        h.update((self.dim as u64).to_le_bytes());
        hex::encode(h.finalize())
    }
}

pub fn ground_encoder(spec: &AdapterSpec, dim: usize) -> Result<Box<dyn GroundEncoder>> {
    match spec.id.as_str() {
        RANDOM_PROJECTION => Ok(Box::new(RandomProjectionGround::new(
            spec.seed,
            dim,
            RandomProjectionGround::DEFAULT_SIDE,
        ))),
        other => Err(Error::Init(format!("ground adapter {other:?} unavailable"))),
    }
}

pub fn text_encoder(spec: &AdapterSpec, dim: usize) -> Result<Box<dyn TextEncoder>> {
    match spec.id.as_str() {
        HASH_TEXT => Ok(Box::new(HashTextEncoder::new(spec.seed, dim))),
        other => Err(Error::Init(format!("text adapter {other:?} unavailable"))),
    }
}
