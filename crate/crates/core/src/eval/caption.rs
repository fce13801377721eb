use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Maps a sentence to a vector; cosine between vectors measures agreement.
pub trait SentenceEmbedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Array1<f64>>;
}

/// Sum of seeded Gaussian vectors, one per lower-cased word.
#[derive(Debug, Clone)]
pub struct HashedBagOfWords {
    pub seed: u64,
    pub dim: usize,
}

impl HashedBagOfWords {
    pub fn new(seed: u64, dim: usize) -> Self {
        HashedBagOfWords { seed, dim }
    }

    fn word(&self, w: &str) -> Array1<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(w.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        Array1::from_shape_fn(self.dim, |_| StandardNormal.sample(&mut rng))
    }
}

impl SentenceEmbedder for HashedBagOfWords {
    fn embed(&self, text: &str) -> Result<Array1<f64>> {
        let mut v = Array1::zeros(self.dim);
        let mut words = 0;
        for w in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            v += &self.word(&w.to_lowercase());
            words += 1;
        }
        if words == 0 {
            return Err(Error::domain(format!("no words in {text:?}")));
        }
        Ok(v)
    }
}

/// Mean cosine between paired sentences.
pub fn caption_alignment(a: &[String], b: &[String], embedder: &dyn SentenceEmbedder) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::domain(format!("{} vs {} captions", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::domain("no captions"));
    }
    let mut total = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (embedder.embed(x)?, embedder.embed(y)?);
        let denom = u.dot(&u).sqrt() * v.dot(&v).sqrt();
        if denom.is_nan() || denom <= 0.0 {
            return Err(Error::Numeric("zero sentence vector".into()));
        }
        total += u.dot(&v) / denom;
    }
    Ok(total / a.len() as f64)
}
