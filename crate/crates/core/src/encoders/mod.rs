//! Embedding producers: the trainable overhead ViT, the metadata-driven
//! dynamic encoder, the frozen ground/text adapters and the combine step that
//! joins overhead and metadata embeddings.

pub mod adapters;
mod dynamic;
mod embedding;
mod metadata;
pub mod nn;
mod vit;

use std::path::Path;

use image::RgbImage;
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Archive;
use crate::error::{Error, Result};

pub use adapters::{
    ground_encoder, text_encoder, AdapterSpec, GroundEncoder, HashTextEncoder,
    RandomProjectionGround, TextEncoder,
};
pub use dynamic::{DynamicCache, DynamicEncoder};
pub use embedding::{Embedding, UNIT_TOL};
pub use metadata::{encode_metadata, MetadataEncoding, METADATA_DIM};
pub use nn::Module;
pub use vit::{patchify, resize_to, OverheadCache, OverheadEncoder, PixelNorm, VitConfig};

/// Version of the model checkpoint schema stored in archive metadata.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Initial temperature of the contrastive objective.
pub const INIT_TAU: f64 = 0.07;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub backbone: VitConfig,
    pub dynamic_hidden: Vec<usize>,
    /// Whether the model carries a dynamic encoder at all.
    pub use_dynamic_encoder: bool,
    pub ground_adapter: AdapterSpec,
    pub text_adapter: AdapterSpec,
}

impl Default for EncoderConfig {
    /// ViT-B/32-sized backbone with 512-d embeddings.
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 512,
            backbone: VitConfig {
                image_size: 224,
                patch_size: 32,
                width: 768,
                depth: 12,
                heads: 12,
                mlp_ratio: 4,
            },
            dynamic_hidden: vec![512, 512],
            use_dynamic_encoder: true,
            ground_adapter: AdapterSpec {
                id: adapters::RANDOM_PROJECTION.into(),
                seed: 0x5eed,
            },
            text_adapter: AdapterSpec {
                id: adapters::HASH_TEXT.into(),
                seed: 0x5eed,
            },
        }
    }
}

impl EncoderConfig {
    /// Small profile used by tests and desk-scale experiments.
    pub fn toy() -> Self {
        EncoderConfig {
            embed_dim: 64,
            backbone: VitConfig {
                image_size: 32,
                patch_size: 8,
                width: 64,
                depth: 2,
                heads: 4,
                mlp_ratio: 4,
            },
            ..EncoderConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.dynamic_hidden.contains(&0) {
            return Err(Error::Config("dynamic hidden widths must be positive".into()));
        }
        self.backbone.validate()
    }
}

/// `normalize(o_raw + e)` when `use_meta`, else `normalize(o_raw)`.
pub fn combine(o_raw: &Array1<f64>, e: Option<&Array1<f64>>, use_meta: bool) -> Result<Embedding> {
    match (use_meta, e) {
        (true, Some(e)) => {
            if e.len() != o_raw.len() {
                return Err(Error::domain(format!(
                    "dimension mismatch: overhead {} vs metadata {}",
                    o_raw.len(),
                    e.len()
                )));
            }
            Embedding::normalize(o_raw + e)
        }
        (true, None) => Err(Error::domain("use_meta set but no metadata embedding given")),
        (false, _) => Embedding::normalize(o_raw.clone()),
    }
}

/// Reverse of `y = v / ‖v‖` given `y` and `‖v‖`.
pub fn normalize_backward(y: &Array1<f64>, norm: f64, dy: &Array1<f64>) -> Array1<f64> {
    (dy - &(y * y.dot(dy))) / norm
}

/// Trainable part of the system: overhead encoder, optional dynamic encoder
/// and temperature, plus the configuration needed to rebuild the frozen
/// adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossViewModel {
    pub config: EncoderConfig,
    pub overhead: OverheadEncoder,
    pub dynamic: Option<DynamicEncoder>,
    pub log_tau: f64,
    pub pixel_norm: PixelNorm,
}

impl CrossViewModel {
    /// Seeded initialization. The overhead encoder and dynamic encoder draw
    /// from separate streams, so toggling the dynamic encoder leaves the
    /// overhead weights unchanged.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let overhead = OverheadEncoder::new(&mut rng, config.backbone, config.embed_dim)?;
        let dynamic = config.use_dynamic_encoder.then(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1);
            DynamicEncoder::new(&mut rng, &config.dynamic_hidden, config.embed_dim)
        });
        Ok(CrossViewModel {
            config,
            overhead,
            dynamic,
            log_tau: INIT_TAU.ln(),
            pixel_norm: PixelNorm::default(),
        })
    }

    pub fn dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    pub fn input_size(&self) -> usize {
        self.config.backbone.image_size
    }

    /// Resizes any tile to the backbone input.
    pub fn prepare(&self, tile: &RgbImage) -> RgbImage {
        resize_to(tile, self.input_size())
    }

    /// Pre-normalization overhead output for an input-sized tile.
    pub fn overhead_raw(&self, tile: &RgbImage) -> Result<Array1<f64>> {
        let patches = patchify(tile, &self.config.backbone, &self.pixel_norm)?;
        Ok(self.overhead.forward(&patches).0)
    }

    pub fn encode_overhead(&self, tile: &RgbImage) -> Result<Embedding> {
        Embedding::normalize(self.overhead_raw(tile)?)
    }

    pub fn encode_overhead_batch(&self, tiles: &[RgbImage]) -> Result<Vec<Embedding>> {
        tiles.par_iter().map(|t| self.encode_overhead(t)).collect()
    }

    /// Metadata offset E; not normalized.
    pub fn dynamic_encode(&self, meta: &MetadataEncoding) -> Result<Embedding> {
        let dynamic = self
            .dynamic
            .as_ref()
            .ok_or_else(|| Error::Config("model has no dynamic encoder".into()))?;
        Ok(Embedding::raw(dynamic.forward(meta)?.0))
    }

    /// Final embedding of an input-sized tile, conditioned on metadata when
    /// given and the model has a dynamic encoder.
    pub fn embed(&self, tile: &RgbImage, meta: Option<&MetadataEncoding>) -> Result<Embedding> {
        let o_raw = self.overhead_raw(tile)?;
        self.condition(&o_raw, meta)
    }

    /// Applies metadata conditioning to a stored raw overhead vector.
    pub fn condition(&self, o_raw: &Array1<f64>, meta: Option<&MetadataEncoding>) -> Result<Embedding> {
        match (meta, &self.dynamic) {
            (Some(m), Some(d)) => combine(o_raw, Some(&d.forward(m)?.0), true),
            _ => combine(o_raw, None, false),
        }
    }

    pub fn zero_grad(&mut self) {
        self.overhead.zero_grad();
        if let Some(d) = &mut self.dynamic {
            d.zero_grad();
        }
    }

    pub fn write_into(&self, archive: &mut Archive) -> Result<()> {
        archive.put_meta("model_format_version", &MODEL_FORMAT_VERSION)?;
        archive.put_meta("encoder_config", &self.config)?;
        archive.put_meta("pixel_norm", &self.pixel_norm)?;
        archive
            .tensors
            .insert("log_tau".into(), Array2::from_elem((1, 1), self.log_tau));
        self.overhead.visit("overhead", &mut |n, p| {
            archive.tensors.insert(n.to_string(), p.value.clone());
        });
        if let Some(d) = &self.dynamic {
            d.visit("dynamic", &mut |n, p| {
                archive.tensors.insert(n.to_string(), p.value.clone());
            });
        }
        Ok(())
    }

    pub fn read_from(archive: &Archive) -> Result<Self> {
        let version: u32 = archive.meta("model_format_version")?;
        if version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model format {version}")));
        }
        let config: EncoderConfig = archive.meta("encoder_config")?;
        let mut model = CrossViewModel::new(config, 0)?;
        model.pixel_norm = archive.meta("pixel_norm")?;
        model.log_tau = archive.tensor("log_tau")?[(0, 0)];
        let mut missing = None;
        let mut load = |n: &str, p: &mut nn::Param| match archive.tensors.get(n) {
            Some(t) if t.dim() == p.value.dim() => p.value.assign(t),
            _ => missing = Some(n.to_string()),
        };
        model.overhead.visit_mut("overhead", &mut load);
        if let Some(d) = &mut model.dynamic {
            d.visit_mut("dynamic", &mut load);
        }
        if let Some(n) = missing {
            return Err(Error::Format(format!("checkpoint tensor {n:?} missing or misshapen")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new();
        self.write_into(&mut a)?;
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        CrossViewModel::read_from(&Archive::load(path)?)
    }
}

/// A trained model together with its frozen adapters.
pub struct Encoders {
    pub model: CrossViewModel,
    pub ground: Box<dyn GroundEncoder>,
    pub text: Box<dyn TextEncoder>,
}

impl Encoders {
    pub fn new(model: CrossViewModel) -> Result<Self> {
        let ground = ground_encoder(&model.config.ground_adapter, model.dim())?;
        let text = text_encoder(&model.config.text_adapter, model.dim())?;
        Ok(Encoders { model, ground, text })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Encoders::new(CrossViewModel::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny_config() -> EncoderConfig {
        let mut c = EncoderConfig::toy();
        c.embed_dim = 16;
        c.backbone = VitConfig { image_size: 16, patch_size: 8, width: 16, depth: 1, heads: 2, mlp_ratio: 2 };
        c.dynamic_hidden = vec![32, 32];
        c
    }

    fn tile(seed: u32) -> RgbImage {
        RgbImage::from_fn(16, 16, |x, y| image::Rgb([(x * 13 + seed) as u8, (y * 7) as u8, (x * y + seed) as u8]))
    }

    #[test]
    fn combine_semantics() {
        let o = array![3.0, 0.0, 4.0];
        let zero = Array1::zeros(3);
        assert_eq!(combine(&o, Some(&zero), true).unwrap(), combine(&o, None, false).unwrap());
        let e = array![1.0, 2.0, -1.0];
        assert_eq!(combine(&o, Some(&e), false).unwrap(), combine(&o, None, false).unwrap());
        let s = combine(&o, Some(&e), true).unwrap();
        assert!((s.norm() - 1.0).abs() < UNIT_TOL);
        let sum = &o + &e;
        let scale = sum.dot(&sum).sqrt();
        for (a, b) in s.values().iter().zip(sum.iter()) {
            assert!((a * scale - b).abs() < 1e-12);
        }
        assert!(combine(&o, Some(&array![1.0]), true).is_err());
        assert!(combine(&o, Some(&-&o), true).is_err());
    }

    #[test]
    fn overhead_contract() {
        let m = CrossViewModel::new(tiny_config(), 3).unwrap();
        let e = m.encode_overhead(&tile(1)).unwrap();
        assert!((e.norm() - 1.0).abs() < UNIT_TOL);
        assert_eq!(e, m.encode_overhead(&tile(1)).unwrap());
        assert!(m.encode_overhead(&RgbImage::new(17, 16)).is_err());
        let tiles: Vec<_> = (0..5).map(tile).collect();
        let batch = m.encode_overhead_batch(&tiles).unwrap();
        for (t, b) in tiles.iter().zip(&batch) {
            let single = m.encode_overhead(t).unwrap();
            for (x, y) in single.values().iter().zip(b.values().iter()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dynamic_stream_independent_of_toggle() {
        let with = CrossViewModel::new(tiny_config(), 9).unwrap();
        let mut cfg = tiny_config();
        cfg.use_dynamic_encoder = false;
        let without = CrossViewModel::new(cfg, 9).unwrap();
        assert_eq!(with.overhead, without.overhead);
        assert!(without.dynamic.is_none());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = CrossViewModel::new(tiny_config(), 5).unwrap();
        m.log_tau = 0.05f64.ln();
        m.pixel_norm.mean = [0.4, 0.5, 0.6];
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let back = CrossViewModel::load(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn normalize_backward_matches_differences() {
        let v: Array1<f64> = array![0.3, -1.2, 2.0];
        let dy: Array1<f64> = array![0.7, 0.1, -0.4];
        let f = |v: &Array1<f64>| {
            let n = v.dot(v).sqrt();
            (v / n).dot(&dy)
        };
        let n = v.dot(&v).sqrt();
        let g = normalize_backward(&(&v / n), n, &dy);
        for i in 0..3 {
            let mut p = v.clone();
            p[i] += 1e-6;
            let mut q = v.clone();
            q[i] -= 1e-6;
            assert!(((f(&p) - f(&q)) / 2e-6 - g[i]).abs() < 1e-8);
        }
    }
}
