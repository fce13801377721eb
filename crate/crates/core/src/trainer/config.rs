use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::DEFAULT_QUEUE_CAPACITY;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};

/// Flat training configuration; every key may appear in a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// First warm-restart period, in epochs.
    pub restart_epochs: f64,
    pub restart_mult: f64,
    pub batch_size: usize,
    pub queue_capacity: usize,
    /// Probability of dropping the dynamic encoder for a batch.
    pub dynamic_dropout: f64,
    /// Train with metadata at all (ablation "Meta/Training").
    pub use_meta: bool,
    pub epochs: usize,
    /// Stops early once this many steps have run.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub augment: bool,
    pub crop_scale_min: f64,
    pub crop_scale_max: f64,
    /// Policy augmentation applied after the crop: "none", "flip-rotate",
    /// "jitter" or "flip-rotate+jitter".
    pub augment_policy: String,
    /// Compute pixel mean/std from the training tiles before step 0.
    pub fit_pixel_norm: bool,
    pub checkpoint_every: u64,

    /// Encoder profile: "toy" or "base".
    pub profile: String,
    pub embed_dim: Option<usize>,

    /// Dataset: a manifest path, or a synthetic fixture of this many pairs.
    pub manifest: Option<PathBuf>,
    pub fixture_pairs: Option<usize>,
    pub fixture_metadata_shift: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-6,
            weight_decay: 0.1,
            restart_epochs: 10.0,
            restart_mult: 2.0,
            batch_size: 32,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            dynamic_dropout: 0.5,
            use_meta: true,
            epochs: 10,
            max_steps: None,
            seed: 0,
            augment: true,
            crop_scale_min: 0.8,
            crop_scale_max: 1.0,
            augment_policy: "flip-rotate".into(),
            fit_pixel_norm: true,
            checkpoint_every: 1000,
            profile: "toy".into(),
            embed_dim: None,
            manifest: None,
            fixture_pairs: None,
            fixture_metadata_shift: false,
        }
    }
}

impl TrainConfig {
    /// Desk-scale overfitting profile: small batches, short queue, larger
    /// learning rate, no augmentation.
    pub fn toy() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 8,
            queue_capacity: 16,
            epochs: 125,
            augment: false,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.queue_capacity < self.batch_size {
            return bad("queue_capacity must hold at least one batch");
        }
        if !(0.0..=1.0).contains(&self.dynamic_dropout) {
            return bad("dynamic_dropout must lie in [0, 1]");
        }
        if !(self.restart_epochs > 0.0 && self.restart_mult >= 1.0) {
            return bad("restart_epochs must be > 0 and restart_mult >= 1");
        }
        if !(0.0 < self.crop_scale_min && self.crop_scale_min <= self.crop_scale_max && self.crop_scale_max <= 1.0) {
            return bad("crop scale must satisfy 0 < min <= max <= 1");
        }
        super::policy_from_name(&self.augment_policy)?;
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = TrainConfig::from_toml_str(&s)?;
        if let (Some(m), Some(base)) = (&cfg.manifest, path.parent()) {
            if m.is_relative() {
                cfg.manifest = Some(base.join(m));
            }
        }
        Ok(cfg)
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let mut enc = match self.profile.as_str() {
            "toy" => EncoderConfig::toy(),
            "base" => EncoderConfig::default(),
            other => return Err(Error::Config(format!("unknown profile {other:?}"))),
        };
        if let Some(d) = self.embed_dim {
            enc.embed_dim = d;
        }
        enc.use_dynamic_encoder = self.use_meta;
        enc.validate()?;
        Ok(enc)
    }
}
