//! Overhead-tile augmentation: random resized crop followed by a pluggable
//! policy.

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::resize_to;
use crate::error::{Error, Result};

/// Photometric or geometric transform applied after cropping.
pub trait AugmentPolicy: Send + Sync {
    fn apply(&self, img: RgbImage, rng: &mut ChaCha8Rng) -> RgbImage;
}

pub struct Identity;

impl AugmentPolicy for Identity {
    fn apply(&self, img: RgbImage, _rng: &mut ChaCha8Rng) -> RgbImage {
        img
    }
}

/// Random multiple of 90° rotation plus optional horizontal flip. Overhead
/// imagery has no canonical "up" so all eight symmetries are plausible.
pub struct FlipRotate;

impl AugmentPolicy for FlipRotate {
    fn apply(&self, img: RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
        use image::imageops::{flip_horizontal, rotate180, rotate270, rotate90};
        let img = match rng.random_range(0..4u8) {
            0 => img,
            1 => rotate90(&img),
            2 => rotate180(&img),
            _ => rotate270(&img),
        };
        if rng.random::<bool>() {
            flip_horizontal(&img)
        } else {
            img
        }
    }
}

/// Brightness and contrast scaled by factors drawn from `[1 − s, 1 + s]`.
pub struct Jitter {
    pub strength: f64,
}

impl AugmentPolicy for Jitter {
    fn apply(&self, mut img: RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
        let s = self.strength;
        let brightness = rng.random_range(1.0 - s..=1.0 + s);
        let contrast = rng.random_range(1.0 - s..=1.0 + s);
        let n = (img.width() * img.height()) as f64;
        let mean = img.pixels().map(|p| p.0.iter().map(|&c| f64::from(c)).sum::<f64>() / 3.0).sum::<f64>() / n.max(1.0);
        for p in img.pixels_mut() {
            for c in p.0.iter_mut() {
                let v = ((f64::from(*c) - mean) * contrast + mean) * brightness;
                *c = v.round().clamp(0.0, 255.0) as u8;
            }
        }
        img
    }
}

pub struct Chain(pub Vec<Box<dyn AugmentPolicy>>);

impl AugmentPolicy for Chain {
    fn apply(&self, img: RgbImage, rng: &mut ChaCha8Rng) -> RgbImage {
        self.0.iter().fold(img, |img, p| p.apply(img, rng))
    }
}

/// Builds a policy from names joined by `+`, e.g. `"flip-rotate+jitter"`.
pub fn policy_from_name(name: &str) -> Result<Box<dyn AugmentPolicy>> {
    let mut parts: Vec<Box<dyn AugmentPolicy>> = Vec::new();
    for part in name.split('+').map(str::trim) {
        match part {
            "none" | "identity" | "" => {}
            "flip-rotate" => parts.push(Box::new(FlipRotate)),
            "jitter" => parts.push(Box::new(Jitter { strength: 0.2 })),
            other => return Err(Error::Config(format!("unknown augmentation policy {other:?}"))),
        }
    }
    Ok(match parts.len() {
        0 => Box::new(Identity),
        1 => parts.pop().expect("one element"),
        _ => Box::new(Chain(parts)),
    })
}

pub struct Augmenter {
    pub enabled: bool,
    pub size: usize,
    pub scale: (f64, f64),
    pub ratio: (f64, f64),
    pub policy: Box<dyn AugmentPolicy>,
}

impl Augmenter {
    pub fn new(enabled: bool, size: usize, scale: (f64, f64), policy: Box<dyn AugmentPolicy>) -> Self {
        Augmenter {
            enabled,
            size,
            scale,
            ratio: (3.0 / 4.0, 4.0 / 3.0),
            policy,
        }
    }

    /// Augmented copy of `tile` at the model input size. Deterministic in
    /// `seed`; a plain resize when disabled.
    pub fn apply(&self, tile: &RgbImage, seed: u64) -> RgbImage {
        if !self.enabled {
            return resize_to(tile, self.size);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y, w, h) = self.crop_box(tile.width(), tile.height(), &mut rng);
        let crop = image::imageops::crop_imm(tile, x, y, w, h).to_image();
        let out = self.policy.apply(resize_to(&crop, self.size), &mut rng);
        resize_to(&out, self.size)
    }

    fn crop_box(&self, width: u32, height: u32, rng: &mut ChaCha8Rng) -> (u32, u32, u32, u32) {
        let area = f64::from(width) * f64::from(height);
        let (lr0, lr1) = (self.ratio.0.ln(), self.ratio.1.ln());
        for _ in 0..10 {
            let target = area * rng.random_range(self.scale.0..=self.scale.1);
            let aspect = rng.random_range(lr0..=lr1).exp();
            let w = (target * aspect).sqrt().round() as u32;
            let h = (target / aspect).sqrt().round() as u32;
            if w > 0 && h > 0 && w <= width && h <= height {
                let x = rng.random_range(0..=width - w);
                let y = rng.random_range(0..=height - h);
                return (x, y, w, h);
            }
        }
        (0, 0, width, height)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn tile() -> RgbImage {
        RgbImage::from_fn(48, 40, |x, y| Rgb([(x * 5) as u8, (y * 6) as u8, ((x + y) * 2) as u8]))
    }

    #[test]
    fn disabled_is_plain_resize() {
        let a = Augmenter::new(false, 32, (0.8, 1.0), policy_from_name("flip-rotate+jitter").unwrap());
        assert_eq!(a.apply(&tile(), 7), resize_to(&tile(), 32));
    }

    #[test]
    fn seeded_and_sized() {
        let a = Augmenter::new(true, 32, (0.8, 1.0), policy_from_name("flip-rotate+jitter").unwrap());
        assert_eq!(a.apply(&tile(), 3), a.apply(&tile(), 3));
        let distinct = (0..100u64)
            .map(|s| {
                let out = a.apply(&tile(), s);
                assert_eq!(out.dimensions(), (32, 32));
                out.into_raw()
            })
            .collect::<std::collections::HashSet<_>>();
        assert!(distinct.len() > 50);
    }

    #[test]
    fn crop_respects_scale() {
        let a = Augmenter::new(true, 32, (0.8, 1.0), Box::new(Identity));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (x, y, w, h) = a.crop_box(100, 100, &mut rng);
            assert!(x + w <= 100 && y + h <= 100);
            let frac = f64::from(w * h) / 10_000.0;
            assert!((0.75..=1.0).contains(&frac), "{frac}");
        }
    }

    #[test]
    fn unknown_policy() {
        assert!(policy_from_name("warp").is_err());
    }
}
