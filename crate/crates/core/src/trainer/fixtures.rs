//! Synthetic, learnable cross-view pairs for desk-scale training.
//!
//! Each pair is driven by a latent code `z ∈ R^LATENT_DIM`. The overhead tile
//! and the ground photo render `z` through two different sinusoid bases, so
//! the mapping tile → ground embedding is a fixed (learnable) function. The
//! metadata-shift variant adds a month-dependent pattern to the ground photo
//! only, making the target depend on capture time as well.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoders::{AdapterSpec, EncoderConfig, RandomProjectionGround};
use crate::error::{Error, Result};
use crate::geodata::{CaptureTime, GeoLocation, GeoSample, ImageRef};

pub const LATENT_DIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureOptions {
    pub tile_px: u32,
    pub photo_px: u32,
    /// Pairs come in twos sharing a tile and location, one taken in January
    /// and one in July, with different ground photos.
    pub metadata_shift: bool,
    /// Frozen ground adapter the targets are computed with.
    pub ground_adapter: AdapterSpec,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        FixtureOptions {
            tile_px: 32,
            photo_px: RandomProjectionGround::DEFAULT_SIDE,
            metadata_shift: false,
            ground_adapter: EncoderConfig::default().ground_adapter,
        }
    }
}

pub struct FixtureSet {
    pub samples: Vec<GeoSample>,
    pub latents: Vec<Array1<f64>>,
    /// The frozen ground encoder under which targets are consistent.
    pub ground: RandomProjectionGround,
}

/// Sum of `LATENT_DIM` plane waves, one per latent coordinate.
struct Basis {
    freq: Vec<[f64; 2]>,
    phase: Vec<[f64; 3]>,
}

impl Basis {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let freq = (0..LATENT_DIM)
            .map(|_| [rng.random_range(-3..=3) as f64, rng.random_range(1..=3) as f64])
            .collect();
        let phase = (0..LATENT_DIM)
            .map(|_| [rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI)])
            .collect();
        Basis { freq, phase }
    }

    fn value(&self, z: &Array1<f64>, u: f64, v: f64, c: usize) -> f64 {
        (0..LATENT_DIM)
            .map(|j| z[j] * (2.0 * PI * (self.freq[j][0] * u + self.freq[j][1] * v) + self.phase[j][c]).cos())
            .sum()
    }

    fn render(&self, z: &Array1<f64>, side: u32, amplitude: f64, extra: impl Fn(f64, f64, usize) -> f64) -> RgbImage {
        let s = f64::from(side);
        RgbImage::from_fn(side, side, |x, y| {
            let (u, v) = ((f64::from(x) + 0.5) / s, (f64::from(y) + 0.5) / s);
            let px = |c| (128.0 + amplitude * self.value(z, u, v, c) + extra(u, v, c)).round().clamp(0.0, 255.0) as u8;
            Rgb([px(0), px(1), px(2)])
        })
    }
}

/// `n` seed-deterministic pairs with `d`-dimensional ground targets.
pub fn generate_fixture_pairs(n: usize, d: usize, seed: u64, opts: &FixtureOptions) -> Result<FixtureSet> {
    if n == 0 {
        return Err(Error::domain("fixture needs at least one pair"));
    }
    if opts.metadata_shift && !n.is_multiple_of(2) {
        return Err(Error::domain("metadata-shift fixture needs an even pair count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tile_basis = Basis::new(&mut rng);
    let photo_basis = Basis::new(&mut rng);
    let shift_basis = Basis::new(&mut rng);
    let shift_code = Array1::from_elem(LATENT_DIM, 1.0);

    let distinct = if opts.metadata_shift { n / 2 } else { n };
    let latents: Vec<Array1<f64>> = (0..distinct)
        .map(|_| Array1::from_shape_fn(LATENT_DIM, |_| StandardNormal.sample(&mut rng)))
        .collect();

    let mut samples = Vec::with_capacity(n);
    let mut per_sample_latents = Vec::with_capacity(n);
    for (i, z) in latents.iter().enumerate() {
        let lat = rng.random_range(-60.0..60.0);
        let lon = rng.random_range(-180.0..180.0);
        let location = GeoLocation::new(lat, lon)?;
        let tile = ImageRef::from(tile_basis.render(z, opts.tile_px, 30.0, |_, _, _| 0.0));
        let months: Vec<u32> = if opts.metadata_shift {
            vec![1, 7]
        } else {
            vec![rng.random_range(1..=12)]
        };
        for month in months {
            let day = rng.random_range(1..=28);
            let hour = rng.random_range(0..24);
            let time = CaptureTime::new(2015 + (i % 8) as i32, month, day, hour)?;
            let sign = (2.0 * PI * f64::from(month - 1) / 12.0).cos();
            let photo = photo_basis.render(z, opts.photo_px, 20.0, |u, v, c| {
                if opts.metadata_shift {
                    sign * 12.0 * shift_basis.value(&shift_code, u, v, c)
                } else {
                    0.0
                }
            });
            samples.push(GeoSample {
                id: format!("fx{seed:x}-{:04}", samples.len()),
                ground_image: ImageRef::from(photo),
                overhead_tile: tile.clone(),
                location,
                time,
            });
            per_sample_latents.push(z.clone());
        }
    }
    let ground = RandomProjectionGround::new(opts.ground_adapter.seed, d, opts.photo_px);
    Ok(FixtureSet {
        samples,
        latents: per_sample_latents,
        ground,
    })
}
