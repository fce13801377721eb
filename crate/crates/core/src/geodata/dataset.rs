//! Ground/overhead pairing, manifests and train/test splitting.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mercator::{latlon_to_pixel, zoom_for_resolution, MAX_MERCATOR_LAT};
use super::provider::{Mosaic, RetryPolicy, TileProvider};
use super::{CaptureTime, GeoLocation, GeoSample, ImageRef};

/// A candidate ground photo before pairing. Location and time are optional
/// because raw photo collections are not uniformly tagged.
#[derive(Debug, Clone)]
pub struct Photo {
    pub id: String,
    pub image: ImageRef,
    pub location: Option<GeoLocation>,
    pub time: Option<CaptureTime>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairingConfig {
    /// Target ground sample distance of the overhead tile.
    pub meters_per_px: f64,
    /// Edge of the overhead window cut around each photo.
    pub tile_px: u32,
    pub retry: RetryPolicy,
    pub workers: usize,
}

impl Default for PairingConfig {
    fn default() -> Self {
        PairingConfig {
            meters_per_px: 0.6,
            tile_px: 256,
            retry: RetryPolicy::default(),
            workers: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipReason {
    MissingGeotag,
    MissingTimestamp,
    OutsideMercator,
}

#[derive(Debug)]
pub enum PairOutcome {
    Paired(GeoSample),
    Skipped(SkipReason),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PairingStats {
    pub paired: usize,
    pub skipped: BTreeMap<SkipReason, usize>,
    /// Photo id and message for each fetch that failed after retries.
    pub fetch_failures: Vec<(String, String)>,
}

impl PairingStats {
    pub fn skipped(&self, reason: SkipReason) -> usize {
        self.skipped.get(&reason).copied().unwrap_or(0)
    }
}

/// Attaches the overhead window centered on the photo's location, at the
/// zoom matching the configured ground resolution.
pub fn pair_sample(
    photo: &Photo,
    provider: &dyn TileProvider,
    cfg: &PairingConfig,
) -> Result<PairOutcome> {
    let Some(location) = photo.location else {
        return Ok(PairOutcome::Skipped(SkipReason::MissingGeotag));
    };
    let Some(time) = photo.time else {
        return Ok(PairOutcome::Skipped(SkipReason::MissingTimestamp));
    };
    if location.lat().abs() > MAX_MERCATOR_LAT {
        return Ok(PairOutcome::Skipped(SkipReason::OutsideMercator));
    }
    let zoom = zoom_for_resolution(location.lat(), cfg.meters_per_px)?;
    let (px, py) = latlon_to_pixel(location, zoom)?;
    let half = f64::from(cfg.tile_px) / 2.0;
    let x0 = (px - half).round() as i64;
    let y0 = (py - half).round() as i64;
    let mosaic = Mosaic::new(provider, zoom, cfg.retry);
    let tile = mosaic.window(x0, y0, cfg.tile_px)?;
    Ok(PairOutcome::Paired(GeoSample {
        id: photo.id.clone(),
        ground_image: photo.image.clone(),
        overhead_tile: tile.into(),
        location,
        time,
    }))
}

/// Pairs a photo collection with bounded parallelism, preserving input order.
pub fn pair_all(
    photos: &[Photo],
    provider: &dyn TileProvider,
    cfg: &PairingConfig,
) -> Result<(Vec<GeoSample>, PairingStats)> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<Result<PairOutcome>> =
        pool.install(|| photos.par_iter().map(|p| pair_sample(p, provider, cfg)).collect());

    let mut stats = PairingStats::default();
    let mut samples = Vec::new();
    for (photo, outcome) in photos.iter().zip(outcomes) {
        match outcome {
            Ok(PairOutcome::Paired(s)) => {
                stats.paired += 1;
                samples.push(s);
            }
            Ok(PairOutcome::Skipped(reason)) => *stats.skipped.entry(reason).or_default() += 1,
            Err(e @ Error::Fetch { .. }) => stats.fetch_failures.push((photo.id.clone(), e.to_string())),
            Err(e) => return Err(e),
        }
    }
    Ok((samples, stats))
}

/// Seeded random partition into `(train, test)`; both halves keep input order.
pub fn split_dataset<T: Clone>(samples: &[T], test_count: usize, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if test_count > samples.len() {
        return Err(Error::domain(format!(
            "test_count {test_count} exceeds {} samples",
            samples.len()
        )));
    }
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_test = vec![false; samples.len()];
    for &i in &idx[..test_count] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in samples.iter().zip(is_test) {
        if t {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((train, test))
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub ground_path: String,
    pub tile_path: String,
    pub lat: f64,
    pub lon: f64,
    pub year: i32,
    pub month: u32,
    pub day: u32,
    pub hour: u32,
}

fn materialize(img: &ImageRef, dir: &Path, sub: &str, id: &str) -> Result<String> {
    match img {
        ImageRef::Path(p) => Ok(p.to_string_lossy().into_owned()),
        ImageRef::Memory(m) => {
            let rel = PathBuf::from(sub).join(format!("{id}.png"));
            let full = dir.join(&rel);
            if let Some(parent) = full.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            m.save(&full)?;
            Ok(rel.to_string_lossy().into_owned())
        }
    }
}

/// Writes `manifest.jsonl` into `dir`, saving in-memory images under
/// `dir/ground/` and `dir/tiles/`.
pub fn write_manifest(samples: &[GeoSample], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("manifest.jsonl");
    let mut out = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    for s in samples {
        let rec = ManifestRecord {
            id: s.id.clone(),
            ground_path: materialize(&s.ground_image, dir, "ground", &s.id)?,
            tile_path: materialize(&s.overhead_tile, dir, "tiles", &s.id)?,
            lat: s.location.lat(),
            lon: s.location.lon(),
            year: s.time.year(),
            month: s.time.month(),
            day: s.time.day(),
            hour: s.time.hour(),
        };
        writeln!(out, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(path)
}

/// Reads a manifest; relative image paths resolve against its directory.
pub fn read_manifest(path: &Path) -> Result<Vec<GeoSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let resolve = |p: &str| {
            let p = PathBuf::from(p);
            if p.is_absolute() { p } else { base.join(p) }
        };
        out.push(GeoSample {
            ground_image: ImageRef::Path(resolve(&rec.ground_path)),
            overhead_tile: ImageRef::Path(resolve(&rec.tile_path)),
            location: GeoLocation::new(rec.lat, rec.lon)?,
            time: CaptureTime::new(rec.year, rec.month, rec.day, rec.hour)?,
            id: rec.id,
        });
    }
    Ok(out)
}
