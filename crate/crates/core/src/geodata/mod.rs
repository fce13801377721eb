//! Geographic types, web-mercator tile math, overhead/ground pairing and
//! dataset splitting.

mod dataset;
mod grid;
pub mod mercator;
mod provider;

use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, Datelike, NaiveDate, NaiveDateTime, Timelike, Utc};
use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use dataset::{
    pair_all, pair_sample, read_manifest, split_dataset, write_manifest, ManifestRecord, PairOutcome,
    PairingConfig, PairingStats, Photo, SkipReason,
};
pub use grid::{build_grid, TileGrid};
pub use mercator::{ground_resolution, latlon_to_pixel, pixel_to_latlon, zoom_for_resolution};
pub use provider::{
    fetch_with_retry, CachedTileProvider, DirTileProvider, HttpTileProvider, Mosaic, RetryPolicy,
    SyntheticTileProvider, TileProvider,
};

/// A point on the globe in degrees. Longitude is kept in `[-180, 180)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLocation", into = "RawLocation")]
pub struct GeoLocation {
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct RawLocation {
    lat: f64,
    lon: f64,
}

impl TryFrom<RawLocation> for GeoLocation {
    type Error = Error;
    fn try_from(raw: RawLocation) -> Result<Self> {
        GeoLocation::new(raw.lat, raw.lon)
    }
}

impl From<GeoLocation> for RawLocation {
    fn from(loc: GeoLocation) -> Self {
        RawLocation { lat: loc.lat, lon: loc.lon }
    }
}

impl GeoLocation {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::domain("non-finite coordinate"));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::domain(format!("latitude {lat} outside [-90, 90]")));
        }
        let mut lon = (lon + 180.0).rem_euclid(360.0) - 180.0;
        if lon >= 180.0 {
            lon -= 360.0;
        }
        Ok(GeoLocation { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Hour-granularity capture time, always in UTC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawTime", into = "RawTime")]
pub struct CaptureTime {
    year: i32,
    month: u32,
    day: u32,
    hour: u32,
}

#[derive(Serialize, Deserialize)]
struct RawTime {
    year: i32,
    month: u32,
    day: u32,
    hour: u32,
}

impl TryFrom<RawTime> for CaptureTime {
    type Error = Error;
    fn try_from(raw: RawTime) -> Result<Self> {
        CaptureTime::new(raw.year, raw.month, raw.day, raw.hour)
    }
}

impl From<CaptureTime> for RawTime {
    fn from(t: CaptureTime) -> Self {
        RawTime {
            year: t.year,
            month: t.month,
            day: t.day,
            hour: t.hour,
        }
    }
}

impl CaptureTime {
    pub fn new(year: i32, month: u32, day: u32, hour: u32) -> Result<Self> {
        if NaiveDate::from_ymd_opt(year, month, day).is_none() {
            return Err(Error::domain(format!("invalid date {year}-{month}-{day}")));
        }
        if hour > 23 {
            return Err(Error::domain(format!("hour {hour} outside 0..=23")));
        }
        Ok(CaptureTime { year, month, day, hour })
    }

    /// Parses an RFC 3339 timestamp (converted to UTC) or a naive
    /// `YYYY-MM-DD HH:MM:SS` / `YYYY-MM-DDTHH:MM:SS` timestamp taken as UTC.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let utc: DateTime<Utc> = if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            dt.with_timezone(&Utc)
        } else {
            let naive = NaiveDateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S")
                .or_else(|_| NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S"))
                .map_err(|e| Error::domain(format!("unparseable timestamp {s:?}: {e}")))?;
            naive.and_utc()
        };
        CaptureTime::new(utc.year(), utc.month(), utc.day(), utc.hour())
    }

    pub fn year(&self) -> i32 {
        self.year
    }
    pub fn month(&self) -> u32 {
        self.month
    }
    pub fn day(&self) -> u32 {
        self.day
    }
    pub fn hour(&self) -> u32 {
        self.hour
    }
}

/// Either an image on disk or one already decoded in memory.
#[derive(Debug, Clone)]
pub enum ImageRef {
    Path(PathBuf),
    Memory(Arc<RgbImage>),
}

impl ImageRef {
    pub fn load(&self) -> Result<Arc<RgbImage>> {
        match self {
            ImageRef::Memory(img) => Ok(Arc::clone(img)),
            ImageRef::Path(p) => {
                let img = image::open(p).map_err(|e| match e {
                    image::ImageError::IoError(io) => Error::io(p, io),
                    other => Error::Image(other),
                })?;
                Ok(Arc::new(img.to_rgb8()))
            }
        }
    }
}

impl From<RgbImage> for ImageRef {
    fn from(img: RgbImage) -> Self {
        ImageRef::Memory(Arc::new(img))
    }
}

/// A ground photo paired with an overhead tile centered on its location.
#[derive(Debug, Clone)]
pub struct GeoSample {
    pub id: String,
    pub ground_image: ImageRef,
    pub overhead_tile: ImageRef,
    pub location: GeoLocation,
    pub time: CaptureTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BBox {
    pub fn contains(&self, loc: GeoLocation) -> bool {
        (self.min_lat..=self.max_lat).contains(&loc.lat())
            && (self.min_lon..=self.max_lon).contains(&loc.lon())
    }
}

fn default_tile_px() -> u32 {
    mercator::TILE_SIZE
}

/// A bounding box to be tiled at a fixed zoom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub bbox: BBox,
    pub zoom: i32,
    #[serde(default = "default_tile_px")]
    pub tile_px: u32,
}

impl RegionSpec {
    pub fn new(bbox: BBox, zoom: i32, tile_px: u32) -> Result<Self> {
        let spec = RegionSpec { bbox, zoom, tile_px };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bbox;
        let vals = [b.min_lat, b.min_lon, b.max_lat, b.max_lon];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite bbox"));
        }
        if b.min_lat >= b.max_lat || b.min_lon >= b.max_lon {
            return Err(Error::domain("bbox min must be < max on both axes"));
        }
        if b.min_lat < -mercator::MAX_MERCATOR_LAT || b.max_lat > mercator::MAX_MERCATOR_LAT {
            return Err(Error::domain("bbox outside mercator latitude range"));
        }
        if b.min_lon < -180.0 || b.max_lon > 180.0 {
            return Err(Error::domain("bbox longitude outside [-180, 180]"));
        }
        if !(0..=mercator::MAX_ZOOM).contains(&self.zoom) {
            return Err(Error::domain(format!("zoom {} out of range", self.zoom)));
        }
        if self.tile_px == 0 {
            return Err(Error::domain("tile_px must be positive"));
        }
        Ok(())
    }
}
