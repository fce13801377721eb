//! Cyclic sin/cos encoding of capture time and location.

use std::f64::consts::TAU;

use crate::geodata::{CaptureTime, GeoLocation};

/// Number of features produced by [`encode_metadata`].
pub const METADATA_DIM: usize = 11;

/// Feature layout:
///
/// | index | feature |
/// |-------|---------|
/// | 0, 1  | sin, cos of `2π·hour/24` |
/// | 2, 3  | sin, cos of `2π·(day−1)/31` |
/// | 4, 5  | sin, cos of `2π·(month−1)/12` |
/// | 6     | `(year − 2000) / 100` |
/// | 7, 8  | sin, cos of `2π·lon/360` |
/// | 9, 10 | sin, cos of latitude in radians |
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetadataEncoding {
    pub features: [f64; METADATA_DIM],
}

impl MetadataEncoding {
    pub fn hour_block(&self) -> (f64, f64) {
        (self.features[0], self.features[1])
    }
    pub fn day_block(&self) -> (f64, f64) {
        (self.features[2], self.features[3])
    }
    pub fn month_block(&self) -> (f64, f64) {
        (self.features[4], self.features[5])
    }
    pub fn year_scaled(&self) -> f64 {
        self.features[6]
    }
    pub fn lon_block(&self) -> (f64, f64) {
        (self.features[7], self.features[8])
    }
    pub fn lat_block(&self) -> (f64, f64) {
        (self.features[9], self.features[10])
    }
}

fn cyclic(turns: f64) -> (f64, f64) {
    (TAU * turns).sin_cos()
}

pub fn encode_metadata(location: GeoLocation, time: CaptureTime) -> MetadataEncoding {
    let hour = cyclic(f64::from(time.hour()) / 24.0);
    let day = cyclic(f64::from(time.day() - 1) / 31.0);
    let month = cyclic(f64::from(time.month() - 1) / 12.0);
    let lon = cyclic(location.lon() / 360.0);
    let lat = location.lat().to_radians();
    MetadataEncoding {
        features: [
            hour.0,
            hour.1,
            day.0,
            day.1,
            month.0,
            month.1,
            (f64::from(time.year()) - 2000.0) / 100.0,
            lon.0,
            lon.1,
            lat.sin(),
            lat.cos(),
        ],
    }
}
