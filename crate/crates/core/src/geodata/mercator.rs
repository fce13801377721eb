//! Web-mercator (EPSG:3857 slippy map) pixel math.
//!
//! World pixel coordinates at zoom `z` span `[0, 256 * 2^z)` on both axes, with
//! `x` growing east from the antimeridian and `y` growing south from the
//! northern mercator limit.

use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::GeoLocation;

/// WGS84 equatorial radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

/// Latitude at which the square mercator world ends.
pub const MAX_MERCATOR_LAT: f64 = 85.0511;

/// Edge length of a standard slippy-map tile.
pub const TILE_SIZE: u32 = 256;

/// Highest zoom level accepted by the pixel math.
pub const MAX_ZOOM: i32 = 30;

fn check_lat(lat: f64) -> Result<()> {
    if !lat.is_finite() || lat.abs() > MAX_MERCATOR_LAT {
        return Err(Error::domain(format!(
            "latitude {lat} outside mercator range ±{MAX_MERCATOR_LAT}"
        )));
    }
    Ok(())
}

fn check_zoom(zoom: i32) -> Result<()> {
    if !(0..=MAX_ZOOM).contains(&zoom) {
        return Err(Error::domain(format!("zoom {zoom} outside 0..={MAX_ZOOM}")));
    }
    Ok(())
}

/// Pixels per world edge at `zoom`.
pub fn world_px(zoom: i32) -> f64 {
    f64::from(TILE_SIZE) * 2f64.powi(zoom)
}

/// Meters of ground per pixel at `lat` and `zoom`.
pub fn ground_resolution(lat: f64, zoom: i32) -> Result<f64> {
    check_lat(lat)?;
    check_zoom(zoom)?;
    Ok(2.0 * PI * EARTH_RADIUS_M / f64::from(TILE_SIZE) * lat.to_radians().cos() / 2f64.powi(zoom))
}

/// Smallest zoom whose ground resolution at `lat` is at most `target` m/px.
pub fn zoom_for_resolution(lat: f64, target: f64) -> Result<i32> {
    if !(target.is_finite() && target > 0.0) {
        return Err(Error::domain(format!("target resolution {target} must be > 0")));
    }
    for zoom in 0..=MAX_ZOOM {
        if ground_resolution(lat, zoom)? <= target {
            return Ok(zoom);
        }
    }
    Err(Error::domain(format!(
        "resolution {target} m/px not reachable at lat {lat} within zoom {MAX_ZOOM}"
    )))
}

/// Forward projection to world pixel coordinates.
pub fn latlon_to_pixel(loc: GeoLocation, zoom: i32) -> Result<(f64, f64)> {
    check_lat(loc.lat())?;
    check_zoom(zoom)?;
    let size = world_px(zoom);
    let x = (loc.lon() + 180.0) / 360.0 * size;
    let sin_lat = loc.lat().to_radians().sin();
    let y = (0.5 - ((1.0 + sin_lat) / (1.0 - sin_lat)).ln() / (4.0 * PI)) * size;
    Ok((x, y))
}

/// Inverse of [`latlon_to_pixel`]. Pixels outside the world are rejected.
pub fn pixel_to_latlon(px: f64, py: f64, zoom: i32) -> Result<GeoLocation> {
    check_zoom(zoom)?;
    let size = world_px(zoom);
    if !(px.is_finite() && py.is_finite()) || !(0.0..=size).contains(&py) {
        return Err(Error::domain(format!("pixel ({px}, {py}) outside world at zoom {zoom}")));
    }
    let lon = px / size * 360.0 - 180.0;
    let n = PI * (1.0 - 2.0 * py / size);
    let lat = n.sinh().atan().to_degrees();
    GeoLocation::new(lat.clamp(-MAX_MERCATOR_LAT, MAX_MERCATOR_LAT), lon)
}

/// Slippy-map tile index containing a world pixel.
pub fn tile_of_pixel(px: f64, py: f64) -> (i64, i64) {
    (
        (px / f64::from(TILE_SIZE)).floor() as i64,
        (py / f64::from(TILE_SIZE)).floor() as i64,
    )
}
