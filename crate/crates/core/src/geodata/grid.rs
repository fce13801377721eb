use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::mercator::{latlon_to_pixel, pixel_to_latlon};
use super::{GeoLocation, RegionSpec};

/// Slack (in cells) below which a partial row/column is treated as float noise.
const CELL_EPS: f64 = 1e-6;

/// Adjacent `tile_px` squares covering a region, anchored at the bbox's
/// north-west pixel corner. Row 0 is northernmost; cells are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub region: RegionSpec,
    pub rows: usize,
    pub cols: usize,
    /// World pixel of the bbox's north-west corner.
    pub origin_px: (f64, f64),
    /// Bbox extent in pixels (width, height).
    pub extent_px: (f64, f64),
    pub cell_centers: Vec<GeoLocation>,
}

impl TileGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn center(&self, row: usize, col: usize) -> GeoLocation {
        self.cell_centers[self.index(row, col)]
    }

    /// Full cell footprint in world pixels: `(x0, y0, x1, y1)`.
    pub fn cell_bounds_px(&self, row: usize, col: usize) -> (f64, f64, f64, f64) {
        let t = f64::from(self.region.tile_px);
        let x0 = self.origin_px.0 + col as f64 * t;
        let y0 = self.origin_px.1 + row as f64 * t;
        (x0, y0, x0 + t, y0 + t)
    }

    /// Integer top-left pixel used when cutting the cell's imagery.
    pub fn cell_origin_px(&self, row: usize, col: usize) -> (i64, i64) {
        let (x0, y0, _, _) = self.cell_bounds_px(row, col);
        (x0.round() as i64, y0.round() as i64)
    }
}

/// Tiles `spec.bbox` with `tile_px` cells at `spec.zoom`.
pub fn build_grid(spec: &RegionSpec) -> Result<TileGrid> {
    spec.validate()?;
    let b = spec.bbox;
    let nw = GeoLocation::new(b.max_lat, b.min_lon)?;
    let se = GeoLocation::new(b.min_lat, b.max_lon)?;
    let (x_min, y_min) = latlon_to_pixel(nw, spec.zoom)?;
    let (mut x_max, y_max) = latlon_to_pixel(se, spec.zoom)?;
    if b.max_lon >= 180.0 {
        // normalization folded +180 onto -180
        x_max = super::mercator::world_px(spec.zoom);
    }
    let width = x_max - x_min;
    let height = y_max - y_min;
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::domain("degenerate bbox: zero pixel area"));
    }
    let t = f64::from(spec.tile_px);
    let cols = ((width / t - CELL_EPS).ceil() as usize).max(1);
    let rows = ((height / t - CELL_EPS).ceil() as usize).max(1);

    let mut cell_centers = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let y0 = y_min + r as f64 * t;
        let y1 = (y0 + t).min(y_max);
        for c in 0..cols {
            let x0 = x_min + c as f64 * t;
            let x1 = (x0 + t).min(x_max);
            cell_centers.push(pixel_to_latlon((x0 + x1) / 2.0, (y0 + y1) / 2.0, spec.zoom)?);
        }
    }
    Ok(TileGrid {
        region: *spec,
        rows,
        cols,
        origin_px: (x_min, y_min),
        extent_px: (width, height),
        cell_centers,
    })
}
