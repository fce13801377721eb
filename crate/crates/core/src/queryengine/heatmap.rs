use std::path::{Path, PathBuf};

use image::{Rgba, RgbaImage};
use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{BBox, CaptureTime, GeoLocation, TileGrid};

/// Values below this (after min-max scaling) are cleared to 0.
pub const CLIP_BELOW: f64 = 0.5;

/// Scaled values within this distance under `CLIP_BELOW` are treated as
/// sitting on the threshold, so that decimal inputs like `[0.2, 0.3, 0.4]`
/// map to exactly `[0, 0.5, 1]` despite binary rounding.
const CLIP_TOL: f64 = 1e-9;

/// Min-max scales `sims` to `[0, 1]` and clears everything below 0.5. A
/// constant input maps to all zeros.
pub fn normalize_scores(sims: &[f64]) -> Vec<f64> {
    let (lo, hi) = sims
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = hi - lo;
    if span.is_nan() || span <= 0.0 {
        return vec![0.0; sims.len()];
    }
    sims.iter()
        .map(|&s| {
            let v = (s - lo) / span;
            if v < CLIP_BELOW - CLIP_TOL {
                0.0
            } else {
                v.clamp(CLIP_BELOW, 1.0)
            }
        })
        .collect()
}

/// Cosine of `query` against every row of `cells` (stored as f32).
pub fn cosine_scores(cells: ndarray::ArrayView2<f32>, query: &Array1<f64>) -> Result<Vec<f64>> {
    if cells.ncols() != query.len() {
        return Err(Error::domain(format!(
            "query dim {} vs cell dim {}",
            query.len(),
            cells.ncols()
        )));
    }
    let qn = query.dot(query).sqrt();
    Ok(cells
        .outer_iter()
        .map(|row| {
            let (mut dot, mut nn) = (0.0, 0.0);
            for (&c, &q) in row.iter().zip(query) {
                let c = f64::from(c);
                dot += c * q;
                nn += c * c;
            }
            let denom = nn.sqrt() * qn;
            if denom > 0.0 {
                dot / denom
            } else {
                0.0
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Argmax {
    pub row: usize,
    pub col: usize,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub rows: usize,
    pub cols: usize,
    pub bbox: BBox,
    pub query: String,
    pub meta: Option<CaptureTime>,
    /// Unnormalized cosines when set.
    pub raw: bool,
    /// Row-major, row 0 north.
    pub values: Vec<f64>,
    pub argmax: Argmax,
}

impl Heatmap {
    pub fn new(grid: &TileGrid, query: &str, meta: Option<CaptureTime>, raw: bool, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() || values.is_empty() {
            return Err(Error::domain(format!("{} values for {} cells", values.len(), grid.len())));
        }
        let (row, col, loc) = argmax_cell(grid, &values);
        Ok(Heatmap {
            rows: grid.rows,
            cols: grid.cols,
            bbox: grid.region.bbox,
            query: query.to_string(),
            meta,
            raw,
            values,
            argmax: Argmax {
                row,
                col,
                lat: loc.lat(),
                lon: loc.lon(),
            },
        })
    }

    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }
}

/// Largest value, ties to the smallest row-major index.
fn argmax_cell(grid: &TileGrid, values: &[f64]) -> (usize, usize, GeoLocation) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    let (r, c) = (best / grid.cols, best % grid.cols);
    (r, c, grid.center(r, c))
}

/// Cell with the strongest response and its center.
pub fn localize(h: &Heatmap) -> ((usize, usize), GeoLocation) {
    let a = h.argmax;
    let loc = GeoLocation::new(a.lat, a.lon).expect("argmax comes from a valid grid");
    ((a.row, a.col), loc)
}

/// Colormap: 0 (and anything below 0.5) is transparent; `t = (v − 0.5)/0.5`
/// runs from yellow `(255, 255, 0)` at 0.5 to red `(255, 0, 0)` at 1.
pub fn colormap(v: f64) -> Rgba<u8> {
    if v.is_nan() || v < CLIP_BELOW {
        return Rgba([0, 0, 0, 0]);
    }
    let t = ((v - CLIP_BELOW) / (1.0 - CLIP_BELOW)).clamp(0.0, 1.0);
    Rgba([255, (255.0 * (1.0 - t)).round() as u8, 0, 255])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub image: String,
    pub rows: usize,
    pub cols: usize,
    pub bbox: BBox,
    pub query: String,
    pub meta: Option<CaptureTime>,
    pub argmax: Argmax,
    pub colormap: String,
}

/// Writes a `cols x rows` PNG (one pixel per cell) and a JSON sidecar next
/// to it. Returns the sidecar path.
pub fn render_heatmap(h: &Heatmap, out: &Path) -> Result<PathBuf> {
    let img = RgbaImage::from_fn(h.cols as u32, h.rows as u32, |x, y| colormap(h.value(y as usize, x as usize)));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(out, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(out, io),
        other => Error::Image(other),
    })?;
    let sidecar = Sidecar {
        image: out.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
        rows: h.rows,
        cols: h.cols,
        bbox: h.bbox,
        query: h.query.clone(),
        meta: h.meta,
        argmax: h.argmax,
        colormap: "0 transparent; v in [0.5, 1] -> rgba(255, round(255*(1-(v-0.5)/0.5)), 0, 255)".into(),
    };
    let path = out.with_extension("json");
    std::fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
