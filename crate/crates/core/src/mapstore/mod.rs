//! Precomputed overhead embeddings over a region grid, persisted per region
//! in a catalog directory.
//!
//! Each region directory holds `manifest.json`, `embeddings.bin` (final,
//! metadata-conditioned rows), `raw_embeddings.bin` (pre-normalization
//! overhead outputs, used for re-conditioning at query time) and a `tiles/`
//! cache of fetched imagery.

mod catalog;
pub mod format;

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::Archive;
use crate::encoders::{encode_metadata, CrossViewModel};
use crate::error::{Error, Result};
use crate::geodata::{
    build_grid, CachedTileProvider, CaptureTime, DirTileProvider, HttpTileProvider, Mosaic, RegionSpec, RetryPolicy,
    SyntheticTileProvider, TileGrid, TileProvider,
};

pub use catalog::Catalog;
pub use format::{payload_len, HEADER_LEN, STORE_FORMAT_VERSION, STORE_MAGIC};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const RAW_EMBEDDINGS_FILE: &str = "raw_embeddings.bin";
pub const TILES_DIR: &str = "tiles";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionStatus {
    Pending,
    Ready,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellError {
    pub row: usize,
    pub col: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreManifest {
    pub format_version: u32,
    pub region_id: String,
    pub name: String,
    pub spec: RegionSpec,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub status: RegionStatus,
    pub created_at: String,
    pub provider: String,
    /// Capture time the stored embeddings are conditioned on.
    pub meta: Option<CaptureTime>,
    /// Digest of the model weights that produced the embeddings.
    pub model_checksum: String,
    /// sha256 of `embeddings.bin`.
    pub checksum: Option<String>,
    /// sha256 of `raw_embeddings.bin`.
    pub raw_checksum: Option<String>,
    /// Cells attempted so far, in row-major order.
    pub progress: usize,
    pub errors: Vec<CellError>,
}

/// Region id: a digest of the region name and its spec.
pub fn region_id(name: &str, spec: &RegionSpec) -> String {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(spec).expect("spec serializes"));
    hex::encode(&h.finalize()[..8])
}

/// Digest of a model's serialized weights and configuration.
pub fn model_checksum(model: &CrossViewModel) -> Result<String> {
    let mut a = Archive::new();
    model.write_into(&mut a)?;
    Ok(format::sha256_hex(&a.to_bytes()?))
}

impl StoreManifest {
    pub fn pending(name: &str, spec: RegionSpec, provider: &str, meta: Option<CaptureTime>, model: &CrossViewModel) -> Result<Self> {
        let grid = build_grid(&spec)?;
        Ok(StoreManifest {
            format_version: STORE_FORMAT_VERSION,
            region_id: region_id(name, &spec),
            name: name.to_string(),
            spec,
            rows: grid.rows,
            cols: grid.cols,
            dim: model.dim(),
            status: RegionStatus::Pending,
            created_at: chrono::Utc::now().to_rfc3339(),
            provider: provider.to_string(),
            meta,
            model_checksum: model_checksum(model)?,
            checksum: None,
            raw_checksum: None,
            progress: 0,
            errors: Vec::new(),
        })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Whether a previous (partial) run used the same inputs.
    fn same_job(&self, other: &StoreManifest) -> bool {
        self.spec == other.spec
            && self.meta == other.meta
            && self.model_checksum == other.model_checksum
            && self.provider == other.provider
            && self.dim == other.dim
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound(format!("no manifest at {}", path.display())),
            _ => Error::io(&path, e),
        })?;
        let m: StoreManifest = serde_json::from_slice(&bytes)?;
        if m.format_version != STORE_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported store version {}", m.format_version)));
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(self)?)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_checked(path: &Path, checksum: &str) -> Result<(usize, usize, Array2<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if format::sha256_hex(&bytes) != checksum {
        return Err(Error::Format(format!("checksum mismatch for {}", path.display())));
    }
    format::decode(&bytes)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionStore {
    pub manifest: StoreManifest,
    /// Unit-norm cell embeddings, `rows·cols x dim`, row-major cells.
    pub embeddings: Array2<f32>,
    /// Pre-normalization overhead outputs, same layout.
    pub raw: Option<Array2<f32>>,
}

impl RegionStore {
    pub fn id(&self) -> &str {
        &self.manifest.region_id
    }

    pub fn grid(&self) -> Result<TileGrid> {
        build_grid(&self.manifest.spec)
    }

    pub fn cell(&self, row: usize, col: usize) -> ArrayView1<'_, f32> {
        self.embeddings.row(row * self.manifest.cols + col)
    }

    /// Writes embeddings, raw vectors and manifest (with checksums) into
    /// `dir`.
    pub fn save(&mut self, dir: &Path) -> Result<()> {
        if self.manifest.status != RegionStatus::Ready {
            return Err(Error::Conflict(format!("region {} is not ready", self.id())));
        }
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (rows, cols) = (self.manifest.rows, self.manifest.cols);
        let bytes = format::encode(rows, cols, &self.embeddings)?;
        self.manifest.checksum = Some(format::sha256_hex(&bytes));
        write_atomic(&dir.join(EMBEDDINGS_FILE), &bytes)?;
        if let Some(raw) = &self.raw {
            let bytes = format::encode(rows, cols, raw)?;
            self.manifest.raw_checksum = Some(format::sha256_hex(&bytes));
            write_atomic(&dir.join(RAW_EMBEDDINGS_FILE), &bytes)?;
        }
        self.manifest.write(dir)
    }

    /// Loads a ready store, verifying checksums and shapes.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = StoreManifest::read(dir)?;
        match manifest.status {
            RegionStatus::Ready => {}
            s => {
                return Err(Error::Conflict(format!(
                    "region {} is {}",
                    manifest.region_id,
                    serde_json::to_value(s)?.as_str().unwrap_or("?")
                )))
            }
        }
        let checksum = manifest
            .checksum
            .as_deref()
            .ok_or_else(|| Error::Format("manifest lacks a payload checksum".into()))?;
        let (rows, cols, embeddings) = read_checked(&dir.join(EMBEDDINGS_FILE), checksum)?;
        if (rows, cols, embeddings.ncols()) != (manifest.rows, manifest.cols, manifest.dim) {
            return Err(Error::Format("payload shape disagrees with manifest".into()));
        }
        let raw = match &manifest.raw_checksum {
            Some(sum) => {
                let (r, c, m) = read_checked(&dir.join(RAW_EMBEDDINGS_FILE), sum)?;
                if (r, c, m.ncols()) != (rows, cols, manifest.dim) {
                    return Err(Error::Format("raw payload shape disagrees with manifest".into()));
                }
                Some(m)
            }
            None => None,
        };
        Ok(RegionStore { manifest, embeddings, raw })
    }
}

/// Builds a provider from its catalog string: `fixture`, `fixture:<seed>`,
/// `dir:<path>` or `xyz:<url template>`.
pub fn open_provider(spec: &str) -> Result<Box<dyn TileProvider>> {
    let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
    match kind {
        "fixture" => {
            let seed = if arg.is_empty() {
                0
            } else {
                arg.parse().map_err(|_| Error::Config(format!("bad fixture seed {arg:?}")))?
            };
            Ok(Box::new(SyntheticTileProvider::new(seed)))
        }
        "dir" if !arg.is_empty() => Ok(Box::new(DirTileProvider::new(PathBuf::from(arg)))),
        "xyz" if !arg.is_empty() => Ok(Box::new(HttpTileProvider::new(arg)?)),
        _ => Err(Error::Config(format!(
            "unknown provider {spec:?}; expected fixture, dir:<path> or xyz:<template>"
        ))),
    }
}

pub struct PrecomputeOptions<'a> {
    pub retry: RetryPolicy,
    /// Cells embedded between progress checkpoints.
    pub chunk: usize,
    /// Called with the number of cells attempted after every chunk; returning
    /// true stops the run, leaving resumable progress on disk.
    pub stop: Option<&'a (dyn Fn(usize) -> bool + Sync)>,
    /// Keep fetched imagery in `<dir>/tiles`.
    pub cache_tiles: bool,
}

impl Default for PrecomputeOptions<'_> {
    fn default() -> Self {
        PrecomputeOptions {
            retry: RetryPolicy::default(),
            chunk: 256,
            stop: None,
            cache_tiles: true,
        }
    }
}

fn to_f32(v: &Array1<f64>) -> Array1<f32> {
    v.mapv(|x| x as f32)
}

/// Fetches and embeds every grid cell of `manifest.spec` into `dir`.
///
/// Resumes from partial progress left by an earlier run with the same spec,
/// model, provider and metadata. Cells whose tiles cannot be fetched are
/// listed in the manifest and the region is marked failed; a later run
/// retries them. Final embeddings are always derived from the stored f32 raw
/// vectors, so interrupted and uninterrupted runs agree bit for bit.
pub fn precompute_region(
    dir: &Path,
    manifest: StoreManifest,
    model: &CrossViewModel,
    provider: &dyn TileProvider,
    opts: &PrecomputeOptions,
) -> Result<RegionStore> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let grid = build_grid(&manifest.spec)?;
    let (n, d) = (grid.len(), model.dim());
    if manifest.dim != d || manifest.cells() != n {
        return Err(Error::Config("manifest does not match model or grid".into()));
    }

    let previous = StoreManifest::read(dir).ok().filter(|p| p.same_job(&manifest));
    if let Some(p) = &previous {
        if p.status == RegionStatus::Ready {
            if let Ok(store) = RegionStore::load(dir) {
                return Ok(store);
            }
        }
    }
    let mut manifest = manifest;
    let mut raw = Array2::<f32>::zeros((n, d));
    let mut todo: Vec<usize> = (0..n).collect();
    if let Some(p) = previous {
        if let Ok(bytes) = std::fs::read(dir.join(RAW_EMBEDDINGS_FILE)) {
            if let Ok((_, _, partial)) = format::decode(&bytes) {
                if partial.dim() == (n, d) {
                    raw = partial;
                    let retry = p.errors.iter().map(|e| grid.index(e.row, e.col));
                    todo = retry.chain(p.progress..n).collect();
                    manifest.created_at = p.created_at;
                }
            }
        }
    }
    manifest.status = RegionStatus::Pending;
    manifest.checksum = None;
    manifest.raw_checksum = None;
    manifest.errors.clear();
    manifest.write(dir)?;

    let cached;
    let source: &dyn TileProvider = if opts.cache_tiles {
        cached = CachedTileProvider::new(provider, dir.join(TILES_DIR));
        &cached
    } else {
        provider
    };
    let mosaic = Mosaic::new(source, manifest.spec.zoom, opts.retry);
    let tile_px = manifest.spec.tile_px;
    let chunk = opts.chunk.max(1);
    for (ci, cells) in todo.chunks(chunk).enumerate() {
        let results: Vec<(usize, Result<Array1<f64>>)> = cells
            .par_iter()
            .map(|&i| {
                let (r, c) = (i / grid.cols, i % grid.cols);
                let (x0, y0) = grid.cell_origin_px(r, c);
                let out = mosaic
                    .window(x0, y0, tile_px)
                    .and_then(|tile| model.overhead_raw(&model.prepare(&tile)));
                (i, out)
            })
            .collect();
        for (i, out) in results {
            match out {
                Ok(v) => raw.row_mut(i).assign(&to_f32(&v)),
                Err(e) => manifest.errors.push(CellError {
                    row: i / grid.cols,
                    col: i % grid.cols,
                    message: e.to_string(),
                }),
            }
        }
        let last = *cells.last().expect("non-empty chunk");
        manifest.progress = manifest.progress.max(last + 1);
        let done = (ci + 1) * chunk >= todo.len();
        write_atomic(&dir.join(RAW_EMBEDDINGS_FILE), &format::encode(grid.rows, grid.cols, &raw)?)?;
        manifest.write(dir)?;
        if !done {
            if let Some(stop) = opts.stop {
                if stop(manifest.progress) {
                    tracing::info!(region = %manifest.region_id, progress = manifest.progress, "precompute interrupted");
                    return Ok(RegionStore {
                        manifest,
                        embeddings: Array2::zeros((0, d)),
                        raw: Some(raw),
                    });
                }
            }
        }
    }

    if !manifest.errors.is_empty() {
        manifest.status = RegionStatus::Failed;
        manifest.write(dir)?;
        return Ok(RegionStore {
            manifest,
            embeddings: Array2::zeros((0, d)),
            raw: Some(raw),
        });
    }

    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            let meta = manifest.meta.map(|t| encode_metadata(grid.cell_centers[i], t));
            let o_raw = raw.row(i).mapv(f64::from);
            Ok(to_f32(&model.condition(&o_raw, meta.as_ref())?.into_values()))
        })
        .collect::<Result<Vec<Array1<f32>>>>()?;
    let mut embeddings = Array2::<f32>::zeros((n, d));
    for (i, r) in rows.iter().enumerate() {
        embeddings.row_mut(i).assign(r);
    }
    manifest.status = RegionStatus::Ready;
    manifest.progress = n;
    let mut store = RegionStore {
        manifest,
        embeddings,
        raw: Some(raw),
    };
    store.save(dir)?;
    Ok(store)
}
