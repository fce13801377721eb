//! XYZ tile sources and window mosaicking.

use std::collections::HashMap;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use image::{ImageFormat, Rgb, RgbImage};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::mercator::TILE_SIZE;

/// A source of slippy-map tiles. Implementations must tolerate concurrent
/// fetches.
pub trait TileProvider: Send + Sync {
    /// Encoded image bytes for tile `(x, y)` at `zoom`.
    fn fetch(&self, x: u32, y: u32, zoom: u32) -> Result<Vec<u8>>;
}

impl<P: TileProvider + ?Sized> TileProvider for Arc<P> {
    fn fetch(&self, x: u32, y: u32, zoom: u32) -> Result<Vec<u8>> {
        (**self).fetch(x, y, zoom)
    }
}

impl<P: TileProvider + ?Sized> TileProvider for &P {
    fn fetch(&self, x: u32, y: u32, zoom: u32) -> Result<Vec<u8>> {
        (**self).fetch(x, y, zoom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        RetryPolicy {
            attempts,
            base_delay: Duration::ZERO,
        }
    }
}

/// Fetches with exponential backoff; permanent errors are returned at once.
pub fn fetch_with_retry(
    provider: &dyn TileProvider,
    x: u32,
    y: u32,
    zoom: u32,
    policy: RetryPolicy,
) -> Result<Vec<u8>> {
    let attempts = policy.attempts.max(1);
    let mut attempt = 0;
    loop {
        match provider.fetch(x, y, zoom) {
            Ok(bytes) => return Ok(bytes),
            Err(Error::Fetch { retryable: true, message }) if attempt + 1 < attempts => {
                tracing::debug!(x, y, zoom, attempt, %message, "tile fetch failed, retrying");
                std::thread::sleep(policy.base_delay * 2u32.pow(attempt));
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// Reads `<root>/<z>/<x>/<y>.png`.
#[derive(Debug, Clone)]
pub struct DirTileProvider {
    root: PathBuf,
}

impl DirTileProvider {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirTileProvider { root: root.into() }
    }

    pub fn tile_path(root: &Path, x: u32, y: u32, zoom: u32) -> PathBuf {
        root.join(zoom.to_string()).join(x.to_string()).join(format!("{y}.png"))
    }
}

impl TileProvider for DirTileProvider {
    fn fetch(&self, x: u32, y: u32, zoom: u32) -> Result<Vec<u8>> {
        let path = Self::tile_path(&self.root, x, y, zoom);
        std::fs::read(&path).map_err(|e| Error::Fetch {
            retryable: false,
            message: format!("{}: {e}", path.display()),
        })
    }
}

/// Wraps a provider with an on-disk `zoom/x/y` cache.
pub struct CachedTileProvider<P> {
    inner: P,
    root: PathBuf,
}

impl<P: TileProvider> CachedTileProvider<P> {
    pub fn new(inner: P, root: impl Into<PathBuf>) -> Self {
        CachedTileProvider {
            inner,
            root: root.into(),
        }
    }
}

impl<P: TileProvider> TileProvider for CachedTileProvider<P> {
    fn fetch(&self, x: u32, y: u32, zoom: u32) -> Result<Vec<u8>> {
        let path = DirTileProvider::tile_path(&self.root, x, y, zoom);
        if let Ok(bytes) = std::fs::read(&path) {
            return Ok(bytes);
        }
        let bytes = self.inner.fetch(x, y, zoom)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        // write-then-rename so concurrent readers never see a partial tile
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(bytes)
    }
}

/// Procedural imagery: a deterministic function of world pixel position and
/// seed, so neighbouring tiles join seamlessly.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticTileProvider {
    seed: u64,
    block_px: u32,
}

impl SyntheticTileProvider {
    pub fn new(seed: u64) -> Self {
        SyntheticTileProvider { seed, block_px: 64 }
    }

    /// Side length of the constant-colour blocks underlying the texture.
    pub fn with_block_px(mut self, block_px: u32) -> Self {
        self.block_px = block_px.max(1);
        self
    }

    fn block_color(&self, bx: u64, by: u64, zoom: u32) -> [f64; 3] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(u64::from(zoom).to_le_bytes());
        h.update(bx.to_le_bytes());
        h.update(by.to_le_bytes());
        let d = h.finalize();
        [f64::from(d[0]), f64::from(d[1]), f64::from(d[2])]
    }

    pub fn pixel(&self, gx: u64, gy: u64, zoom: u32) -> Rgb<u8> {
        let b = u64::from(self.block_px);
        let base = self.block_color(gx / b, gy / b, zoom);
        let phase = (self.seed % 97) as f64;
        let wave = 24.0 * ((gx as f64) * 0.21 + phase).sin() * ((gy as f64) * 0.17).cos();
        let px = |c: f64| (0.8 * c + 25.0 + wave).clamp(0.0, 255.0) as u8;
        Rgb([px(base[0]), px(base[1]), px(base[2])])
    }

    pub fn render(&self, x: u32, y: u32, zoom: u32) -> RgbImage {
        let t = u64::from(TILE_SIZE);
        RgbImage::from_fn(TILE_SIZE, TILE_SIZE, |i, j| {
            self.pixel(u64::from(x) * t + u64::from(i), u64::from(y) * t + u64::from(j), zoom)
        })
    }
}

impl TileProvider for SyntheticTileProvider {
    fn fetch(&self, x: u32, y: u32, zoom: u32) -> Result<Vec<u8>> {
        let n = 1u64 << zoom.min(31);
        if u64::from(x) >= n || u64::from(y) >= n {
            return Err(Error::Fetch {
                retryable: false,
                message: format!("tile {zoom}/{x}/{y} outside world"),
            });
        }
        encode_png(&self.render(x, y, zoom))
    }
}

/// Generic XYZ endpoint, e.g. `https://tiles.example.com/{z}/{x}/{y}.png`.
/// Single attempt per call; wrap calls in [`fetch_with_retry`] for backoff.
pub struct HttpTileProvider {
    template: String,
    agent: ureq::Agent,
}

impl HttpTileProvider {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        for key in ["{z}", "{x}", "{y}"] {
            if !template.contains(key) {
                return Err(Error::Config(format!("tile url template lacks {key}")));
            }
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(30)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(HttpTileProvider { template, agent })
    }

    pub fn url(&self, x: u32, y: u32, zoom: u32) -> String {
        self.template
            .replace("{z}", &zoom.to_string())
            .replace("{x}", &x.to_string())
            .replace("{y}", &y.to_string())
    }
}

impl TileProvider for HttpTileProvider {
    fn fetch(&self, x: u32, y: u32, zoom: u32) -> Result<Vec<u8>> {
        let url = self.url(x, y, zoom);
        let mut resp = self.agent.get(&url).call().map_err(|e| Error::Fetch {
            retryable: true,
            message: format!("{url}: {e}"),
        })?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(Error::Fetch {
                retryable: status == 429 || status >= 500,
                message: format!("{url}: HTTP {status}"),
            });
        }
        resp.body_mut().read_to_vec().map_err(|e| Error::Fetch {
            retryable: true,
            message: format!("{url}: {e}"),
        })
    }
}

/// Cuts arbitrary pixel windows out of a tile pyramid, remembering decoded
/// tiles so that adjacent windows share fetches.
pub struct Mosaic<'a> {
    provider: &'a dyn TileProvider,
    zoom: i32,
    policy: RetryPolicy,
    tiles: Mutex<HashMap<(u32, u32), Arc<RgbImage>>>,
}

impl<'a> Mosaic<'a> {
    pub fn new(provider: &'a dyn TileProvider, zoom: i32, policy: RetryPolicy) -> Self {
        Mosaic {
            provider,
            zoom,
            policy,
            tiles: Mutex::new(HashMap::new()),
        }
    }

    fn tile(&self, x: u32, y: u32) -> Result<Arc<RgbImage>> {
        if let Some(t) = self.tiles.lock().expect("tile memo poisoned").get(&(x, y)) {
            return Ok(Arc::clone(t));
        }
        let bytes = fetch_with_retry(self.provider, x, y, self.zoom as u32, self.policy)?;
        let mut img = image::load_from_memory(&bytes)
            .map_err(|e| Error::Fetch {
                retryable: false,
                message: format!("tile {}/{x}/{y} does not decode: {e}", self.zoom),
            })?
            .to_rgb8();
        if img.dimensions() != (TILE_SIZE, TILE_SIZE) {
            img = image::imageops::resize(&img, TILE_SIZE, TILE_SIZE, image::imageops::FilterType::Triangle);
        }
        let img = Arc::new(img);
        self.tiles
            .lock()
            .expect("tile memo poisoned")
            .insert((x, y), Arc::clone(&img));
        Ok(img)
    }

    /// `size` x `size` window whose top-left world pixel is `(x0, y0)`.
    /// Longitude wraps; rows beyond the poles are black.
    pub fn window(&self, x0: i64, y0: i64, size: u32) -> Result<RgbImage> {
        let t = i64::from(TILE_SIZE);
        let n = 1i64 << self.zoom;
        let mut out = RgbImage::new(size, size);
        let s = i64::from(size);
        let ty0 = y0.div_euclid(t);
        let ty1 = (y0 + s - 1).div_euclid(t);
        let tx0 = x0.div_euclid(t);
        let tx1 = (x0 + s - 1).div_euclid(t);
        for ty in ty0..=ty1 {
            if ty < 0 || ty >= n {
                continue;
            }
            for tx in tx0..=tx1 {
                let tile = self.tile(tx.rem_euclid(n) as u32, ty as u32)?;
                // overlap of this tile with the window, in world pixels
                let gx0 = (tx * t).max(x0);
                let gx1 = ((tx + 1) * t).min(x0 + s);
                let gy0 = (ty * t).max(y0);
                let gy1 = ((ty + 1) * t).min(y0 + s);
                for gy in gy0..gy1 {
                    for gx in gx0..gx1 {
                        let p = *tile.get_pixel((gx - tx * t) as u32, (gy - ty * t) as u32);
                        out.put_pixel((gx - x0) as u32, (gy - y0) as u32, p);
                    }
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    struct Flaky {
        failures: AtomicU32,
        inner: SyntheticTileProvider,
    }

    impl TileProvider for Flaky {
        fn fetch(&self, x: u32, y: u32, zoom: u32) -> Result<Vec<u8>> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(Error::Fetch { retryable: true, message: "flaky".into() });
            }
            self.inner.fetch(x, y, zoom)
        }
    }

    #[test]
    fn retry_recovers_after_two_failures() {
        let p = Flaky { failures: AtomicU32::new(2), inner: SyntheticTileProvider::new(1) };
        assert!(fetch_with_retry(&p, 0, 0, 1, RetryPolicy::immediate(3)).is_ok());
        let p = Flaky { failures: AtomicU32::new(3), inner: SyntheticTileProvider::new(1) };
        assert!(fetch_with_retry(&p, 0, 0, 1, RetryPolicy::immediate(3)).is_err());
    }

    #[test]
    fn window_matches_procedural_pixels() {
        let p = SyntheticTileProvider::new(7);
        let m = Mosaic::new(&p, 3, RetryPolicy::immediate(1));
        // straddles four tiles
        let win = m.window(200, 300, 100).unwrap();
        for (i, j) in [(0u32, 0u32), (55, 3), (99, 99), (60, 70)] {
            assert_eq!(*win.get_pixel(i, j), p.pixel(200 + u64::from(i), 300 + u64::from(j), 3));
        }
    }

    #[test]
    fn dir_and_cache_providers() {
        let dir = tempfile::tempdir().unwrap();
        let synth = SyntheticTileProvider::new(3);
        let cached = CachedTileProvider::new(synth, dir.path());
        let a = cached.fetch(1, 2, 2).unwrap();
        let from_disk = DirTileProvider::new(dir.path()).fetch(1, 2, 2).unwrap();
        assert_eq!(a, from_disk);
        assert!(DirTileProvider::new(dir.path()).fetch(0, 0, 2).is_err());
    }

    #[test]
    fn http_template_substitution() {
        let p = HttpTileProvider::new("http://h/{z}/{x}/{y}.png").unwrap();
        assert_eq!(p.url(3, 4, 5), "http://h/5/3/4.png");
        assert!(HttpTileProvider::new("http://h/{z}/{x}.png").is_err());
    }
}
