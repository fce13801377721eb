//! Vision transformer backbone for overhead tiles.

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::{s, Array1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{join, Block, BlockCache, LayerNorm, LayerNormCache, Linear, Mat, Module, Param};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl VitConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.image_size, self.patch_size, self.width, self.depth, self.heads, self.mlp_ratio];
        if dims.contains(&0) {
            return Err(Error::Config("backbone dimensions must be positive".into()));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config("image_size must be a multiple of patch_size".into()));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config("width must be divisible by heads".into()));
        }
        Ok(())
    }
}

/// Per-channel pixel statistics (on the `[0, 1]` scale) used to standardize
/// tiles before patch embedding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PixelNorm {
    fn default() -> Self {
        PixelNorm {
            mean: [0.5; 3],
            std: [0.25; 3],
        }
    }
}

impl PixelNorm {
    /// Channel mean/std over a set of images.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a RgbImage>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut n = 0usize;
        for img in images {
            for p in img.pixels() {
                for c in 0..3 {
                    let v = f64::from(p[c]) / 255.0;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return PixelNorm::default();
        }
        let mut out = PixelNorm::default();
        for c in 0..3 {
            let mean = sum[c] / n as f64;
            let var = (sq[c] / n as f64 - mean * mean).max(0.0);
            out.mean[c] = mean;
            out.std[c] = var.sqrt().max(1e-3);
        }
        out
    }
}

/// Resizes to the model's square input if needed.
pub fn resize_to(img: &RgbImage, size: usize) -> RgbImage {
    let size = size as u32;
    if img.dimensions() == (size, size) {
        img.clone()
    } else {
        image::imageops::resize(img, size, size, FilterType::Triangle)
    }
}

/// Splits a standardized `image_size²` tile into flattened patches
/// (`num_patches x 3·patch²`, channel-major within a patch).
pub fn patchify(img: &RgbImage, cfg: &VitConfig, norm: &PixelNorm) -> Result<Mat> {
    let size = cfg.image_size as u32;
    if img.dimensions() != (size, size) {
        return Err(Error::domain(format!(
            "tile is {:?}, model expects {size}x{size}",
            img.dimensions()
        )));
    }
    let p = cfg.patch_size;
    let g = cfg.grid();
    let mut out = Mat::zeros((cfg.num_patches(), cfg.patch_dim()));
    for pr in 0..g {
        for pc in 0..g {
            let mut row = out.row_mut(pr * g + pc);
            for c in 0..3 {
                for dy in 0..p {
                    for dx in 0..p {
                        let px = img.get_pixel((pc * p + dx) as u32, (pr * p + dy) as u32);
                        let v = (f64::from(px[c]) / 255.0 - norm.mean[c]) / norm.std[c];
                        row[c * p * p + dy * p + dx] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Class-token ViT: patch embedding, learned positions, pre-norm blocks and a
/// bias-free projection of the final class token to the embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct OverheadEncoder {
    pub config: VitConfig,
    pub patch: Linear,
    pub cls: Param,
    pub pos: Param,
    pub ln_pre: LayerNorm,
    pub blocks: Vec<Block>,
    pub ln_post: LayerNorm,
    pub proj: Param,
}

pub struct OverheadCache {
    patches: Mat,
    ln_pre: LayerNormCache,
    blocks: Vec<BlockCache>,
    ln_post: LayerNormCache,
    pooled: Mat,
}

impl OverheadEncoder {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, config: VitConfig, out_dim: usize) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let scale = (w as f64).powf(-0.5);
        Ok(OverheadEncoder {
            config,
            patch: Linear::new(rng, config.patch_dim(), w, false),
            cls: Param::normal(rng, 1, w, scale),
            pos: Param::normal(rng, config.num_patches() + 1, w, scale),
            ln_pre: LayerNorm::new(w),
            blocks: (0..config.depth)
                .map(|_| Block::new(rng, w, config.heads, w * config.mlp_ratio))
                .collect(),
            ln_post: LayerNorm::new(w),
            proj: Param::normal(rng, w, out_dim, scale),
        })
    }

    pub fn out_dim(&self) -> usize {
        self.proj.value.ncols()
    }

    pub fn forward(&self, patches: &Mat) -> (Array1<f64>, OverheadCache) {
        let emb = self.patch.forward(patches);
        let mut tokens = Mat::zeros((emb.nrows() + 1, self.config.width));
        tokens.row_mut(0).assign(&self.cls.value.row(0));
        tokens.slice_mut(s![1.., ..]).assign(&emb);
        tokens += &self.pos.value;
        let (mut h, ln_pre) = self.ln_pre.forward(&tokens);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, c) = b.forward(&h);
            h = next;
            blocks.push(c);
        }
        let cls = h.slice(s![0..1, ..]).to_owned();
        let (pooled, ln_post) = self.ln_post.forward(&cls);
        let out = pooled.dot(&self.proj.value).index_axis_move(Axis(0), 0);
        (
            out,
            OverheadCache {
                patches: patches.clone(),
                ln_pre,
                blocks,
                ln_post,
                pooled,
            },
        )
    }

    pub fn backward(&mut self, cache: &OverheadCache, d_out: &Array1<f64>) {
        let d_out = d_out.view().insert_axis(Axis(0));
        self.proj.grad += &cache.pooled.t().dot(&d_out);
        let d_pooled = d_out.dot(&self.proj.value.t());
        let d_cls = self.ln_post.backward(&cache.ln_post, &d_pooled);
        let mut dh = Mat::zeros((self.config.num_patches() + 1, self.config.width));
        dh.row_mut(0).assign(&d_cls.row(0));
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks).rev() {
            dh = b.backward(c, &dh);
        }
        let d_tokens = self.ln_pre.backward(&cache.ln_pre, &dh);
        self.pos.grad += &d_tokens;
        {
            let mut g = self.cls.grad.row_mut(0);
            g += &d_tokens.row(0);
        }
        let d_emb = d_tokens.slice(s![1.., ..]).to_owned();
        self.patch.backward(&cache.patches, &d_emb);
    }
}

impl Module for OverheadEncoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param)) {
        self.patch.visit(&join(prefix, "patch"), f);
        f(&join(prefix, "cls"), &self.cls);
        f(&join(prefix, "pos"), &self.pos);
        self.ln_pre.visit(&join(prefix, "ln_pre"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_post.visit(&join(prefix, "ln_post"), f);
        f(&join(prefix, "proj"), &self.proj);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.patch.visit_mut(&join(prefix, "patch"), f);
        f(&join(prefix, "cls"), &mut self.cls);
        f(&join(prefix, "pos"), &mut self.pos);
        self.ln_pre.visit_mut(&join(prefix, "ln_pre"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("blocks.{i}")), f);
        }
        self.ln_post.visit_mut(&join(prefix, "ln_post"), f);
        f(&join(prefix, "proj"), &mut self.proj);
    }
}
