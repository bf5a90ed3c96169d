//! Dataset manifests, image/mask loading, geometric augmentation, and the
//! synthetic shapes generator used for desk-scale training.
//!
//! Augmentation applies one combined affine transform (flips, rotation,
//! isotropic scale, translation) sampled once and used for both image
//! (bilinear) and mask (nearest), so pixel correspondence is exact. Gaussian
//! blur touches the image only. Every item gets its own rng stream derived
//! from the manifest seed and the item index, so parallel loading order can
//! never change results.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::SegmentationMask;
use crate::ops;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    /// `palette[c]` is the 8-bit mask pixel value of class `c`.
    pub palette: Vec<u8>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let manifest: Self = serde_json::from_slice(&fs::read(path)?)?;
        if manifest.palette.is_empty() {
            return Err(Error::Data("manifest palette is empty".into()));
        }
        let unique: BTreeSet<u8> = manifest.palette.iter().copied().collect();
        if unique.len() != manifest.palette.len() {
            return Err(Error::Data("manifest palette has duplicate values".into()));
        }
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn class_of(&self, value: u8) -> Result<u32> {
        self.palette
            .iter()
            .position(|&v| v == value)
            .map(|c| c as u32)
            .ok_or_else(|| Error::Data(format!("mask value {} not in palette", value)))
    }

    /// Rng stream for one item, independent of loading order.
    pub fn item_rng(&self, index: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(index as u64 + 1)))
    }
}

/// Deterministic 0.8/0.1/0.1 split assignment over shuffled indices.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let n_train = (n as f64 * 0.8).round() as usize;
    let n_val = (n as f64 * 0.1).round() as usize;
    let mut splits = vec![Split::Test; n];
    for (rank, &idx) in order.iter().enumerate() {
        splits[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

/// Nearest-neighbour resize for label masks (no label invention).
pub fn resize_mask_nearest(labels: &[u32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u32> {
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let si = ((i as f64 + 0.5) * h as f64 / oh as f64) as usize;
        let si = si.min(h - 1);
        for j in 0..ow {
            let sj = (((j as f64 + 0.5) * w as f64 / ow as f64) as usize).min(w - 1);
            out.push(labels[si * w + sj]);
        }
    }
    out
}

/// Load one image/mask pair: image bilinear-resized to `target` and scaled to
/// [0,1] as `[3, H, W]`; mask nearest-resized and palette-mapped.
pub fn load_pair<T: Element>(
    manifest: &DatasetManifest,
    entry: &ManifestEntry,
    target: Option<(usize, usize)>,
) -> Result<(Tensor<T>, SegmentationMask)> {
    let img = image::open(&entry.image)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", entry.image.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = T::from_f64(p.0[c] as f64 / 255.0);
        }
    }
    let mut image = Tensor::new(vec![1, 3, h, w], data)?;
    let (th, tw) = target.unwrap_or((h, w));
    if (th, tw) != (h, w) {
        image = ops::bilinear_resize(&image, th, tw)?;
    }
    let image = image.reshape(vec![3, th, tw])?;

    let mask_img = image::open(&entry.mask)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", entry.mask.display())))?
        .to_luma8();
    let (mw, mh) = (mask_img.width() as usize, mask_img.height() as usize);
    let labels: Vec<u32> = mask_img
        .pixels()
        .map(|p| manifest.class_of(p.0[0]))
        .collect::<Result<_>>()?;
    let labels = if (mh, mw) == (th, tw) {
        labels
    } else {
        resize_mask_nearest(&labels, mh, mw, th, tw)
    };
    Ok((image, SegmentationMask::new(th, tw, labels)?))
}

/// One sampled augmentation: a combined affine map plus optional blur.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub hflip: bool,
    pub vflip: bool,
    /// Degrees, counter-clockwise.
    pub angle_deg: f64,
    pub scale: f64,
    /// Pixels, (rows, cols).
    pub translate: (f64, f64),
    pub blur_sigma: Option<f64>,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            hflip: false,
            vflip: false,
            angle_deg: 0.0,
            scale: 1.0,
            translate: (0.0, 0.0),
            blur_sigma: None,
        }
    }

    pub fn is_identity(&self) -> bool {
        self == &Self::identity()
    }
}

/// Draw augmentation parameters with the training-time probabilities:
/// flips p=0.5 each, rotation U(-30, 30) p=0.5, scale U(0.9, 1.1) p=0.5,
/// translation U(-10%, 10%) of extent p=0.5, blur p=0.2 sigma U(0.1, 1.5).
pub fn sample_augment(rng: &mut impl Rng, h: usize, w: usize) -> AugmentParams {
    let mut p = AugmentParams::identity();
    p.hflip = rng.gen_bool(0.5);
    p.vflip = rng.gen_bool(0.5);
    if rng.gen_bool(0.5) {
        p.angle_deg = rng.gen_range(-30.0..30.0);
    }
    if rng.gen_bool(0.5) {
        p.scale = rng.gen_range(0.9..1.1);
    }
    if rng.gen_bool(0.5) {
        p.translate = (
            rng.gen_range(-0.1..0.1) * h as f64,
            rng.gen_range(-0.1..0.1) * w as f64,
        );
    }
    if rng.gen_bool(0.2) {
        p.blur_sigma = Some(rng.gen_range(0.1..1.5));
    }
    p
}

// Inverse of the forward map p' = R S F (p - c) + c + t, used to pull source
// coordinates for each output pixel. Returns None outside the source frame.
fn inverse_map(params: &AugmentParams, h: usize, w: usize) -> impl Fn(f64, f64) -> (f64, f64) {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let theta = params.angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let s = params.scale;
    let fy = if params.vflip { -1.0 } else { 1.0 };
    let fx = if params.hflip { -1.0 } else { 1.0 };
    let (ty, tx) = params.translate;
    move |oy: f64, ox: f64| {
        // undo translation and centering
        let dy = oy - cy - ty;
        let dx = ox - cx - tx;
        // undo rotation (x east, y south: clockwise matrix inverts ccw here)
        let ry = cos * dy + sin * dx;
        let rx = -sin * dy + cos * dx;
        // undo scale and flips
        (fy * ry / s + cy, fx * rx / s + cx)
    }
}

fn bilinear_at<T: Element>(plane: &[T], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
        return 0.0;
    }
    let y0 = y.floor();
    let x0 = x.floor();
    let (wy, wx) = (y - y0, x - x0);
    let at = |i: f64, j: f64| -> f64 {
        if i < 0.0 || j < 0.0 || i >= h as f64 || j >= w as f64 {
            0.0
        } else {
            plane[i as usize * w + j as usize].to_f64()
        }
    };
    at(y0, x0) * (1.0 - wy) * (1.0 - wx)
        + at(y0, x0 + 1.0) * (1.0 - wy) * wx
        + at(y0 + 1.0, x0) * wy * (1.0 - wx)
        + at(y0 + 1.0, x0 + 1.0) * wy * wx
}

fn gaussian_blur<T: Element>(image: &Tensor<T>, sigma: f64) -> Result<Tensor<T>> {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let src = image.data();
    // horizontal then vertical pass, edge-clamped
    let mut tmp = vec![0.0f64; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let jj = (j as i64 + ki as i64 - radius).clamp(0, w as i64 - 1) as usize;
                    acc += k * src[ch * h * w + i * w + jj].to_f64();
                }
                tmp[ch * h * w + i * w + j] = acc;
            }
        }
    }
    let mut out = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let ii = (i as i64 + ki as i64 - radius).clamp(0, h as i64 - 1) as usize;
                    acc += k * tmp[ch * h * w + ii * w + j];
                }
                out[ch * h * w + i * w + j] = T::from_f64(acc);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Apply sampled augmentation parameters to an image `[C, H, W]` and its
/// mask. Out-of-frame regions fill with 0 / background.
pub fn apply_augment<T: Element>(
    image: &Tensor<T>,
    mask: &SegmentationMask,
    params: &AugmentParams,
) -> Result<(Tensor<T>, SegmentationMask)> {
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    if (mask.h, mask.w) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "image {}x{} vs mask {}x{}",
            h, w, mask.h, mask.w
        )));
    }
    let geometric = params.hflip
        || params.vflip
        || params.angle_deg != 0.0
        || params.scale != 1.0
        || params.translate != (0.0, 0.0);
    let (mut img, mut labels) = if geometric {
        let inv = inverse_map(params, h, w);
        let mut img = vec![T::zero(); c * h * w];
        let mut labels = vec![0u32; h * w];
        for i in 0..h {
            for j in 0..w {
                let (sy, sx) = inv(i as f64, j as f64);
                for ch in 0..c {
                    let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
                    img[ch * h * w + i * w + j] = T::from_f64(bilinear_at(plane, h, w, sy, sx));
                }
                let (ni, nj) = (sy.round(), sx.round());
                if ni >= 0.0 && nj >= 0.0 && ni < h as f64 && nj < w as f64 {
                    labels[i * w + j] = mask.labels[ni as usize * w + nj as usize];
                }
            }
        }
        (Tensor::new(vec![c, h, w], img)?, labels)
    } else {
        (image.clone(), mask.labels.clone())
    };
    if let Some(sigma) = params.blur_sigma {
        img = gaussian_blur(&img, sigma)?;
    }
    let labels = std::mem::take(&mut labels);
    Ok((img, SegmentationMask::new(h, w, labels)?))
}

/// Sample and apply one augmentation from `rng`.
pub fn augment<T: Element>(
    image: &Tensor<T>,
    mask: &SegmentationMask,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, SegmentationMask)> {
    let params = sample_augment(rng, mask.h, mask.w);
    apply_augment(image, mask, &params)
}

/// Write `n` synthetic images (random ellipse or rectangle on textured noise)
/// with exact masks and a 0.8/0.1/0.1 manifest under `out_dir`.
pub fn synth_shapes(n: usize, size: usize, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    if n == 0 || size == 0 {
        return Err(Error::InvalidArgument("synth_shapes needs n >= 1 and size >= 1".into()));
    }
    fs::create_dir_all(out_dir)?;
    let splits = assign_splits(n, seed);
    let mut entries = Vec::with_capacity(n);
    for idx in 0..n {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(idx as u64 + 1)));
        let (image, mask) = synth_one(size, &mut rng);
        let image_path = out_dir.join(format!("img_{idx:04}.png"));
        let mask_path = out_dir.join(format!("mask_{idx:04}.png"));
        let mut rgb = image::RgbImage::new(size as u32, size as u32);
        for (x, y, p) in rgb.enumerate_pixels_mut() {
            let at = |c: usize| {
                (image[c * size * size + y as usize * size + x as usize] * 255.0).round() as u8
            };
            *p = image::Rgb([at(0), at(1), at(2)]);
        }
        rgb.save(&image_path)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", image_path.display())))?;
        let mut gray = image::GrayImage::new(size as u32, size as u32);
        for (x, y, p) in gray.enumerate_pixels_mut() {
            *p = image::Luma([if mask[y as usize * size + x as usize] != 0 { 255 } else { 0 }]);
        }
        gray.save(&mask_path)
            .map_err(|e| Error::Data(format!("cannot write {}: {e}", mask_path.display())))?;
        entries.push(ManifestEntry { image: image_path, mask: mask_path, split: splits[idx] });
    }
    let manifest = DatasetManifest { seed, palette: vec![0, 255], entries };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

// One synthetic sample: values in [0,1] as flat [3, size, size], binary mask.
fn synth_one(size: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u32>) {
    let s = size as f64;
    // textured background: low-frequency gradient plus per-pixel noise
    let base: [f64; 3] = [rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5), rng.gen_range(0.1..0.5)];
    let grad: [f64; 3] = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
    let fg: [f64; 3] = [rng.gen_range(0.6..0.95), rng.gen_range(0.6..0.95), rng.gen_range(0.6..0.95)];
    // shape: ellipse or rectangle, extent bounded away from degenerate sizes
    let is_ellipse = rng.gen_bool(0.5);
    let cy = rng.gen_range(0.3 * s..0.7 * s);
    let cx = rng.gen_range(0.3 * s..0.7 * s);
    let ry = rng.gen_range(0.12 * s..0.28 * s);
    let rx = rng.gen_range(0.12 * s..0.28 * s);
    let mut mask = vec![0u32; size * size];
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let inside = if is_ellipse {
                (dy / ry).powi(2) + (dx / rx).powi(2) <= 1.0
            } else {
                dy.abs() <= ry && dx.abs() <= rx
            };
            if inside {
                mask[i * size + j] = 1;
            }
        }
    }
    let mut image = vec![0.0f64; 3 * size * size];
    for i in 0..size {
        for j in 0..size {
            let noise = rng.gen_range(-0.05..0.05);
            for c in 0..3 {
                let v = if mask[i * size + j] != 0 {
                    fg[c] + noise
                } else {
                    base[c] + grad[c] * (i + j) as f64 / (2.0 * s) + noise
                };
                image[c * size * size + i * size + j] = v.clamp(0.0, 1.0);
            }
        }
    }
    (image, mask)
}
