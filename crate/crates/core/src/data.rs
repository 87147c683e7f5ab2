//! IDX ingestion, splits, augmentation, affNist-style generation and batching.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, dim_err, Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const MNIST_SIDE: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Images `[N, 1, H, W]` in `[0, 1]` with their class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: Split) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(dim_err!("dataset images must be [N, 1, H, W], got {shape:?}"));
        }
        if shape[0] != labels.len() {
            return Err(dim_err!("{} images but {} labels", shape[0], labels.len()));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(contract_err!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.images.shape()[3]
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Pixels of image `i`.
    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Count of each label in `0..num_classes`.
    pub fn label_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &l in &self.labels {
            if l < num_classes {
                h[l] += 1;
            }
        }
        h
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= num_classes) {
            Some(l) => Err(contract_err!("label {l} out of range for {num_classes} classes")),
            None => Ok(()),
        }
    }

    /// Images and labels at `indices`, in that order.
    pub fn select(&self, indices: &[usize], split: Split) -> Self {
        let n = self.height() * self.width();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let images = Tensor::new(&[indices.len(), 1, self.height(), self.width()], data).expect("consistent shape");
        Self {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split,
        }
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx, self.split)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("file ends before the {what} field"),
        }),
    }
}

/// Decodes an IDX image file: `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let need = n * rows * cols;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated image data: header declares {need} pixel bytes, {} present", body.len()),
        });
    }
    Ok((n, rows, cols, &body[..need]))
}

/// Decodes an IDX label file.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            message: format!("truncated label data: header declares {n} labels, {} present", body.len()),
        });
    }
    Ok(&body[..n])
}

/// Reads an IDX image/label pair (optionally gzip-compressed); pixel bytes
/// are divided by 255.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images_path.as_ref())?;
    let lbl_bytes = read_maybe_gz(labels_path.as_ref())?;
    let (n, rows, cols, pixels) = parse_idx_images(&img_bytes)?;
    let labels = parse_idx_labels(&lbl_bytes)?;
    if labels.len() != n {
        return Err(Error::Format {
            offset: 4,
            message: format!("label file declares {} labels, image file {n} images", labels.len()),
        });
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let images = Tensor::new(&[n, 1, rows, cols], data)?;
    Dataset::new(images, labels.iter().map(|&l| l as usize).collect(), Split::Train)
}

/// Image/label paths of the `prefix` set (`train` or `t10k`) in `dir`,
/// preferring uncompressed files.
pub fn idx_paths(dir: &Path, prefix: &str) -> Result<(PathBuf, PathBuf)> {
    let find = |kind: &str| -> Result<PathBuf> {
        let base = dir.join(format!("{prefix}-{kind}"));
        let gz = dir.join(format!("{prefix}-{kind}.gz"));
        if base.is_file() {
            Ok(base)
        } else if gz.is_file() {
            Ok(gz)
        } else {
            Err(Error::io(
                base,
                std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (also tried .gz)"),
            ))
        }
    };
    Ok((find("images-idx3-ubyte")?, find("labels-idx1-ubyte")?))
}

/// Disjoint, seed-determined train/validation split.
pub fn split_train_val(ds: &Dataset, n_train: usize, n_val: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_train + n_val > ds.len() {
        return Err(contract_err!(
            "cannot split {} examples into {n_train} train and {n_val} validation",
            ds.len()
        ));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((
        ds.select(&idx[..n_train], Split::Train),
        ds.select(&idx[n_train..n_train + n_val], Split::Val),
    ))
}

/// Shifts each image of `[B, C, H, W]` by an integer offset drawn uniformly
/// from `[-max_px, max_px]` on both axes, filling with zeros.
pub fn translate_batch<R: Rng + ?Sized>(batch: &Tensor, max_px: usize, rng: &mut R) -> Result<Tensor> {
    let [b, c, h, w] = *batch.shape() else {
        return Err(dim_err!("translate_batch expects [B, C, H, W], got {:?}", batch.shape()));
    };
    if max_px >= h.min(w) {
        return Err(contract_err!("shift {max_px} px is not smaller than the {h}x{w} frame"));
    }
    if max_px == 0 {
        return Ok(batch.clone());
    }
    let m = max_px as i64;
    let mut out = vec![0.0; batch.len()];
    let src = batch.data();
    for bi in 0..b {
        let dy = rng.gen_range(-m..=m);
        let dx = rng.gen_range(-m..=m);
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            for y in 0..h as i64 {
                let sy = y - dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for x in 0..w as i64 {
                    let sx = x - dx;
                    if sx >= 0 && sx < w as i64 {
                        out[base + (y as usize) * w + x as usize] = src[base + (sy as usize) * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(batch.shape(), out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Random translation of training batches, in pixels.
    pub translate_px: usize,
    /// Shift range of the affNist-style generator, in pixels.
    pub affnist_shift_px: usize,
    /// Side of the zero-padded affNist-style frame.
    pub pad_to: usize,
    pub rotation_deg: f64,
    pub shear: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            translate_px: 2,
            affnist_shift_px: 5,
            pad_to: 40,
            rotation_deg: 15.0,
            shear: 0.15,
            scale_min: 0.8,
            scale_max: 1.2,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pad_to < MNIST_SIDE {
            return Err(config_err!("pad_to {} is smaller than the {MNIST_SIDE}px source", self.pad_to));
        }
        if !(self.rotation_deg >= 0.0 && self.shear >= 0.0) {
            return Err(config_err!("rotation and shear ranges must be non-negative"));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max) {
            return Err(config_err!(
                "scale range must satisfy 0 < min <= max, got {}..{}",
                self.scale_min,
                self.scale_max
            ));
        }
        Ok(())
    }
}

/// Affine map about the frame centre: rotate, shear along x, scale, then
/// translate by `(tx, ty)` pixels (positive `tx` moves content right).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineParams {
    pub angle_deg: f64,
    pub shear: f64,
    pub scale: f64,
    pub tx: f64,
    pub ty: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        angle_deg: 0.0,
        shear: 0.0,
        scale: 1.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { tx, ty, ..Self::IDENTITY }
    }

    /// Row-major 2x2 linear part acting on `(x, y)`.
    fn matrix(&self) -> [f64; 4] {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        // R * Shear, scaled
        let k = self.shear;
        let a = [c, c * k - s, s, s * k + c];
        a.map(|v| v * self.scale)
    }
}

fn bilinear(src: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let px = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            src[yy as usize * w + xx as usize]
        }
    };
    let top = px(y0, x0) * (1.0 - fx) + if fx > 0.0 { px(y0, x0 + 1.0) * fx } else { 0.0 };
    if fy == 0.0 {
        return top;
    }
    let bottom = px(y0 + 1.0, x0) * (1.0 - fx) + if fx > 0.0 { px(y0 + 1.0, x0 + 1.0) * fx } else { 0.0 };
    top * (1.0 - fy) + bottom * fy
}

/// Centres an `h x w` image in an `out x out` zero frame and resamples it
/// under `params` with bilinear interpolation.
pub fn affine_warp(src: &[f64], h: usize, w: usize, out: usize, params: &AffineParams) -> Vec<f64> {
    let [a, b, c, d] = params.matrix();
    let det = a * d - b * c;
    let inv = [d / det, -b / det, -c / det, a / det];
    let centre = (out as f64 - 1.0) / 2.0;
    let (oy, ox) = ((out - h) as f64 / 2.0, (out - w) as f64 / 2.0);
    let mut dst = vec![0.0; out * out];
    for y in 0..out {
        for x in 0..out {
            let u = x as f64 - centre - params.tx;
            let v = y as f64 - centre - params.ty;
            let sx = inv[0] * u + inv[1] * v + centre - ox;
            let sy = inv[2] * u + inv[3] * v + centre - oy;
            dst[y * out + x] = bilinear(src, h, w, sy, sx).clamp(0.0, 1.0);
        }
    }
    dst
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffnistVariant {
    /// Integer shifts within the configured range only.
    Train,
    /// Rotation, shear, scale and sub-pixel translation.
    Test,
}

/// Draws the transform for one image.
pub fn sample_affine<R: Rng + ?Sized>(cfg: &AugmentConfig, variant: AffnistVariant, rng: &mut R) -> AffineParams {
    let s = cfg.affnist_shift_px as f64;
    match variant {
        AffnistVariant::Train => {
            let m = cfg.affnist_shift_px as i64;
            AffineParams::translation(rng.gen_range(-m..=m) as f64, rng.gen_range(-m..=m) as f64)
        }
        AffnistVariant::Test => AffineParams {
            angle_deg: rng.gen_range(-cfg.rotation_deg..=cfg.rotation_deg),
            shear: rng.gen_range(-cfg.shear..=cfg.shear),
            scale: rng.gen_range(cfg.scale_min..=cfg.scale_max),
            tx: rng.gen_range(-s..=s),
            ty: rng.gen_range(-s..=s),
        },
    }
}

/// Pads each 28x28 image to `cfg.pad_to` and applies a random affine map
/// drawn from `ChaCha8(seed)`; labels are copied unchanged.
pub fn make_affnist_style(ds: &Dataset, cfg: &AugmentConfig, variant: AffnistVariant, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if ds.height() != MNIST_SIDE || ds.width() != MNIST_SIDE {
        return Err(contract_err!(
            "affNist-style generation needs {MNIST_SIDE}x{MNIST_SIDE} sources, got {}x{}",
            ds.height(),
            ds.width()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = cfg.pad_to;
    let mut data = Vec::with_capacity(ds.len() * out * out);
    for i in 0..ds.len() {
        let params = sample_affine(cfg, variant, &mut rng);
        data.extend(affine_warp(ds.image(i), MNIST_SIDE, MNIST_SIDE, out, &params));
    }
    let images = Tensor::new(&[ds.len(), 1, out, out], data)?;
    Dataset::new(images, ds.labels().to_vec(), ds.split())
}

/// Centres each image in a `side x side` zero frame.
pub fn pad_centered(ds: &Dataset, side: usize) -> Result<Dataset> {
    if side < ds.height() || side < ds.width() {
        return Err(contract_err!("cannot pad {}x{} images to {side}", ds.height(), ds.width()));
    }
    let mut data = Vec::with_capacity(ds.len() * side * side);
    for i in 0..ds.len() {
        data.extend(affine_warp(ds.image(i), ds.height(), ds.width(), side, &AffineParams::IDENTITY));
    }
    let images = Tensor::new(&[ds.len(), 1, side, side], data)?;
    Dataset::new(images, ds.labels().to_vec(), ds.split())
}

/// Iterator over `(images [b, 1, H, W], labels)` mini-batches.
pub struct Batches<'a> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let chunk = self.ds.select(&self.order[self.pos..end], self.ds.split);
        self.pos = end;
        Some((chunk.images, chunk.labels))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Mini-batches covering every example once; the order is the source order
/// or a shuffle determined by `seed`.
pub fn batches(ds: &Dataset, batch_size: usize, shuffle: bool, seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(contract_err!("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches {
        ds,
        order,
        batch_size,
        pos: 0,
    })
}
