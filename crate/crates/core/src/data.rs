//! Image I/O and preprocessing: 8-bit rasters, PNG/PGM/PPM loading,
//! Catmull-Rom bicubic resizing, intensity normalization, and the
//! deterministic train/validation/test split.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, ImageReader, Luma, Rgb};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// An 8-bit image: `channels` is 1 (grayscale) or 3 (RGB), samples are
/// row-major and channel-interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    samples: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize, samples: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Validation(format!(
                "raster dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::Validation(format!(
                "raster must have 1 or 3 channels, got {channels}"
            )));
        }
        if samples.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "raster {width}x{height}x{channels} needs {} samples, got {}",
                width * height * channels,
                samples.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            samples,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.samples[(y * self.width + x) * self.channels + c]
    }

    /// True when every sample is 0 or 255.
    pub fn is_binary(&self) -> bool {
        self.samples.iter().all(|&v| v == 0 || v == 255)
    }
}

/// One labeled example: image and its binary mask, same dimensions.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub id: String,
    pub image: Raster,
    pub mask: Raster,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, image: Raster, mask: Raster) -> Result<Self> {
        let id = id.into();
        if mask.channels() != 1 {
            return Err(Error::Validation(format!(
                "mask for {id:?} must be single-channel, got {}",
                mask.channels()
            )));
        }
        if mask.width() != image.width() || mask.height() != image.height() {
            return Err(Error::Validation(format!(
                "mask for {id:?} is {}x{}, image is {}x{}",
                mask.width(),
                mask.height(),
                image.width(),
                image.height()
            )));
        }
        if !mask.is_binary() {
            return Err(Error::Validation(format!(
                "mask for {id:?} contains values other than 0 and 255"
            )));
        }
        Ok(ImageSample { id, image, mask })
    }
}

fn scale16(v: u16) -> u8 {
    // 16-bit samples map onto 0..=255 by dividing by 257 (65535 / 255)
    // and rounding; no product of the form k*257 + 128.5 exists, so
    // round-to-nearest is unambiguous.
    (v as f64 / 257.0).round() as u8
}

fn strip_alpha(raw: Vec<u8>, stride: usize) -> Vec<u8> {
    raw.chunks_exact(stride)
        .flat_map(|px| px[..stride - 1].to_vec())
        .collect()
}

/// Load a PNG, PGM, or PPM file. Alpha channels are dropped; 16-bit
/// samples are scaled to 8 bits.
pub fn load_raster(path: &Path) -> Result<Raster> {
    let reader = ImageReader::open(path)?
        .with_guessed_format()
        .map_err(Error::Io)?;
    let img = reader
        .decode()
        .map_err(|e| Error::Format(format!("cannot decode {}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, samples) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageLumaA8(b) => (1, strip_alpha(b.into_raw(), 2)),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        DynamicImage::ImageRgba8(b) => (3, strip_alpha(b.into_raw(), 4)),
        DynamicImage::ImageLuma16(b) => {
            (1, b.into_raw().into_iter().map(scale16).collect())
        }
        DynamicImage::ImageLumaA16(b) => {
            let raw: Vec<u8> = b.into_raw().into_iter().map(scale16).collect();
            (1, strip_alpha(raw, 2))
        }
        DynamicImage::ImageRgb16(b) => (3, b.into_raw().into_iter().map(scale16).collect()),
        DynamicImage::ImageRgba16(b) => {
            let raw: Vec<u8> = b.into_raw().into_iter().map(scale16).collect();
            (3, strip_alpha(raw, 4))
        }
        other => {
            return Err(Error::Format(format!(
                "unsupported pixel format {:?} in {}",
                other.color(),
                path.display()
            )))
        }
    };
    Raster::new(w, h, channels, samples)
}

/// Write a raster as PNG.
pub fn save_raster_png(r: &Raster, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let (w, h) = (r.width() as u32, r.height() as u32);
    let result = match r.channels() {
        1 => ImageBuffer::<Luma<u8>, _>::from_raw(w, h, r.samples().to_vec())
            .expect("raster invariant")
            .save_with_format(path, ImageFormat::Png),
        _ => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, r.samples().to_vec())
            .expect("raster invariant")
            .save_with_format(path, ImageFormat::Png),
    };
    result.map_err(|e| Error::Format(format!("cannot write {}: {e}", path.display())))
}

/// Catmull-Rom cubic kernel (the a = -0.5 member of the bicubic family).
fn cubic_kernel(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        (1.5 * t - 2.5) * t * t + 1.0
    } else if t < 2.0 {
        ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    } else {
        0.0
    }
}

/// Tap indices (edge-clamped) and weights for one output coordinate.
fn taps(out: usize, src_len: usize, dst_len: usize) -> ([usize; 4], [f64; 4]) {
    let scale = src_len as f64 / dst_len as f64;
    let sx = (out as f64 + 0.5) * scale - 0.5;
    let base = sx.floor();
    let f = sx - base;
    let base = base as isize;
    let mut idx = [0usize; 4];
    let mut wgt = [0f64; 4];
    for j in 0..4 {
        let i = base - 1 + j as isize;
        idx[j] = i.clamp(0, src_len as isize - 1) as usize;
        wgt[j] = cubic_kernel(f + 1.0 - j as f64);
    }
    (idx, wgt)
}

/// Bicubic (Catmull-Rom) resize with pixel-center alignment and edge
/// clamping, separable passes in f64, rounded and clamped back to u8.
/// Resizing to the source size reproduces the input exactly.
pub fn resize_bicubic(r: &Raster, tw: usize, th: usize) -> Result<Raster> {
    if tw == 0 || th == 0 {
        return Err(Error::Validation(format!(
            "target dimensions must be positive, got {tw}x{th}"
        )));
    }
    let (sw, sh, c) = (r.width(), r.height(), r.channels());

    // Horizontal pass: sh rows of tw pixels.
    let mut mid = vec![0f64; sh * tw * c];
    for ox in 0..tw {
        let (idx, wgt) = taps(ox, sw, tw);
        for y in 0..sh {
            for ch in 0..c {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += wgt[j] * r.samples()[(y * sw + idx[j]) * c + ch] as f64;
                }
                mid[(y * tw + ox) * c + ch] = acc;
            }
        }
    }

    // Vertical pass: th rows of tw pixels.
    let mut out = vec![0u8; th * tw * c];
    for oy in 0..th {
        let (idx, wgt) = taps(oy, sh, th);
        for x in 0..tw {
            for ch in 0..c {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += wgt[j] * mid[(idx[j] * tw + x) * c + ch];
                }
                out[(oy * tw + x) * c + ch] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    Raster::new(tw, th, c, out)
}

/// Resize a binary mask: same kernel as images, then re-binarized with
/// threshold 128 (values >= 128 become 255).
pub fn resize_mask(r: &Raster, tw: usize, th: usize) -> Result<Raster> {
    if r.channels() != 1 {
        return Err(Error::Validation("masks must be single-channel".into()));
    }
    let mut resized = resize_bicubic(r, tw, th)?;
    for v in resized.samples.iter_mut() {
        *v = if *v >= 128 { 255 } else { 0 };
    }
    Ok(resized)
}

/// How pixel intensities map into `[0, 1]`.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// `(v - lo) / (hi - lo)`, clamped; `lo`/`hi` come from training data.
    MinMax,
    /// Plain `v / 255` per channel.
    Rgb255,
}

/// Which pixels the min-max statistics are computed over.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormRoi {
    WholeImage,
    /// Only pixels under the foreground mask.
    ForegroundMask,
}

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    pub mode: NormMode,
    pub lo: f64,
    pub hi: f64,
}

/// Derive normalization parameters from training samples: grayscale data
/// gets dataset-wide min-max over `roi`, RGB data a fixed 1/255 scaling.
pub fn compute_norm_params(samples: &[ImageSample], roi: NormRoi) -> Result<NormalizationParams> {
    if samples.is_empty() {
        return Err(Error::Validation(
            "cannot derive normalization from an empty split".into(),
        ));
    }
    let channels = samples[0].image.channels();
    if samples.iter().any(|s| s.image.channels() != channels) {
        return Err(Error::Validation(
            "samples mix grayscale and RGB images".into(),
        ));
    }
    if channels == 3 {
        return Ok(NormalizationParams {
            mode: NormMode::Rgb255,
            lo: 0.0,
            hi: 255.0,
        });
    }
    let mut lo = u8::MAX;
    let mut hi = u8::MIN;
    let mut seen = false;
    for s in samples {
        for y in 0..s.image.height() {
            for x in 0..s.image.width() {
                if roi == NormRoi::ForegroundMask && s.mask.get(x, y, 0) == 0 {
                    continue;
                }
                let v = s.image.get(x, y, 0);
                lo = lo.min(v);
                hi = hi.max(v);
                seen = true;
            }
        }
    }
    if !seen {
        return Err(Error::Validation(
            "foreground ROI is empty across all samples".into(),
        ));
    }
    if lo == hi {
        return Err(Error::Validation(format!(
            "degenerate intensity range: every pixel is {lo}"
        )));
    }
    Ok(NormalizationParams {
        mode: NormMode::MinMax,
        lo: lo as f64,
        hi: hi as f64,
    })
}

/// Map a raster into a `[C, H, W]` tensor of `[0, 1]` floats.
pub fn normalize(r: &Raster, p: &NormalizationParams) -> Result<Tensor<f32>> {
    let (w, h, c) = (r.width(), r.height(), r.channels());
    let mut data = vec![0f32; c * h * w];
    match p.mode {
        NormMode::MinMax => {
            if !(p.hi > p.lo) {
                return Err(Error::Validation(format!(
                    "min-max range [{}, {}] is degenerate",
                    p.lo, p.hi
                )));
            }
            let span = p.hi - p.lo;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = (r.get(x, y, ch) as f64 - p.lo) / span;
                        data[(ch * h + y) * w + x] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
        NormMode::Rgb255 => {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data[(ch * h + y) * w + x] = r.get(x, y, ch) as f32 / 255.0;
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// Mask raster -> `[H, W]`-flattened 0/1 floats (foreground = 1).
pub fn mask_to_float(mask: &Raster) -> Vec<f32> {
    mask.samples()
        .iter()
        .map(|&v| if v >= 128 { 1.0 } else { 0.0 })
        .collect()
}

/// The three disjoint subsets a dataset is partitioned into.
#[derive(Clone, Debug)]
pub struct SplitSets {
    pub train: Vec<ImageSample>,
    pub validation: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

/// Shuffle with a seeded generator, then carve off 25% (rounded down) for
/// test and 10% of the remainder (rounded down, at least 1) for
/// validation; the rest trains. Needs at least 4 samples so every subset
/// is non-empty.
pub fn split_dataset(mut samples: Vec<ImageSample>, seed: u64) -> Result<SplitSets> {
    let n = samples.len();
    if n < 4 {
        return Err(Error::Validation(format!(
            "need at least 4 samples to split, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    samples.shuffle(&mut rng);
    let n_test = n / 4;
    let rest = n - n_test;
    let n_val = (rest / 10).max(1);
    let test = samples.split_off(n - n_test);
    let validation = samples.split_off(samples.len() - n_val);
    Ok(SplitSets {
        train: samples,
        validation,
        test,
    })
}

/// Load a dataset directory:
///
/// ```text
/// dir/images/<id>.png|pgm|ppm
/// dir/masks/<id>.png
/// ```
///
/// Every image must have a mask of the same size; results are sorted by id.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<ImageSample>> {
    let images = dir.join("images");
    let masks = dir.join("masks");
    if !images.is_dir() || !masks.is_dir() {
        return Err(Error::Validation(format!(
            "{} must contain images/ and masks/ directories",
            dir.display()
        )));
    }
    let mut by_id: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in std::fs::read_dir(&images)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("png" | "pgm" | "ppm")) {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Validation(format!("unusable file name {}", path.display())))?
            .to_string();
        if by_id.insert(id.clone(), path).is_some() {
            return Err(Error::Validation(format!(
                "duplicate image id {id:?} (multiple extensions?)"
            )));
        }
    }
    if by_id.is_empty() {
        return Err(Error::Validation(format!(
            "no images found under {}",
            images.display()
        )));
    }
    let mut samples = Vec::with_capacity(by_id.len());
    for (id, img_path) in by_id {
        let mask_path = masks.join(format!("{id}.png"));
        if !mask_path.is_file() {
            return Err(Error::Validation(format!(
                "image {id:?} has no mask at {}",
                mask_path.display()
            )));
        }
        let image = load_raster(&img_path)?;
        let mask = load_raster(&mask_path)?;
        samples.push(ImageSample::new(id, image, mask)?);
    }
    Ok(samples)
}

/// Write samples in the directory layout `load_dataset_dir` reads.
pub fn write_dataset_dir(samples: &[ImageSample], dir: &Path) -> Result<()> {
    for s in samples {
        save_raster_png(&s.image, &dir.join("images").join(format!("{}.png", s.id)))?;
        save_raster_png(&s.mask, &dir.join("masks").join(format!("{}.png", s.id)))?;
    }
    Ok(())
}
