//! Synthetic segmentation data: bright ellipses on a darker textured
//! background. The multi-scale flavor puts one large and several small
//! blobs in each image, so a model must handle objects at very different
//! scales to score well.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{ImageSample, Raster};
use crate::error::{Error, Result};

struct Ellipse {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Ellipse {
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.ax;
        let dy = (y as f64 + 0.5 - self.cy) / self.ay;
        dx * dx + dy * dy <= 1.0
    }

    fn radius(&self) -> f64 {
        self.ax.max(self.ay)
    }

    fn clear_of(&self, others: &[Ellipse], gap: f64) -> bool {
        others.iter().all(|o| {
            let d = ((self.cx - o.cx).powi(2) + (self.cy - o.cy).powi(2)).sqrt();
            d >= self.radius() + o.radius() + gap
        })
    }
}

fn place(
    rng: &mut ChaCha8Rng,
    size: f64,
    semi_lo: f64,
    semi_hi: f64,
    existing: &[Ellipse],
) -> Option<Ellipse> {
    // Separation shrinks with the canvas so small fields stay habitable.
    let gap = (size / 21.0).clamp(1.5, 3.0);
    for _ in 0..100 {
        let ax = rng.random_range(semi_lo..=semi_hi);
        let ay = rng.random_range(semi_lo..=semi_hi);
        let r = ax.max(ay);
        if 2.0 * (r + 2.0) >= size {
            continue;
        }
        let cx = rng.random_range(r + 2.0..=size - r - 2.0);
        let cy = rng.random_range(r + 2.0..=size - r - 2.0);
        let e = Ellipse { cx, cy, ax, ay };
        if e.clear_of(existing, gap) {
            return Some(e);
        }
    }
    None
}

/// Generate `count` square samples of side `size`. With `multi_scale`,
/// each image holds one large ellipse (semi-axes in `[size/6, size/5]`)
/// plus two to four small ones (semi-axes at most `size/24`, floored so
/// the range stays habitable at the smallest sizes), mutually separated;
/// otherwise one to three medium ellipses. The same arguments always
/// produce the same samples.
pub fn generate(count: usize, size: usize, seed: u64, multi_scale: bool) -> Result<Vec<ImageSample>> {
    if count == 0 {
        return Err(Error::Validation("sample count must be positive".into()));
    }
    if size < 16 || size % 8 != 0 {
        return Err(Error::Validation(format!(
            "size must be a multiple of 8 and at least 16, got {size}"
        )));
    }
    if multi_scale && size < 24 {
        return Err(Error::Validation(format!(
            "multi-scale layouts need size of at least 24 to separate the \
             large ellipse from the small ones, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f64;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut ellipses: Vec<Ellipse> = Vec::new();
        if multi_scale {
            let large = place(&mut rng, s, s / 6.0, s / 5.0, &ellipses).ok_or_else(|| {
                Error::Validation(format!("could not place the large ellipse in sample {i}"))
            })?;
            ellipses.push(large);
            let n_small = rng.random_range(2..=4usize);
            let small_hi = (s / 24.0).max(1.4);
            for _ in 0..n_small {
                if let Some(e) = place(&mut rng, s, 1.2, small_hi, &ellipses) {
                    ellipses.push(e);
                }
            }
            if ellipses.len() < 3 {
                return Err(Error::Validation(format!(
                    "could not place enough small ellipses in sample {i}"
                )));
            }
        } else {
            let n = rng.random_range(1..=3usize);
            for _ in 0..n {
                if let Some(e) = place(&mut rng, s, s / 12.0, s / 6.0, &ellipses) {
                    ellipses.push(e);
                }
            }
            if ellipses.is_empty() {
                return Err(Error::Validation(format!(
                    "could not place any ellipse in sample {i}"
                )));
            }
        }

        // Background: a slow sinusoidal field around 70, foreground flat
        // around 180, both with +-12 uniform noise. The two stay well
        // separated (max background ~117 vs min foreground ~168).
        let fx = rng.random_range(1..=2usize) as f64;
        let fy = rng.random_range(1..=2usize) as f64;
        let phase_x: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let phase_y: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mut img = Vec::with_capacity(size * size);
        let mut mask = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let fg = ellipses.iter().any(|e| e.contains(x, y));
                let noise: f64 = rng.random_range(-12.0..=12.0);
                let v = if fg {
                    180.0 + noise
                } else {
                    let tx = std::f64::consts::TAU * fx * x as f64 / s + phase_x;
                    let ty = std::f64::consts::TAU * fy * y as f64 / s + phase_y;
                    70.0 + 35.0 * tx.sin() * ty.cos() + noise
                };
                img.push(v.round().clamp(0.0, 255.0) as u8);
                mask.push(if fg { 255u8 } else { 0 });
            }
        }
        samples.push(ImageSample::new(
            format!("synth{i:04}"),
            Raster::new(size, size, 1, img)?,
            Raster::new(size, size, 1, mask)?,
        )?);
    }
    Ok(samples)
}
