//! The eight symmetries of the square (rotations by multiples of 90
//! degrees, with and without a horizontal flip), used to augment training
//! data so every labeled image yields eight.

use crate::data::{ImageSample, Raster};
use crate::error::{Error, Result};

/// An element of the dihedral group D4, encoded as "rotate by `k` quarter
/// turns clockwise, then optionally flip horizontally".
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct Dihedral {
    /// Quarter turns, 0..=3.
    k: u8,
    /// Horizontal flip applied after the rotation.
    flip: bool,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { k: 0, flip: false };

    /// All eight elements, identity first, in a fixed order.
    pub fn all() -> [Dihedral; 8] {
        let mut out = [Dihedral::IDENTITY; 8];
        for (i, e) in out.iter_mut().enumerate() {
            *e = Dihedral {
                k: (i % 4) as u8,
                flip: i >= 4,
            };
        }
        out
    }

    /// Stable name, e.g. `rot90` or `flip_rot270`.
    pub fn name(&self) -> &'static str {
        match (self.flip, self.k) {
            (false, 0) => "id",
            (false, 1) => "rot90",
            (false, 2) => "rot180",
            (false, 3) => "rot270",
            (true, 0) => "flip",
            (true, 1) => "flip_rot90",
            (true, 2) => "flip_rot180",
            (true, 3) => "flip_rot270",
            _ => unreachable!(),
        }
    }

    /// Group composition: `a.compose(b)` is "apply `b` first, then `a`".
    pub fn compose(self, b: Dihedral) -> Dihedral {
        // With F = horizontal flip and R = quarter turn, F R = R^-1 F,
        // so (F^f1 R^k1)(F^f2 R^k2) folds to F^(f1 xor f2) R^(±k1 + k2).
        if b.flip {
            Dihedral {
                k: (4 + b.k - self.k % 4) % 4,
                flip: !self.flip,
            }
        } else {
            Dihedral {
                k: (self.k + b.k) % 4,
                flip: self.flip,
            }
        }
    }

    /// The element that undoes this one.
    pub fn inverse(self) -> Dihedral {
        if self.flip {
            // Reflections are involutions.
            self
        } else {
            Dihedral {
                k: (4 - self.k) % 4,
                flip: false,
            }
        }
    }

    /// Apply to a raster. Rotations swap width and height.
    pub fn apply(&self, r: &Raster) -> Raster {
        let (w, h, c) = (r.width(), r.height(), r.channels());
        let rotated = match self.k {
            0 => r.clone(),
            1 => {
                // 90 degrees clockwise: (x, y) <- (y, h-1-x) of the source.
                let mut out = vec![0u8; w * h * c];
                for y in 0..w {
                    for x in 0..h {
                        for ch in 0..c {
                            out[(y * h + x) * c + ch] = r.get(y, h - 1 - x, ch);
                        }
                    }
                }
                Raster::new(h, w, c, out).expect("rotation preserves sample count")
            }
            2 => {
                let mut out = vec![0u8; w * h * c];
                for y in 0..h {
                    for x in 0..w {
                        for ch in 0..c {
                            out[(y * w + x) * c + ch] = r.get(w - 1 - x, h - 1 - y, ch);
                        }
                    }
                }
                Raster::new(w, h, c, out).expect("rotation preserves sample count")
            }
            3 => {
                // 270 clockwise = 90 counter-clockwise.
                let mut out = vec![0u8; w * h * c];
                for y in 0..w {
                    for x in 0..h {
                        for ch in 0..c {
                            out[(y * h + x) * c + ch] = r.get(w - 1 - y, x, ch);
                        }
                    }
                }
                Raster::new(h, w, c, out).expect("rotation preserves sample count")
            }
            _ => unreachable!(),
        };
        if !self.flip {
            return rotated;
        }
        let (w, h, c) = (rotated.width(), rotated.height(), rotated.channels());
        let mut out = vec![0u8; w * h * c];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(y * w + x) * c + ch] = rotated.get(w - 1 - x, y, ch);
                }
            }
        }
        Raster::new(w, h, c, out).expect("flip preserves sample count")
    }
}

/// Expand one square sample into its eight dihedral variants. Image and
/// mask receive the same transform; ids get the transform name appended.
pub fn dihedral_augment(sample: &ImageSample) -> Result<Vec<ImageSample>> {
    if sample.image.width() != sample.image.height() {
        return Err(Error::Validation(format!(
            "dihedral augmentation needs square images, {:?} is {}x{}",
            sample.id,
            sample.image.width(),
            sample.image.height()
        )));
    }
    Dihedral::all()
        .iter()
        .map(|t| {
            ImageSample::new(
                format!("{}.{}", sample.id, t.name()),
                t.apply(&sample.image),
                t.apply(&sample.mask),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_raster() -> Raster {
        // 3x2, distinct values so any wrong index shows up.
        Raster::new(3, 2, 1, vec![1, 2, 3, 4, 5, 6]).unwrap()
    }

    #[test]
    fn rot90_clockwise_moves_pixels_correctly() {
        // 1 2 3      4 1
        // 4 5 6  ->  5 2
        //            6 3
        let r = Dihedral { k: 1, flip: false }.apply(&sample_raster());
        assert_eq!((r.width(), r.height()), (2, 3));
        assert_eq!(r.samples(), &[4, 1, 5, 2, 6, 3]);
    }

    #[test]
    fn rot180_reverses_everything() {
        let r = Dihedral { k: 2, flip: false }.apply(&sample_raster());
        assert_eq!((r.width(), r.height()), (3, 2));
        assert_eq!(r.samples(), &[6, 5, 4, 3, 2, 1]);
    }

    #[test]
    fn flip_mirrors_rows() {
        let r = Dihedral { k: 0, flip: true }.apply(&sample_raster());
        assert_eq!(r.samples(), &[3, 2, 1, 6, 5, 4]);
    }

    #[test]
    fn the_eight_transforms_are_distinct_on_an_asymmetric_image() {
        // An L-shaped blob has no symmetry, so all eight orbits differ.
        let img = Raster::new(
            4,
            4,
            1,
            vec![
                9, 0, 0, 0, //
                9, 0, 0, 0, //
                9, 9, 0, 0, //
                0, 0, 0, 0,
            ],
        )
        .unwrap();
        let mut seen = Vec::new();
        for t in Dihedral::all() {
            let out = t.apply(&img);
            assert!(
                !seen.contains(&out),
                "{} duplicates an earlier transform",
                t.name()
            );
            seen.push(out);
        }
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn compose_matches_sequential_application() {
        // The algebraic composition table must agree with actually
        // applying the transforms one after the other, for all 64 pairs.
        let img = Raster::new(
            4,
            4,
            1,
            vec![
                1, 2, 3, 4, //
                5, 6, 7, 8, //
                9, 10, 11, 12, //
                13, 14, 15, 16,
            ],
        )
        .unwrap();
        for a in Dihedral::all() {
            for b in Dihedral::all() {
                let sequential = a.apply(&b.apply(&img));
                let composed = a.compose(b).apply(&img);
                assert_eq!(
                    sequential.samples(),
                    composed.samples(),
                    "{} after {} != {}",
                    a.name(),
                    b.name(),
                    a.compose(b).name()
                );
            }
        }
    }

    #[test]
    fn inverse_returns_to_identity() {
        let img = sample_raster();
        for t in Dihedral::all() {
            let back = t.inverse().apply(&t.apply(&img));
            assert_eq!(back.samples(), img.samples(), "{}", t.name());
            assert_eq!(t.compose(t.inverse()), Dihedral::IDENTITY, "{}", t.name());
            assert_eq!(t.inverse().compose(t), Dihedral::IDENTITY, "{}", t.name());
        }
    }

    #[test]
    fn four_rotations_cycle() {
        let r = Dihedral { k: 1, flip: false };
        let mut acc = Dihedral::IDENTITY;
        for _ in 0..4 {
            acc = r.compose(acc);
        }
        assert_eq!(acc, Dihedral::IDENTITY);
    }

    #[test]
    fn augment_produces_eight_consistent_samples() {
        let img = Raster::new(4, 4, 1, (0..16).collect()).unwrap();
        let mask = Raster::new(
            4,
            4,
            1,
            vec![
                255, 0, 0, 0, //
                255, 0, 0, 0, //
                0, 0, 0, 0, //
                0, 0, 0, 0,
            ],
        )
        .unwrap();
        let s = ImageSample::new("img7", img, mask).unwrap();
        let out = dihedral_augment(&s).unwrap();
        assert_eq!(out.len(), 8);
        assert_eq!(out[0].id, "img7.id");
        assert!(out.iter().any(|s| s.id == "img7.flip_rot270"));
        // Mask moves with the image: the foreground count is invariant.
        for o in &out {
            let fg = o.mask.samples().iter().filter(|&&v| v == 255).count();
            assert_eq!(fg, 2, "{}", o.id);
        }
        // Ids are unique.
        let mut ids: Vec<&str> = out.iter().map(|s| s.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 8);
    }

    #[test]
    fn augment_rejects_non_square() {
        let img = Raster::new(4, 2, 1, vec![0; 8]).unwrap();
        let mask = Raster::new(4, 2, 1, vec![0; 8]).unwrap();
        let s = ImageSample::new("x", img, mask).unwrap();
        assert!(matches!(dihedral_augment(&s), Err(Error::Validation(_))));
    }
}
