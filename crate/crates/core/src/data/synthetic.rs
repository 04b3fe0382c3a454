use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Image, Mask, Sample, Split};
use crate::error::{Error, Result};

/// Side of the square background patch carrying the spurious colour cue.
pub const PATCH_SIZE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    /// Probability that the corner patch colour equals the label (TRAIN and
    /// VAL); otherwise the colour is drawn uniformly over all classes.
    pub spurious_correlation: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            samples_per_class: 50,
            image_size: 32,
            spurious_correlation: 0.95,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size must be >= 16, got {}", self.image_size)));
        }
        if !(0.0..=1.0).contains(&self.spurious_correlation) {
            return Err(Error::Config(format!(
                "spurious_correlation must lie in [0, 1], got {}",
                self.spurious_correlation
            )));
        }
        Ok(())
    }

    fn glyph_size(&self) -> usize {
        (self.image_size * 3 / 8).max(6)
    }
}

/// Generator-side facts about one sample, kept for tests and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticMeta {
    pub patch_color: usize,
    /// Top-left corner `(row, col)` of the glyph box.
    pub glyph_origin: (usize, usize),
}

/// Whether normalised coordinates `(u, v)` in `[-1, 1]²` fall inside the
/// glyph of `class`.
fn glyph_contains(class: usize, u: f64, v: f64) -> bool {
    match class {
        0 => v.abs() <= 0.4,
        1 => u.abs() <= 0.4,
        2 => (u - v).abs() <= 0.5 || (u + v).abs() <= 0.5,
        3 => {
            let r = u * u + v * v;
            (0.35..=1.0).contains(&r)
        }
        4 => u.abs() <= 0.35 || v.abs() <= 0.35,
        5 => u * u + v * v <= 0.85,
        6 => v >= -0.9 && u.abs() <= (v + 0.9) * 0.55,
        7 => u.abs() <= 0.8 && v.abs() <= 0.8,
        8 => u.abs() + v.abs() <= 1.0,
        9 => u <= -0.3 || v >= 0.3,
        _ => {
            // Pseudo-random 4×4 block pattern, fixed per class.
            let bx = (((u + 1.0) * 2.0).floor() as i64).clamp(0, 3) as u64;
            let by = (((v + 1.0) * 2.0).floor() as i64).clamp(0, 3) as u64;
            let cell = by * 4 + bx;
            let h = (class as u64)
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .rotate_left(17)
                .wrapping_add(cell.wrapping_mul(0xBF58_476D_1CE4_E5B9));
            cell == 5 || (h >> 29) & 1 == 1
        }
    }
}

fn glyph_template(class: usize, size: usize) -> Mask {
    let mut mask = Mask::from_shape_fn((size, size), |(y, x)| {
        let u = 2.0 * (x as f64 + 0.5) / size as f64 - 1.0;
        let v = 2.0 * (y as f64 + 0.5) / size as f64 - 1.0;
        glyph_contains(class, u, v)
    });
    if !mask.iter().any(|&b| b) {
        mask[[size / 2, size / 2]] = true;
    }
    mask
}

/// Evenly spaced saturated palette, one colour per class.
fn palette(num_classes: usize) -> Vec<[f32; 3]> {
    (0..num_classes)
        .map(|i| {
            let hue = i as f64 / num_classes as f64 * 6.0;
            let x = 1.0 - ((hue % 2.0) - 1.0).abs();
            let (r, g, b) = match hue as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [r as f32, g as f32, b as f32]
        })
        .collect()
}

/// Stream offset so TRAIN/VAL/TEST draw disjoint samples from one seed.
fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec, split: Split, seed: u64) -> Result<Dataset> {
    Ok(generate_synthetic_with_meta(spec, split, seed)?.0)
}

/// Draws a dataset where each image holds a white class glyph (the ground
/// truth mask) on dark noise, plus a corner patch whose colour tracks the
/// label with probability `spurious_correlation` outside TEST.
pub fn generate_synthetic_with_meta(
    spec: &SyntheticSpec,
    split: Split,
    seed: u64,
) -> Result<(Dataset, Vec<SyntheticMeta>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split_stream(split));
    let size = spec.image_size;
    let gsize = spec.glyph_size();
    let colors = palette(spec.num_classes);
    let templates: Vec<Mask> = (0..spec.num_classes).map(|c| glyph_template(c, gsize)).collect();
    let correlation = match split {
        Split::Test => 0.0,
        Split::Train | Split::Val => spec.spurious_correlation,
    };

    let total = spec.num_classes * spec.samples_per_class;
    let mut samples = Vec::with_capacity(total);
    let mut meta = Vec::with_capacity(total);
    for n in 0..total {
        let label = n % spec.num_classes;
        let patch_color = if rng.random_bool(correlation) {
            label
        } else {
            rng.random_range(0..spec.num_classes)
        };

        // Glyph box must not touch the patch (top-left corner).
        let (gy, gx) = loop {
            let gy = rng.random_range(0..=size - gsize);
            let gx = rng.random_range(0..=size - gsize);
            if gy >= PATCH_SIZE + 1 || gx >= PATCH_SIZE + 1 {
                break (gy, gx);
            }
        };

        let mut image = Image::from_shape_fn((size, size, 3), |_| rng.random_range(0.0..0.3f32));
        let mut mask = Mask::from_elem((size, size), false);
        let template = &templates[label];
        for ((ty, tx), &on) in template.indexed_iter() {
            if on {
                let (y, x) = (gy + ty, gx + tx);
                mask[[y, x]] = true;
                let shade = rng.random_range(0.85..=1.0f32);
                for c in 0..3 {
                    image[[y, x, c]] = shade;
                }
            }
        }
        for y in 0..PATCH_SIZE {
            for x in 0..PATCH_SIZE {
                for c in 0..3 {
                    image[[y, x, c]] = colors[patch_color][c];
                }
            }
        }

        let id = format!("{}-{n:05}", split.as_str());
        samples.push(Sample::new(id, image, label).with_human_mask(mask)?);
        meta.push(SyntheticMeta {
            patch_color,
            glyph_origin: (gy, gx),
        });
    }
    let class_names = (0..spec.num_classes).map(|c| format!("class{c}")).collect();
    Ok((Dataset::new("synthetic", split, class_names, samples)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(corr: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 4,
            samples_per_class: 25,
            image_size: 32,
            spurious_correlation: corr,
        }
    }

    #[test]
    fn full_correlation_matches_label() {
        let (ds, meta) = generate_synthetic_with_meta(&spec(1.0), Split::Train, 3).unwrap();
        for (s, m) in ds.samples().iter().zip(&meta) {
            assert_eq!(s.label, m.patch_color);
        }
    }

    #[test]
    fn mask_is_exactly_the_glyph() {
        let (ds, meta) = generate_synthetic_with_meta(&spec(0.5), Split::Test, 9).unwrap();
        for (s, m) in ds.samples().iter().zip(&meta) {
            let mask = s.human_mask().unwrap();
            assert!(mask.iter().any(|&b| b));
            let template = glyph_template(s.label, spec(0.5).glyph_size());
            let (gy, gx) = m.glyph_origin;
            for ((y, x), &on) in mask.indexed_iter() {
                let inside = y >= gy && x >= gx && y < gy + template.nrows() && x < gx + template.ncols();
                let expected = inside && template[[y - gy, x - gx]];
                assert_eq!(on, expected, "pixel ({y},{x}) of {}", s.id);
                if on {
                    assert!(s.image[[y, x, 0]] >= 0.85);
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = generate_synthetic(&spec(0.9), Split::Train, 11).unwrap();
        let b = generate_synthetic(&spec(0.9), Split::Train, 11).unwrap();
        assert_eq!(a.samples(), b.samples());
        let c = generate_synthetic(&spec(0.9), Split::Val, 11).unwrap();
        assert_ne!(a.samples()[0].image, c.samples()[0].image);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate_synthetic(&spec(1.5), Split::Train, 0).is_err());
        let mut s = spec(0.5);
        s.image_size = 8;
        assert!(generate_synthetic(&s, Split::Train, 0).is_err());
        s.image_size = 32;
        s.num_classes = 1;
        assert!(generate_synthetic(&s, Split::Train, 0).is_err());
    }

    #[test]
    fn glyph_templates_are_distinct() {
        let ts: Vec<Mask> = (0..12).map(|c| glyph_template(c, 12)).collect();
        for i in 0..ts.len() {
            for j in i + 1..ts.len() {
                assert_ne!(ts[i], ts[j], "classes {i} and {j} share a glyph");
            }
        }
    }
}
