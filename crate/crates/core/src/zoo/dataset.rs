//! Labelled image datasets and the synthetic glyph corpus.
//!
//! The synthetic corpus stands in for restricted-content imagery. Every image
//! carries the same bright ring frame on a dark, lightly noisy background;
//! what separates the five categories is a small low-intensity mark (10-12
//! pixels) inside the ring. The marks are pairwise disjoint, so attribution
//! has a concentrated signal to find, and their per-sample intensity varies
//! widely, so classifier margins span from fragile to sturdy instead of
//! sitting uniformly out of any attacker's reach. Sample generation is a
//! pure function of the seed.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rand::SeedableRng;
use thiserror::Error;

/// Category names, in the fixed order used everywhere: dataset labels,
/// scoring-service responses, and report tables.
pub const CATEGORIES: [&str; 5] = ["Terrorism", "Weapons", "Pornography", "Gore", "Drugs"];

pub const IMAGE_SHAPE: [usize; 3] = [1, 28, 28];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sample {index} has label {label}, but there are {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("sample {index} pixel {pixel} = {value} outside [{lo}, {hi}]")]
    PixelOutOfRange {
        index: usize,
        pixel: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("sample {index} has shape {actual:?}, dataset uses {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("dataset has no samples")]
    Empty,
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: usize,
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub pixel_range: (f64, f64),
}

impl Dataset {
    /// Checks every invariant a consumer relies on: nonempty, uniform shapes,
    /// labels within range, pixels within the declared range.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let first = self.samples.first().ok_or(DatasetError::Empty)?;
        let shape = first.image.shape().to_vec();
        let (lo, hi) = self.pixel_range;
        for (index, s) in self.samples.iter().enumerate() {
            if s.image.shape() != shape {
                return Err(DatasetError::ShapeMismatch {
                    index,
                    expected: shape,
                    actual: s.image.shape().to_vec(),
                });
            }
            if s.label >= self.class_names.len() {
                return Err(DatasetError::LabelOutOfRange {
                    index,
                    label: s.label,
                    classes: self.class_names.len(),
                });
            }
            if let Some((pixel, &value)) = s
                .image
                .data()
                .iter()
                .enumerate()
                .find(|(_, v)| **v < lo || **v > hi)
            {
                return Err(DatasetError::PixelOutOfRange {
                    index,
                    pixel,
                    value,
                    lo,
                    hi,
                });
            }
        }
        Ok(())
    }

    pub fn image_shape(&self) -> &[usize] {
        self.samples[0].image.shape()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Deterministic class-balanced split. Samples are grouped into
    /// consecutive blocks of `num_classes`; every fifth block (by default
    /// stride) lands in the second half. With the round-robin ordering that
    /// [`synth_dataset`] produces, both halves stay class-balanced.
    pub fn split_blocks(&self, stride: usize, pick: usize) -> (Vec<usize>, Vec<usize>) {
        let k = self.num_classes().max(1);
        let mut rest = Vec::new();
        let mut picked = Vec::new();
        for (i, _) in self.samples.iter().enumerate() {
            if (i / k) % stride == pick {
                picked.push(i);
            } else {
                rest.push(i);
            }
        }
        (rest, picked)
    }
}

/// Pixel coordinates of the bright ring frame every sample carries,
/// regardless of class.
pub fn frame_mask() -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    for r in 0..28 {
        for c in 0..28 {
            let dr = r as f64 - 13.5;
            let dc = c as f64 - 13.5;
            let d = (dr * dr + dc * dc).sqrt();
            if (8.05..9.3).contains(&d) {
                cells.push((r, c));
            }
        }
    }
    cells
}

/// Pixel coordinates of the class mark for one category: a small pattern
/// (10-12 pixels) strictly inside the ring frame. Marks are pairwise
/// disjoint and never touch the frame.
pub fn glyph_mask(class: usize) -> Vec<(usize, usize)> {
    let mut cells: Vec<(usize, usize)> = Vec::new();
    match class {
        // Terrorism: main diagonal stroke.
        0 => {
            for t in 9..=18usize {
                cells.push((t, t));
            }
        }
        // Weapons: anti-diagonal stroke.
        1 => {
            for t in 9..=18usize {
                cells.push((t, 27 - t));
            }
        }
        // Pornography: two horizontal dashes.
        2 => {
            for c in 11..=16 {
                cells.push((10, c));
                cells.push((17, c));
            }
        }
        // Gore: two vertical dashes.
        3 => {
            for r in 11..=16 {
                cells.push((r, 10));
                cells.push((r, 17));
            }
        }
        // Drugs: dots at top and bottom plus two offset pixels.
        4 => {
            for r in [8, 9, 18, 19] {
                for c in [13, 14] {
                    cells.push((r, c));
                }
            }
            cells.push((12, 14));
            cells.push((15, 13));
        }
        _ => {}
    }
    cells.sort_unstable();
    cells.dedup();
    cells
}

/// Generates `per_class` samples for each of the five categories,
/// round-robin interleaved so any block split stays balanced. Identical
/// seeds produce identical datasets.
///
/// The frame is always strong (120..160); the class mark's base intensity is
/// drawn from a wide band (30..96) so that some samples sit near the
/// decision boundary and others far from it.
pub fn synth_dataset(seed: u64, per_class: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg_noise: Normal<f64> = Normal::new(0.0, 2.0).unwrap();
    let frame = frame_mask();
    let masks: Vec<Vec<(usize, usize)>> = (0..5).map(glyph_mask).collect();

    let mut samples = Vec::with_capacity(per_class * 5);
    for round in 0..per_class {
        for class in 0..5usize {
            let mut px = vec![0.0f64; 28 * 28];
            for p in px.iter_mut() {
                *p = (6.0 + bg_noise.sample(&mut rng)).clamp(0.0, 20.0);
            }
            let frame_base: f64 = rng.random_range(120.0..160.0);
            for &(r, c) in &frame {
                if rng.random_range(0.0..1.0) < 0.92 {
                    let jitter: f64 = rng.random_range(-10.0..10.0);
                    px[r * 28 + c] = (frame_base + jitter).clamp(0.0, 255.0);
                }
            }
            let mark_base: f64 = rng.random_range(30.0..150.0);
            for &(r, c) in &masks[class] {
                // Occasional dropout keeps marks from being pixel-identical
                // across samples.
                if rng.random_range(0.0..1.0) < 0.95 {
                    let jitter: f64 = rng.random_range(-6.0..6.0);
                    px[r * 28 + c] = (mark_base + jitter).clamp(0.0, 255.0);
                }
            }
            samples.push(Sample {
                id: round * 5 + class,
                image: Tensor::new(px, IMAGE_SHAPE.to_vec()).expect("finite pixels"),
                label: class,
            });
        }
    }
    Dataset {
        samples,
        class_names: CATEGORIES.iter().map(|s| s.to_string()).collect(),
        pixel_range: (0.0, 255.0),
    }
}
