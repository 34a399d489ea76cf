//! Background anomaly detector.
//!
//! Two independent triggers, both answered with the alert code −25:
//!
//! * **High-frequency energy** — the median squared second difference over
//!   interior pixels (row and column orientations pooled). Sign-pattern
//!   perturbations from gradient attacks push this two orders of magnitude
//!   above clean imagery. The firing threshold is calibrated against clean
//!   data; a content gate (median 4×4 block mean) exempts images that are
//!   bright everywhere, so a pure random-noise submission scores normally
//!   instead of alerting.
//! * **Probe pattern** — a ring buffer of the session's recent images; when
//!   a new query sits within a small RMSD window of several recent ones, the
//!   session is pairwise-probing (coordinate-wise finite differences land
//!   here by the fourth query).

use atf_core::metrics::{percentile, rmsd};
use atf_core::tensor::Tensor;
use std::collections::VecDeque;

/// Recent-query memory per session.
pub const WINDOW_CAPACITY: usize = 8;
/// Matches inside the window needed before the probe trigger fires.
pub const MATCHES_TO_FIRE: usize = 3;
/// Images whose median 4×4-block mean is at or above this are treated as
/// dense content (bright noise, photographs of texture) and never HF-fire.
pub const CONTENT_GATE: f64 = 64.0;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DetectorCalibration {
    /// Median-squared-second-difference level above which an image is
    /// considered adversarially textured.
    pub hf_threshold: f64,
    pub content_gate: f64,
    pub rmsd_window: f64,
}

/// Nearest-rank median via quickselect; runs per query, so no full sort.
/// Agrees exactly with `metrics::percentile(values, 50.0)`.
fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let rank = ((values.len() as f64) / 2.0).ceil() as usize;
    let k = rank.clamp(1, values.len()) - 1;
    let (_, kth, _) =
        values.select_nth_unstable_by(k, |a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    *kth
}

/// Median squared second difference over interior pixels, both orientations
/// pooled. Zero for images flatter than three pixels in both directions.
pub fn high_frequency_energy(image: &Tensor) -> f64 {
    let (h, w) = plane(image);
    let px = image.data();
    let mut sq = Vec::with_capacity(2 * h * w);
    for r in 0..h {
        for c in 1..w.saturating_sub(1) {
            let d = px[r * w + c - 1] - 2.0 * px[r * w + c] + px[r * w + c + 1];
            sq.push(d * d);
        }
    }
    for c in 0..w {
        for r in 1..h.saturating_sub(1) {
            let d = px[(r - 1) * w + c] - 2.0 * px[r * w + c] + px[(r + 1) * w + c];
            sq.push(d * d);
        }
    }
    median(&mut sq)
}

/// Median of 4×4 block means; the content gate statistic.
pub fn median_block_mean(image: &Tensor) -> f64 {
    let (h, w) = plane(image);
    let px = image.data();
    let mut means = Vec::new();
    let mut r = 0;
    while r + 4 <= h {
        let mut c = 0;
        while c + 4 <= w {
            let mut sum = 0.0;
            for dr in 0..4 {
                for dc in 0..4 {
                    sum += px[(r + dr) * w + c + dc];
                }
            }
            means.push(sum / 16.0);
            c += 4;
        }
        r += 4;
    }
    if means.is_empty() {
        let n = px.len().max(1);
        return px.iter().sum::<f64>() / n as f64;
    }
    median(&mut means)
}

/// Treats the last two axes as the image plane; 1-D inputs are one row.
fn plane(image: &Tensor) -> (usize, usize) {
    let shape = image.shape();
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        n => (shape[n - 2], shape[n - 1]),
    }
}

impl DetectorCalibration {
    /// Fixes the HF threshold from clean images: comfortably above their
    /// 99th percentile (both a multiplicative and an additive margin, so
    /// near-zero clean energy still leaves headroom). Clean false-fire rate
    /// is ~1% by construction.
    pub fn from_clean(clean: &[&Tensor], rmsd_window: f64) -> Self {
        let energies: Vec<f64> = clean.iter().map(|t| high_frequency_energy(t)).collect();
        let p99 = percentile(&energies, 99.0).unwrap_or(0.0);
        Self {
            hf_threshold: (2.0 * p99).max(p99 + 150.0),
            content_gate: CONTENT_GATE,
            rmsd_window,
        }
    }

    /// HF trigger decision for one image.
    pub fn fires_on(&self, image: &Tensor) -> bool {
        median_block_mean(image) < self.content_gate && high_frequency_energy(image) > self.hf_threshold
    }
}

/// Per-session ring buffer backing the probe-pattern trigger.
#[derive(Debug, Default)]
pub struct ProbeWindow {
    recent: VecDeque<Tensor>,
}

impl ProbeWindow {
    /// How many buffered images sit within `window` RMSD of `image`.
    pub fn matches(&self, image: &Tensor, window: f64) -> usize {
        self.recent
            .iter()
            .filter(|past| rmsd(past, image).is_some_and(|d| d < window))
            .count()
    }

    pub fn push(&mut self, image: Tensor) {
        if self.recent.len() == WINDOW_CAPACITY {
            self.recent.pop_front();
        }
        self.recent.push_back(image);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn img(mut f: impl FnMut(usize, usize) -> f64) -> Tensor {
        let mut v = Vec::with_capacity(784);
        for r in 0..28 {
            for c in 0..28 {
                v.push(f(r, c));
            }
        }
        Tensor::new(v, vec![1, 28, 28]).unwrap()
    }

    #[test]
    fn quickselect_median_matches_percentile() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [1usize, 2, 3, 7, 49, 1404] {
            let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
            let expected = atf_core::metrics::percentile(&vals, 50.0).unwrap();
            let mut work = vals.clone();
            assert_eq!(median(&mut work), expected, "n={n}");
        }
    }

    #[test]
    fn flat_image_has_zero_energy() {
        assert_eq!(high_frequency_energy(&img(|_, _| 37.0)), 0.0);
    }

    #[test]
    fn sign_checkerboard_has_large_energy_and_smooth_ramp_small() {
        let checker = img(|r, c| if (r + c) % 2 == 0 { 22.0 } else { -10.0 });
        let ramp = img(|r, c| (r + c) as f64);
        assert!(high_frequency_energy(&checker) > 1000.0);
        assert_eq!(high_frequency_energy(&ramp), 0.0);
    }

    #[test]
    fn bright_noise_is_exempted_by_the_content_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = img(|_, _| rng.random_range(0.0..255.0));
        let cal = DetectorCalibration {
            hf_threshold: 200.0,
            content_gate: CONTENT_GATE,
            rmsd_window: 1.0,
        };
        assert!(high_frequency_energy(&noise) > cal.hf_threshold);
        assert!(median_block_mean(&noise) > CONTENT_GATE);
        assert!(!cal.fires_on(&noise));
    }

    #[test]
    fn calibration_keeps_margin_above_clean_p99() {
        let clean: Vec<Tensor> = (0..20).map(|k| img(|r, c| ((r * c + k) % 5) as f64)).collect();
        let refs: Vec<&Tensor> = clean.iter().collect();
        let cal = DetectorCalibration::from_clean(&refs, 1.0);
        for t in &clean {
            assert!(high_frequency_energy(t) < cal.hf_threshold);
        }
        assert!(cal.hf_threshold >= 150.0);
    }

    #[test]
    fn probe_window_counts_near_duplicates_and_evicts() {
        let base = img(|_, _| 10.0);
        let mut w = ProbeWindow::default();
        for k in 0..WINDOW_CAPACITY + 2 {
            let mut shifted = base.data().to_vec();
            shifted[k] += 8.0; // single-pixel probe step
            w.push(Tensor::new(shifted, vec![1, 28, 28]).unwrap());
        }
        assert_eq!(w.matches(&base, 1.0), WINDOW_CAPACITY);
        let far = img(|_, _| 200.0);
        assert_eq!(w.matches(&far, 1.0), 0);
    }
}
