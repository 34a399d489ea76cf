//! Sensitivity probing: submit clean samples and standard distortions of
//! them, then measure how far each distortion pushes the clean top
//! category down. The resulting table tells an operator which cheap,
//! untargeted perturbations the service already shrugs off and which ones
//! draw alerts, before any budget is spent on a real attack.

use crate::recorder::ErrorRecord;
use atf_core::api::{BudgetExceeded, OracleClient};
use atf_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

const PIXEL_MIN: f64 = 0.0;
const PIXEL_MAX: f64 = 255.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Distortion {
    /// Additive zero-mean Gaussian noise, clamped to pixel bounds.
    Gaussian { sigma: f64 },
    /// Additive uniform noise in `[-amplitude, amplitude]`.
    Uniform { amplitude: f64 },
    /// Replace the image entirely with uniform random pixels.
    RandomImage,
    /// Average 2x2 blocks, then snap pixels to `levels` evenly spaced values.
    Requantize { levels: u32 },
}

impl Distortion {
    pub fn name(&self) -> String {
        match self {
            Distortion::Gaussian { sigma } => format!("gaussian-{sigma}"),
            Distortion::Uniform { amplitude } => format!("uniform-{amplitude}"),
            Distortion::RandomImage => "random-image".into(),
            Distortion::Requantize { levels } => format!("requantize-{levels}"),
        }
    }

    /// The ladder the `probe` subcommand walks by default.
    pub fn standard() -> Vec<Distortion> {
        vec![
            Distortion::Gaussian { sigma: 4.0 },
            Distortion::Gaussian { sigma: 8.0 },
            Distortion::Gaussian { sigma: 16.0 },
            Distortion::Uniform { amplitude: 4.0 },
            Distortion::Uniform { amplitude: 8.0 },
            Distortion::Uniform { amplitude: 16.0 },
            Distortion::Requantize { levels: 64 },
            Distortion::Requantize { levels: 16 },
            Distortion::Requantize { levels: 4 },
            Distortion::RandomImage,
        ]
    }

    pub fn apply(&self, image: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        match self {
            Distortion::Gaussian { sigma } => {
                let noise = Normal::new(0.0, *sigma).expect("finite sigma");
                let data = image
                    .data()
                    .iter()
                    .map(|&v| (v + noise.sample(rng)).clamp(PIXEL_MIN, PIXEL_MAX))
                    .collect();
                Tensor::new(data, image.shape().to_vec()).expect("shape preserved")
            }
            Distortion::Uniform { amplitude } => {
                let a = amplitude.abs();
                let data = image
                    .data()
                    .iter()
                    .map(|&v| (v + rng.random_range(-a..=a)).clamp(PIXEL_MIN, PIXEL_MAX))
                    .collect();
                Tensor::new(data, image.shape().to_vec()).expect("shape preserved")
            }
            Distortion::RandomImage => {
                let data = (0..image.len())
                    .map(|_| rng.random_range(PIXEL_MIN..=PIXEL_MAX))
                    .collect();
                Tensor::new(data, image.shape().to_vec()).expect("shape preserved")
            }
            Distortion::Requantize { levels } => requantize(image, *levels),
        }
    }
}

/// 2x2 block average followed by quantization to `levels` values. Images
/// without a `[c, h, w]` shape skip the averaging and only quantize.
fn requantize(image: &Tensor, levels: u32) -> Tensor {
    let mut data = image.data().to_vec();
    if let [c, h, w] = *image.shape() {
        for ch in 0..c {
            let plane = ch * h * w;
            for by in (0..h.saturating_sub(1)).step_by(2) {
                for bx in (0..w.saturating_sub(1)).step_by(2) {
                    let idx = [
                        plane + by * w + bx,
                        plane + by * w + bx + 1,
                        plane + (by + 1) * w + bx,
                        plane + (by + 1) * w + bx + 1,
                    ];
                    let mean = idx.iter().map(|&i| data[i]).sum::<f64>() / 4.0;
                    for &i in &idx {
                        data[i] = mean;
                    }
                }
            }
        }
    }
    let steps = levels.max(2) as f64 - 1.0;
    for v in &mut data {
        *v = ((*v / PIXEL_MAX * steps).round() / steps * PIXEL_MAX).clamp(PIXEL_MIN, PIXEL_MAX);
    }
    Tensor::new(data, image.shape().to_vec()).expect("shape preserved")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionRow {
    pub distortion: String,
    /// Mean root-mean-square deviation the distortion actually produced.
    pub mean_rmsd: f64,
    /// Mean drop (percentage points) in the clean top category's score.
    pub mean_top_drop: f64,
    /// Fraction of samples whose clean top category fell below threshold.
    pub evasion_rate: f64,
    pub samples: usize,
    pub errors: usize,
    pub alerts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub rows: Vec<DistortionRow>,
    pub threshold_percent: f64,
    pub samples_probed: usize,
    pub queries_spent: u64,
    pub errors: ErrorRecord,
}

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("no samples supplied to probe")]
    NoSamples,
    #[error("no distortions supplied to probe")]
    NoDistortions,
    #[error("query budget too small for probe: need up to {needed}, have {remaining}")]
    BudgetTooSmall { needed: u64, remaining: u64 },
    #[error(transparent)]
    Budget(#[from] BudgetExceeded),
    #[error("every clean classification failed; nothing to measure drops against")]
    NoCleanSignal,
}

/// Runs the probe over the supplied samples. Alerts never stop the probe:
/// which distortions draw alerts is exactly what the report is for.
/// Identical images are classified once and the response reused.
pub fn probe_sensitivity(
    client: &OracleClient,
    samples: &[Tensor],
    distortions: &[Distortion],
    threshold_percent: f64,
    seed: u64,
) -> Result<ProbeReport, ProbeError> {
    if samples.is_empty() {
        return Err(ProbeError::NoSamples);
    }
    if distortions.is_empty() {
        return Err(ProbeError::NoDistortions);
    }
    let needed = (samples.len() as u64) * (distortions.len() as u64 + 1);
    if client.remaining() < needed {
        return Err(ProbeError::BudgetTooSmall {
            needed,
            remaining: client.remaining(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = ErrorRecord::default();
    let mut cache: HashMap<Vec<u64>, atf_core::api::OracleResponse> = HashMap::new();
    let mut classify = |image: &Tensor,
                        stage: &str,
                        errors: &mut ErrorRecord|
     -> Result<atf_core::api::OracleResponse, BudgetExceeded> {
        let key: Vec<u64> = image.data().iter().map(|v| v.to_bits()).collect();
        if let Some(hit) = cache.get(&key) {
            return Ok(hit.clone());
        }
        let response = client.classify(image)?;
        errors.record(&response, stage);
        cache.insert(key, response.clone());
        Ok(response)
    };

    struct Acc {
        rmsd_sum: f64,
        drop_sum: f64,
        evaded: usize,
        samples: usize,
        errors: usize,
        alerts: usize,
    }
    let mut accs: Vec<Acc> = distortions
        .iter()
        .map(|_| Acc {
            rmsd_sum: 0.0,
            drop_sum: 0.0,
            evaded: 0,
            samples: 0,
            errors: 0,
            alerts: 0,
        })
        .collect();

    let mut clean_seen = 0usize;
    for sample in samples {
        let clean = classify(sample, "probe:clean", &mut errors)?;
        let Some((top_cat, top_percent)) = clean.top_category() else {
            continue;
        };
        clean_seen += 1;
        for (distortion, acc) in distortions.iter().zip(&mut accs) {
            let variant = distortion.apply(sample, &mut rng);
            let stage = format!("probe:{}", distortion.name());
            let response = classify(&variant, &stage, &mut errors)?;
            if response.is_alert() {
                acc.alerts += 1;
            }
            match response.score(top_cat) {
                Some(now) => {
                    acc.samples += 1;
                    acc.rmsd_sum +=
                        atf_core::metrics::rmsd(sample, &variant).unwrap_or(f64::NAN);
                    acc.drop_sum += top_percent - now;
                    if now < threshold_percent {
                        acc.evaded += 1;
                    }
                }
                None => acc.errors += 1,
            }
        }
    }
    if clean_seen == 0 {
        return Err(ProbeError::NoCleanSignal);
    }

    let rows = distortions
        .iter()
        .zip(accs)
        .map(|(d, acc)| {
            let n = acc.samples.max(1) as f64;
            DistortionRow {
                distortion: d.name(),
                mean_rmsd: acc.rmsd_sum / n,
                mean_top_drop: acc.drop_sum / n,
                evasion_rate: acc.evaded as f64 / n,
                samples: acc.samples,
                errors: acc.errors,
                alerts: acc.alerts,
            }
        })
        .collect();

    Ok(ProbeReport {
        rows,
        threshold_percent,
        samples_probed: clean_seen,
        queries_spent: client.spent(),
        errors,
    })
}
