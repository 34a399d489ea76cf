//! Greedy saliency attack: drive the true-class score down one pixel at a
//! time, always picking the pixel with the most leverage.

use super::{perturbed_fraction, AdversarialSample, AttackError, AttackParams};
use crate::tensor::Tensor;
use crate::zoo::{Sample, SurrogateModel};

/// Saliency-guided pixel attack on a surrogate. Each step computes the
/// gradient of the attacked class score, ranks unmodified pixels by
/// `|grad| * room` (room being how far the pixel can move in the useful
/// direction), and saturates the best pixel. Stops as soon as the surrogate
/// prediction changes, or after `params.iterations` pixels — the pixel
/// budget — in which case the result simply reports `surrogate_evading:
/// false`. A zero pixel budget returns the input unchanged.
pub fn jsma(
    model: &SurrogateModel,
    sample: &Sample,
    params: &AttackParams,
) -> Result<AdversarialSample, AttackError> {
    if sample.image.shape() != model.input_shape {
        return Err(AttackError::ShapeMismatch {
            expected: model.input_shape.clone(),
            actual: sample.image.shape().to_vec(),
        });
    }
    let (lo, hi) = params.pixel_bounds;
    if lo >= hi {
        return Err(AttackError::InvalidParams(format!(
            "pixel bounds ({lo}, {hi}) are empty"
        )));
    }
    // Untargeted: reduce the true-class score. Targeted: raise the target
    // score, i.e. reduce its negation.
    let (attacked_class, raise) = match params.target_label {
        Some(t) => (t, true),
        None => (sample.label, false),
    };

    let mut current = sample.image.clone();
    let mut touched = vec![false; sample.image.len()];
    let mut evading = evades(model, &current, sample.label, params.target_label)?;

    for _ in 0..params.iterations {
        if evading {
            break;
        }
        let grad = model.graph.input_gradient(&current, attacked_class)?;
        let g = grad.wrt_input.data();
        let x = current.data();

        // Pick the untouched pixel with the largest |gradient| * room.
        let mut best: Option<(usize, f64, f64)> = None; // (index, saliency, new value)
        for i in 0..x.len() {
            if touched[i] || g[i] == 0.0 {
                continue;
            }
            // To lower the score, move against the gradient; to raise it,
            // move with it.
            let toward_hi = if raise { g[i] > 0.0 } else { g[i] < 0.0 };
            let (room, target) = if toward_hi {
                (hi - x[i], hi)
            } else {
                (x[i] - lo, lo)
            };
            if room <= 0.0 {
                continue;
            }
            let saliency = g[i].abs() * room;
            let better = match &best {
                None => true,
                Some((bi, bs, _)) => saliency > *bs || (saliency == *bs && i < *bi),
            };
            if better {
                best = Some((i, saliency, target));
            }
        }
        let Some((idx, _, target)) = best else {
            break; // no pixel has any leverage left
        };
        let mut data = current.into_data();
        data[idx] = target;
        touched[idx] = true;
        current =
            Tensor::new(data, sample.image.shape().to_vec()).map_err(crate::graph::GraphError::from)?;
        evading = evades(model, &current, sample.label, params.target_label)?;
    }

    Ok(AdversarialSample {
        perturbed_fraction: perturbed_fraction(&current, &sample.image),
        original: sample.clone(),
        perturbed: current,
        generator_id: "jsma".into(),
        surrogate_ids: vec![model.id.clone()],
        queries_spent: 0,
        surrogate_evading: evading,
    })
}

fn evades(
    model: &SurrogateModel,
    x: &Tensor,
    true_label: usize,
    target: Option<usize>,
) -> Result<bool, AttackError> {
    let predicted = model.predict(x)?;
    Ok(match target {
        Some(t) => predicted == t,
        None => predicted != true_label,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{bank_specs, synth_dataset, train};

    fn surrogate() -> (SurrogateModel, crate::zoo::Dataset) {
        let data = synth_dataset(7, 32);
        let (model, _) = train(&bank_specs().remove(0), &data, 24, 11).unwrap();
        (model, data)
    }

    #[test]
    fn zero_pixel_budget_returns_input_unchanged() {
        let (model, data) = surrogate();
        let params = AttackParams {
            iterations: 0,
            ..Default::default()
        };
        let adv = jsma(&model, &data.samples[0], &params).unwrap();
        assert_eq!(adv.perturbed.data(), data.samples[0].image.data());
        assert_eq!(adv.perturbed_fraction, 0.0);
    }

    #[test]
    fn respects_pixel_budget_and_bounds() {
        let (model, data) = surrogate();
        let budget = 25;
        let params = AttackParams {
            iterations: budget,
            ..Default::default()
        };
        for sample in data.samples.iter().take(6) {
            let adv = jsma(&model, sample, &params).unwrap();
            let changed = adv
                .perturbed
                .data()
                .iter()
                .zip(sample.image.data())
                .filter(|(a, b)| a != b)
                .count();
            assert!(changed <= budget, "{changed} pixels changed, budget {budget}");
            for &p in adv.perturbed.data() {
                assert!((0.0..=255.0).contains(&p));
            }
            assert!((adv.perturbed_fraction - changed as f64 / 784.0).abs() < 1e-12);
        }
    }

    #[test]
    fn exhausted_budget_is_reported_as_non_evading() {
        let (model, data) = surrogate();
        // One pixel is almost never enough on a trained model.
        let params = AttackParams {
            iterations: 1,
            ..Default::default()
        };
        let evaded = data
            .samples
            .iter()
            .take(10)
            .filter(|s| jsma(&model, s, &params).unwrap().surrogate_evading)
            .count();
        assert!(evaded <= 2, "single-pixel flips should be rare, got {evaded}");
    }

    #[test]
    fn flips_surrogate_given_a_generous_budget() {
        let (model, data) = surrogate();
        let params = AttackParams {
            iterations: 200,
            ..Default::default()
        };
        let flipped = data
            .samples
            .iter()
            .take(10)
            .filter(|s| jsma(&model, s, &params).unwrap().surrogate_evading)
            .count();
        assert!(flipped >= 7, "only {flipped}/10 flipped with 200-pixel budget");
    }
}
