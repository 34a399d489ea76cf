//! Gradient-sign attacks on a differentiable surrogate.

use super::{clamp_to_ball, perturbed_fraction, AdversarialSample, AttackError, AttackParams};
use crate::tensor::{sign0, Tensor};
use crate::zoo::{Sample, SurrogateModel};

/// Single-step gradient sign: `x + eps * sign(grad_x CE(f(x), label))`,
/// clipped to pixel bounds. Targeted mode descends the loss toward
/// `target_label` instead. Spends no service queries.
///
/// Equivalent by construction to [`ifgsm`] with one iteration and
/// `step_size == epsilon`.
pub fn fgsm(
    model: &SurrogateModel,
    sample: &Sample,
    params: &AttackParams,
) -> Result<AdversarialSample, AttackError> {
    let single = AttackParams {
        iterations: 1,
        step_size: params.epsilon,
        ..params.clone()
    };
    iterate_gradient_sign(model, sample, &single, "fgsm")
}

/// Iterative gradient sign: repeated `step_size` moves, each re-clipped to
/// the epsilon ball around the original and to pixel bounds.
pub fn ifgsm(
    model: &SurrogateModel,
    sample: &Sample,
    params: &AttackParams,
) -> Result<AdversarialSample, AttackError> {
    iterate_gradient_sign(model, sample, params, "ifgsm")
}

fn iterate_gradient_sign(
    model: &SurrogateModel,
    sample: &Sample,
    params: &AttackParams,
    generator_id: &str,
) -> Result<AdversarialSample, AttackError> {
    params.validate()?;
    if sample.image.shape() != model.input_shape {
        return Err(AttackError::ShapeMismatch {
            expected: model.input_shape.clone(),
            actual: sample.image.shape().to_vec(),
        });
    }
    let origin = sample.image.data();
    let mut current = sample.image.clone();
    for _ in 0..params.iterations {
        // Untargeted: ascend the loss of the true label. Targeted: descend
        // the loss of the target label.
        let (loss_label, direction) = match params.target_label {
            Some(t) => (t, -1.0),
            None => (sample.label, 1.0),
        };
        let (_, grad) = model.graph.input_gradient_ce(&current, loss_label)?;
        let stepped: Vec<f64> = current
            .data()
            .iter()
            .zip(grad.wrt_input.data())
            .zip(origin)
            .map(|((&v, &g), &o)| {
                clamp_to_ball(
                    v + direction * params.step_size * sign0(g),
                    o,
                    params.epsilon,
                    params.pixel_bounds,
                )
            })
            .collect();
        current = Tensor::new(stepped, sample.image.shape().to_vec())
            .map_err(crate::graph::GraphError::from)?;
    }
    let predicted = model.predict(&current)?;
    let surrogate_evading = match params.target_label {
        Some(t) => predicted == t,
        None => predicted != sample.label,
    };
    Ok(AdversarialSample {
        perturbed_fraction: perturbed_fraction(&current, &sample.image),
        original: sample.clone(),
        perturbed: current,
        generator_id: generator_id.into(),
        surrogate_ids: vec![model.id.clone()],
        queries_spent: 0,
        surrogate_evading,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{bank_specs, synth_dataset, train};

    fn surrogate() -> (SurrogateModel, crate::zoo::Dataset) {
        let data = synth_dataset(7, 32);
        let (model, report) = train(&bank_specs().remove(0), &data, 24, 11).unwrap();
        assert!(report.held_out_accuracy > 0.85);
        (model, data)
    }

    #[test]
    fn fgsm_stays_in_ball_and_bounds_and_spends_no_queries() {
        let (model, data) = surrogate();
        let params = AttackParams::default();
        for sample in data.samples.iter().take(10) {
            let adv = fgsm(&model, sample, &params).unwrap();
            assert_eq!(adv.queries_spent, 0);
            assert!(adv.perturbed.linf_distance(&sample.image) <= params.epsilon + 1e-9);
            for &p in adv.perturbed.data() {
                assert!((0.0..=255.0).contains(&p));
            }
            assert_eq!(adv.generator_id, "fgsm");
            assert_eq!(adv.surrogate_ids, vec![model.id.clone()]);
        }
    }

    #[test]
    fn fgsm_equals_single_step_ifgsm_bit_for_bit() {
        let (model, data) = surrogate();
        let params = AttackParams {
            epsilon: 16.0,
            iterations: 1,
            step_size: 16.0,
            ..Default::default()
        };
        for sample in data.samples.iter().take(8) {
            let a = fgsm(&model, sample, &AttackParams::default()).unwrap();
            let b = ifgsm(&model, sample, &params).unwrap();
            assert_eq!(a.perturbed.data(), b.perturbed.data());
        }
    }

    #[test]
    fn ifgsm_never_leaves_the_ball_mid_run() {
        let (model, data) = surrogate();
        let params = AttackParams {
            epsilon: 8.0,
            iterations: 12,
            step_size: 2.0,
            ..Default::default()
        };
        let adv = ifgsm(&model, &data.samples[2], &params).unwrap();
        assert!(adv.perturbed.linf_distance(&data.samples[2].image) <= 8.0 + 1e-9);
    }

    #[test]
    fn fgsm_flips_most_surrogate_predictions_at_eps16() {
        let (model, data) = surrogate();
        let params = AttackParams::default();
        let flipped = data
            .samples
            .iter()
            .take(40)
            .filter(|s| fgsm(&model, s, &params).unwrap().surrogate_evading)
            .count();
        assert!(
            flipped * 5 >= 2 * 40,
            "only {flipped}/40 surrogate predictions flipped at eps 16"
        );
    }

    #[test]
    fn attacks_are_deterministic() {
        let (model, data) = surrogate();
        let params = AttackParams::default();
        let a = ifgsm(&model, &data.samples[5], &params).unwrap();
        let b = ifgsm(&model, &data.samples[5], &params).unwrap();
        assert_eq!(a.perturbed.data(), b.perturbed.data());
    }
}
