//! Property tests for the numeric core: analytic gradients against finite
//! differences, attribution completeness, consensus selection against a
//! brute-force reference, and attack iterates staying inside their
//! constraint sets.

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use atf_core::attack::{ifgsm, jsma, AttackParams};
use atf_core::influence::{active_set, consensus_select, integrated_gradients, InfluenceMap};
use atf_core::zoo::{synth_dataset, Sample, SurrogateModel};
use atf_core::{ComputationGraph, Layer, Padding, Tensor};

fn tensor_from(rng: &mut ChaCha8Rng, shape: Vec<usize>, amp: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-amp..amp)).collect();
    Tensor::new(data, shape).unwrap()
}

/// A small conv-pool-dense-softmax network with randomly drawn weights.
fn random_graph(seed: u64) -> ComputationGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kernels = tensor_from(&mut rng, vec![2, 1, 3, 3], 0.8);
    let kbias = tensor_from(&mut rng, vec![2], 0.2);
    let weights = tensor_from(&mut rng, vec![3, 2 * 4 * 4], 0.8);
    let bias = tensor_from(&mut rng, vec![3], 0.2);
    ComputationGraph::new(
        vec![1, 8, 8],
        vec![
            Layer::Conv2d {
                kernels,
                bias: kbias,
                padding: Padding::Same,
            },
            Layer::Relu,
            Layer::MaxPool2x2,
            Layer::Flatten,
            Layer::Dense { weights, bias },
            Layer::Softmax,
        ],
    )
    .unwrap()
}

fn wrap(graph: ComputationGraph) -> SurrogateModel {
    SurrogateModel {
        id: "prop".into(),
        input_shape: graph.input_shape().to_vec(),
        graph,
        num_classes: 3,
        training_tag: "scratch".into(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// The analytic input gradient matches central finite differences on a
    /// network with conv, pooling, and softmax in play.
    #[test]
    fn analytic_gradient_matches_finite_differences(seed in 0u64..500, class in 0usize..3) {
        let graph = random_graph(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        // Keep away from ReLU kinks and pool ties by nudging off round values.
        let x = tensor_from(&mut rng, vec![1, 8, 8], 2.0);
        let grad = graph.input_gradient(&x, class).unwrap();

        let h = 1e-5;
        let mut checked = 0;
        for i in (0..64).step_by(7) {
            let up = {
                let mut d = x.data().to_vec();
                d[i] += h;
                graph.forward(&Tensor::new(d, vec![1, 8, 8]).unwrap()).unwrap().data()[class]
            };
            let down = {
                let mut d = x.data().to_vec();
                d[i] -= h;
                graph.forward(&Tensor::new(d, vec![1, 8, 8]).unwrap()).unwrap().data()[class]
            };
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.wrt_input.data()[i];
            let tol = 1e-4f64.max(1e-3 * numeric.abs());
            prop_assert!(
                (numeric - analytic).abs() <= tol,
                "pixel {i}: numeric {numeric} vs analytic {analytic}"
            );
            checked += 1;
        }
        prop_assert!(checked > 5);
    }

    /// Gradients are linear: the gradient of a weighted score combination is
    /// the same weighted combination of per-class gradients.
    #[test]
    fn gradient_is_linear_in_class_weights(seed in 0u64..500, w0 in -2.0f64..2.0, w1 in -2.0f64..2.0) {
        let graph = random_graph(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
        let x = tensor_from(&mut rng, vec![1, 8, 8], 2.0);

        let combined = graph
            .input_gradient_weighted(&x, &[w0, w1, 0.0])
            .unwrap();
        let g0 = graph.input_gradient(&x, 0).unwrap();
        let g1 = graph.input_gradient(&x, 1).unwrap();
        for i in 0..64 {
            let manual = w0 * g0.wrt_input.data()[i] + w1 * g1.wrt_input.data()[i];
            prop_assert!((combined.wrt_input.data()[i] - manual).abs() < 1e-9);
        }
    }

    /// Attribution scores over a path sum to (nearly) the score difference
    /// between the input and the baseline once the step count is high.
    #[test]
    fn attribution_is_complete_at_high_step_counts(seed in 0u64..200, class in 0usize..3) {
        let model = wrap(random_graph(seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1111);
        let x = tensor_from(&mut rng, vec![1, 8, 8], 2.0);
        let baseline = Tensor::zeros(&[1, 8, 8]);

        let map = integrated_gradients(&model, &x, &baseline, class, 300).unwrap();
        let total: f64 = map.scores.data().iter().sum();
        let fx = model.forward(&x).unwrap().data()[class];
        let fb = model.forward(&baseline).unwrap().data()[class];
        let err = (total - (fx - fb)).abs();
        prop_assert!(
            err <= 0.02 * (fx - fb).abs().max(0.05),
            "completeness gap {err}, span {}",
            fx - fb
        );
    }

    /// Consensus agrees with a brute-force recomputation and never selects
    /// more pixels than one model's active set allows.
    #[test]
    fn consensus_matches_brute_force(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(10usize..60);
        let k = rng.random_range(2usize..6);
        let n = rng.random_range(1..k);
        let f = rng.random_range(0.05f64..0.6);

        let maps: Vec<InfluenceMap> = (0..k)
            .map(|m| InfluenceMap {
                scores: tensor_from(&mut rng, vec![d], 3.0),
                model_id: format!("m{m}"),
                baseline_id: "zeros".into(),
                steps_m: 1,
            })
            .collect();

        let got = consensus_select(&maps, n, f).unwrap();

        // Brute force: count activations per index, keep counts > n, order
        // by |score| summed over the whole bank, then index.
        let mut counts = vec![0usize; d];
        let mut weight = vec![0.0f64; d];
        for map in &maps {
            let active: BTreeSet<usize> = active_set(map, f).unwrap();
            for &i in &active {
                counts[i] += 1;
            }
            for i in 0..d {
                weight[i] += map.scores.data()[i].abs();
            }
        }
        let mut expect: Vec<usize> = (0..d).filter(|&i| counts[i] > n).collect();
        expect.sort_by(|&a, &b| {
            weight[b].partial_cmp(&weight[a]).unwrap().then(a.cmp(&b))
        });
        prop_assert_eq!(&got.selected_indices, &expect);

        let per_model_cap = ((f * d as f64).floor() as usize).clamp(1, d);
        prop_assert!(got.selected_indices.len() <= k * per_model_cap);
        for (_, active) in &got.per_model_active {
            prop_assert_eq!(active.len(), per_model_cap);
        }
    }
}

/// The iterative sign attack never leaves the epsilon ball or the pixel
/// bounds, for any legal parameter combination.
#[test]
fn sign_attack_iterates_stay_feasible() {
    let data = synth_dataset(11, 4);
    let (model, _) = atf_core::zoo::train(
        &atf_core::zoo::bank_specs().remove(0),
        &data,
        2,
        5,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..40 {
        let eps = rng.random_range(1.0f64..64.0);
        let steps = rng.random_range(1usize..12);
        let step = rng.random_range(0.1f64..eps);
        let params = AttackParams {
            epsilon: eps,
            iterations: steps,
            step_size: step,
            ..Default::default()
        };
        let sample = &data.samples[trial % data.samples.len()];
        let adv = ifgsm(&model, sample, &params).unwrap();
        assert!(
            adv.perturbed.linf_distance(&sample.image) <= eps + 1e-9,
            "trial {trial}: left the {eps} ball"
        );
        for &p in adv.perturbed.data() {
            assert!((0.0..=255.0).contains(&p), "trial {trial}: pixel {p}");
        }
    }
}

/// The saliency attack touches at most its pixel budget and saturates only
/// within bounds.
#[test]
fn saliency_attack_respects_budget_for_random_budgets() {
    let data = synth_dataset(13, 4);
    let (model, _) = atf_core::zoo::train(
        &atf_core::zoo::bank_specs().remove(0),
        &data,
        2,
        5,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..30 {
        let budget = rng.random_range(0usize..40);
        let params = AttackParams {
            iterations: budget,
            ..Default::default()
        };
        let sample = &data.samples[trial % data.samples.len()];
        let adv = jsma(&model, sample, &params).unwrap();
        let changed = adv
            .perturbed
            .data()
            .iter()
            .zip(sample.image.data())
            .filter(|(a, b)| a != b)
            .count();
        assert!(changed <= budget, "trial {trial}: {changed} > {budget}");
        for &p in adv.perturbed.data() {
            assert!((0.0..=255.0).contains(&p));
        }
    }
}

/// A linear score head makes path attribution exact for any step count:
/// scores equal `w_i * x_i` against a zero baseline.
#[test]
fn linear_model_attribution_is_exact_for_any_step_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let d = 12;
    let weights = tensor_from(&mut rng, vec![2, d], 1.0);
    let graph = ComputationGraph::new(
        vec![d],
        vec![Layer::Dense {
            weights: weights.clone(),
            bias: Tensor::zeros(&[2]),
        }],
    )
    .unwrap();
    let model = SurrogateModel {
        id: "linear".into(),
        input_shape: vec![d],
        graph,
        num_classes: 2,
        training_tag: "scratch".into(),
    };
    let x = tensor_from(&mut rng, vec![d], 5.0);
    let baseline = Tensor::zeros(&[d]);
    for m in [1, 3, 17, 300] {
        let map = integrated_gradients(&model, &x, &baseline, 1, m).unwrap();
        for i in 0..d {
            let expect = weights.data()[d + i] * x.data()[i];
            assert!(
                (map.scores.data()[i] - expect).abs() < 1e-9,
                "m={m} i={i}"
            );
        }
    }
}
