//! Architecture templates for the surrogate bank.

use crate::graph::{ComputationGraph, GraphError, Layer, Padding};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

/// Layer-stack families the zoo knows how to build. The five bank entries
/// use five distinct stacks so their fingerprints never collide.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    /// flatten - dense(64) - relu - dense(classes) - softmax
    Dense,
    /// conv(4@3x3 same) - relu - pool - flatten - dense - softmax
    ConvSmall,
    /// two conv/pool stages before the classifier head
    ConvDeep,
    /// conv front end with a hidden dense layer
    ConvHybrid,
    /// valid-padding conv, no pooling
    ConvValid,
    /// flatten - dense(40) - relu - dense(24) - relu - dense - softmax
    DenseDeep,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Dense => "dense",
            ArchKind::ConvSmall => "conv-small",
            ArchKind::ConvDeep => "conv-deep",
            ArchKind::ConvHybrid => "conv-hybrid",
            ArchKind::ConvValid => "conv-valid",
            ArchKind::DenseDeep => "dense-deep",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "dense" => ArchKind::Dense,
            "conv-small" => ArchKind::ConvSmall,
            "conv-deep" => ArchKind::ConvDeep,
            "conv-hybrid" => ArchKind::ConvHybrid,
            "conv-valid" => ArchKind::ConvValid,
            "dense-deep" => ArchKind::DenseDeep,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    /// Free-form description of the training recipe, e.g. `plain` or
    /// `noise-augmented`. Carried through to the trained model.
    pub training_tag: String,
    pub seed_offset: u64,
}

/// The five-member default bank. Fingerprints are pairwise distinct by
/// construction; the last member trains with input-noise augmentation.
pub fn bank_specs() -> Vec<ArchitectureSpec> {
    let plain = |kind, seed_offset| ArchitectureSpec {
        kind,
        training_tag: "plain".into(),
        seed_offset,
    };
    vec![
        plain(ArchKind::Dense, 1),
        plain(ArchKind::ConvSmall, 2),
        plain(ArchKind::ConvDeep, 3),
        plain(ArchKind::ConvHybrid, 4),
        ArchitectureSpec {
            kind: ArchKind::ConvValid,
            training_tag: "noise-augmented".into(),
            seed_offset: 5,
        },
    ]
}

/// The stack used for the opaque scoring service's internal classifier. It
/// deliberately differs from every bank member.
pub fn hidden_classifier_spec() -> ArchitectureSpec {
    ArchitectureSpec {
        kind: ArchKind::DenseDeep,
        training_tag: "plain".into(),
        seed_offset: 0,
    }
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(data, shape.to_vec()).expect("finite init")
}

fn dense(rng: &mut ChaCha8Rng, out: usize, inp: usize) -> Layer {
    // Xavier-style uniform bounds.
    let limit = (6.0 / (out + inp) as f64).sqrt();
    Layer::Dense {
        weights: uniform_tensor(rng, &[out, inp], limit),
        bias: Tensor::zeros(&[out]),
    }
}

fn conv(rng: &mut ChaCha8Rng, oc: usize, ic: usize, k: usize, padding: Padding) -> Layer {
    let fan_in = ic * k * k;
    let fan_out = oc * k * k;
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Layer::Conv2d {
        kernels: uniform_tensor(rng, &[oc, ic, k, k], limit),
        bias: Tensor::zeros(&[oc]),
        padding,
    }
}

impl ArchitectureSpec {
    /// Builds a randomly initialised graph for `input_shape` images. The
    /// same seed always yields the same initialisation.
    pub fn build(
        &self,
        input_shape: &[usize],
        num_classes: usize,
        seed: u64,
    ) -> Result<ComputationGraph, GraphError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let [c, h, w] = input_shape else {
            return Err(GraphError::InputShape {
                expected: vec![0, 0, 0],
                actual: input_shape.to_vec(),
            });
        };
        let (c, h, w) = (*c, *h, *w);
        let flat = c * h * w;
        let layers = match self.kind {
            ArchKind::Dense => vec![
                Layer::Flatten,
                dense(rng, 64, flat),
                Layer::Relu,
                dense(rng, num_classes, 64),
                Layer::Softmax,
            ],
            ArchKind::ConvSmall => {
                let pooled = 4 * (h / 2) * (w / 2);
                vec![
                    conv(rng, 4, c, 3, Padding::Same),
                    Layer::Relu,
                    Layer::MaxPool2x2,
                    Layer::Flatten,
                    dense(rng, num_classes, pooled),
                    Layer::Softmax,
                ]
            }
            ArchKind::ConvDeep => {
                let pooled = 8 * (h / 4) * (w / 4);
                vec![
                    conv(rng, 4, c, 3, Padding::Same),
                    Layer::Relu,
                    Layer::MaxPool2x2,
                    conv(rng, 8, 4, 3, Padding::Same),
                    Layer::Relu,
                    Layer::MaxPool2x2,
                    Layer::Flatten,
                    dense(rng, num_classes, pooled),
                    Layer::Softmax,
                ]
            }
            ArchKind::ConvHybrid => {
                let pooled = 4 * (h / 2) * (w / 2);
                vec![
                    conv(rng, 4, c, 5, Padding::Same),
                    Layer::Relu,
                    Layer::MaxPool2x2,
                    Layer::Flatten,
                    dense(rng, 32, pooled),
                    Layer::Relu,
                    dense(rng, num_classes, 32),
                    Layer::Softmax,
                ]
            }
            ArchKind::ConvValid => {
                let spatial = 6 * (h - 2) * (w - 2);
                vec![
                    conv(rng, 6, c, 3, Padding::Valid),
                    Layer::Relu,
                    Layer::Flatten,
                    dense(rng, num_classes, spatial),
                    Layer::Softmax,
                ]
            }
            ArchKind::DenseDeep => vec![
                Layer::Flatten,
                dense(rng, 40, flat),
                Layer::Relu,
                dense(rng, 24, 40),
                Layer::Relu,
                dense(rng, num_classes, 24),
                Layer::Softmax,
            ],
        };
        ComputationGraph::new(input_shape.to_vec(), layers)
    }
}
