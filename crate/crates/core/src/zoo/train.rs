//! Plain-SGD training for surrogate models.
//!
//! Training internally rescales pixels to unit range for stable steps, then
//! folds that scale into the first linear layer so the finished model
//! consumes raw `[0, 255]` tensors directly.

use super::arch::ArchitectureSpec;
use super::dataset::Dataset;
use crate::graph::{ComputationGraph, GraphError};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("dataset unusable for training: {0}")]
    Dataset(#[from] super::dataset::DatasetError),
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged { epoch: usize },
    #[error("bank member fingerprints collide: {fingerprint}")]
    FingerprintCollision { fingerprint: String },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Additive Gaussian pixel noise applied to training inputs; 0 disables.
    pub noise_sigma: f64,
    /// One block in `holdout_stride` is reserved for accuracy measurement.
    pub holdout_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 24,
            seed: 0,
            learning_rate: 0.1,
            batch_size: 16,
            noise_sigma: 0.0,
            holdout_stride: 5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub held_out_accuracy: f64,
    pub final_loss: f64,
    pub epochs_run: usize,
}

/// A trained classifier plus the metadata the rest of the pipeline needs.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub id: String,
    pub graph: ComputationGraph,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub training_tag: String,
}

impl SurrogateModel {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, GraphError> {
        self.graph.forward(x)
    }

    /// Argmax class; ties resolve to the lower index.
    pub fn predict(&self, x: &Tensor) -> Result<usize, GraphError> {
        let y = self.graph.forward(x)?;
        Ok(argmax(y.data()))
    }

    pub fn fingerprint(&self) -> String {
        self.graph.fingerprint()
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Trains `spec` on `data` with default hyperparameters.
pub fn train(
    spec: &ArchitectureSpec,
    data: &Dataset,
    epochs: usize,
    seed: u64,
) -> Result<(SurrogateModel, TrainReport), TrainError> {
    let cfg = TrainConfig {
        epochs,
        seed,
        noise_sigma: if spec.training_tag == "noise-augmented" {
            12.0
        } else {
            0.0
        },
        ..TrainConfig::default()
    };
    train_with(spec, data, &cfg)
}

pub fn train_with(
    spec: &ArchitectureSpec,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(SurrogateModel, TrainReport), TrainError> {
    data.validate()?;
    let input_shape = data.image_shape().to_vec();
    let num_classes = data.num_classes();
    let scale = data.pixel_range.1.max(1.0);
    let mut graph = spec.build(&input_shape, num_classes, cfg.seed)?;

    let (train_idx, held_idx) = data.split_blocks(cfg.holdout_stride.max(2), cfg.holdout_stride.max(2) - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f00d);
    let noise = (cfg.noise_sigma > 0.0)
        .then(|| Normal::new(0.0, cfg.noise_sigma / scale).unwrap());

    // Pre-scaled training copies; the graph trains in unit pixel range.
    let scaled: Vec<(Tensor, usize)> = data
        .samples
        .iter()
        .map(|s| (s.image.map(|v| v / scale).expect("finite"), s.label))
        .collect();

    let mut order: Vec<usize> = train_idx.clone();
    let mut final_loss = 0.0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let mut batch_grads: Option<Vec<crate::graph::LayerGrads>> = None;
            for &i in chunk {
                let (image, label) = &scaled[i];
                let input = match &noise {
                    Some(n) => {
                        let jittered: Vec<f64> = image
                            .data()
                            .iter()
                            .map(|&v| (v + n.sample(&mut rng)).clamp(0.0, 1.0))
                            .collect();
                        Tensor::new(jittered, input_shape.clone()).expect("finite")
                    }
                    None => image.clone(),
                };
                let (loss, grads) = graph.loss_grads_ce(&input, *label)?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { epoch });
                }
                epoch_loss += loss;
                batch_grads = Some(match batch_grads {
                    None => grads,
                    Some(acc) => accumulate(acc, grads),
                });
            }
            if let Some(grads) = batch_grads {
                graph.apply_gradients(&grads, cfg.learning_rate / chunk.len() as f64);
            }
        }
        final_loss = if order.is_empty() {
            0.0
        } else {
            epoch_loss / order.len() as f64
        };
    }

    // Fold the unit-range scaling into the first linear layer: the shipped
    // model scores raw pixel tensors.
    graph.fold_input_scale(scale);

    let model = SurrogateModel {
        id: format!("{}-s{}", spec.kind.name(), cfg.seed),
        graph,
        input_shape,
        num_classes,
        training_tag: spec.training_tag.clone(),
    };

    let mut correct = 0usize;
    for &i in &held_idx {
        if model.predict(&data.samples[i].image)? == data.samples[i].label {
            correct += 1;
        }
    }
    let held_out_accuracy = if held_idx.is_empty() {
        0.0
    } else {
        correct as f64 / held_idx.len() as f64
    };
    Ok((
        model,
        TrainReport {
            held_out_accuracy,
            final_loss,
            epochs_run: cfg.epochs,
        },
    ))
}

fn accumulate(
    mut acc: Vec<crate::graph::LayerGrads>,
    other: Vec<crate::graph::LayerGrads>,
) -> Vec<crate::graph::LayerGrads> {
    use crate::graph::LayerGrads;
    for (a, b) in acc.iter_mut().zip(other) {
        match (a, b) {
            (LayerGrads::Dense { dw, db }, LayerGrads::Dense { dw: dw2, db: db2 }) => {
                for (x, y) in dw.iter_mut().zip(dw2) {
                    *x += y;
                }
                for (x, y) in db.iter_mut().zip(db2) {
                    *x += y;
                }
            }
            (LayerGrads::Conv2d { dk, db }, LayerGrads::Conv2d { dk: dk2, db: db2 }) => {
                for (x, y) in dk.iter_mut().zip(dk2) {
                    *x += y;
                }
                for (x, y) in db.iter_mut().zip(db2) {
                    *x += y;
                }
            }
            _ => {}
        }
    }
    acc
}

#[derive(Debug, Clone)]
pub struct ModelBank {
    pub members: Vec<SurrogateModel>,
}

impl ModelBank {
    pub fn ids(&self) -> Vec<String> {
        self.members.iter().map(|m| m.id.clone()).collect()
    }
}

/// Trains the five standard bank members. Member fingerprints must be
/// pairwise distinct, which the standard specs guarantee.
pub fn build_bank(
    data: &Dataset,
    seed: u64,
    epochs: usize,
) -> Result<(ModelBank, Vec<TrainReport>), TrainError> {
    let mut members = Vec::new();
    let mut reports = Vec::new();
    for spec in super::arch::bank_specs() {
        let (model, report) = train(&spec, data, epochs, seed + spec.seed_offset)?;
        members.push(model);
        reports.push(report);
    }
    for i in 0..members.len() {
        for j in (i + 1)..members.len() {
            if members[i].fingerprint() == members[j].fingerprint() {
                return Err(TrainError::FingerprintCollision {
                    fingerprint: members[i].fingerprint(),
                });
            }
        }
    }
    Ok((ModelBank { members }, reports))
}
