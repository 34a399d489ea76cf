//! Feature influence: per-model integrated gradients and cross-model
//! consensus selection.
//!
//! Influence for one model is the path integral of the class-score gradient
//! from a baseline to the input, approximated with a right-endpoint Riemann
//! sum. Features that rank highly for strictly more than `n` of the bank's
//! `k` models form the consensus set the staged attack perturbs.

use crate::exec::{self, Exec};
use crate::tensor::Tensor;
use crate::zoo::SurrogateModel;
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InfluenceError {
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error("baseline shape {baseline:?} does not match input shape {input:?}")]
    BaselineShape {
        input: Vec<usize>,
        baseline: Vec<usize>,
    },
    #[error("steps must be >= 1")]
    ZeroSteps,
    #[error("no influence maps supplied")]
    EmptyMapList,
    #[error("influence maps disagree on feature count: {0} vs {1}")]
    MapShapeMismatch(usize, usize),
    #[error("consensus threshold {n} must satisfy 1 <= n < k = {k}")]
    BadThreshold { n: usize, k: usize },
    #[error("top_fraction {0} must lie in (0, 1]")]
    BadFraction(f64),
}

/// Per-feature influence scores of one model for one input.
#[derive(Debug, Clone)]
pub struct InfluenceMap {
    pub scores: Tensor,
    pub model_id: String,
    pub baseline_id: String,
    pub steps_m: usize,
}

impl InfluenceMap {
    /// Flat JSON array of scores, for export and external plotting.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self.scores.data()).expect("floats serialise")
    }
}

/// Integrated gradients of `model`'s `class_index` score along the straight
/// path from `baseline` to `input`, using `steps_m` right-endpoint samples:
/// the gradient is evaluated at `baseline + (k/m) * (input - baseline)` for
/// `k = 1..=m` and averaged, then scaled by `(input - baseline)` per feature.
pub fn integrated_gradients(
    model: &SurrogateModel,
    input: &Tensor,
    baseline: &Tensor,
    class_index: usize,
    steps_m: usize,
) -> Result<InfluenceMap, InfluenceError> {
    integrated_gradients_with(Exec::default(), model, input, baseline, class_index, steps_m)
}

/// [`integrated_gradients`] with an explicit execution strategy. Gradients
/// for the `m` path points are independent and map in index order; the
/// averaging reduction is always sequential, so results are bit-identical
/// across strategies.
pub fn integrated_gradients_with(
    exec: Exec,
    model: &SurrogateModel,
    input: &Tensor,
    baseline: &Tensor,
    class_index: usize,
    steps_m: usize,
) -> Result<InfluenceMap, InfluenceError> {
    if steps_m == 0 {
        return Err(InfluenceError::ZeroSteps);
    }
    if !input.same_shape(baseline) {
        return Err(InfluenceError::BaselineShape {
            input: input.shape().to_vec(),
            baseline: baseline.shape().to_vec(),
        });
    }
    let x = input.data();
    let b = baseline.data();
    let m = steps_m;

    let step_grads: Vec<Result<Vec<f64>, InfluenceError>> = exec::map_indexed(exec, m, |k| {
        let alpha = (k + 1) as f64 / m as f64;
        let point: Vec<f64> = b
            .iter()
            .zip(x)
            .map(|(&bi, &xi)| bi + alpha * (xi - bi))
            .collect();
        let point = Tensor::new(point, input.shape().to_vec())
            .map_err(crate::graph::GraphError::from)?;
        let grad = model.graph.input_gradient(&point, class_index)?;
        Ok(grad.wrt_input.into_data())
    });

    let mut sum = vec![0.0f64; x.len()];
    for g in step_grads {
        let g = g?;
        for (s, v) in sum.iter_mut().zip(&g) {
            *s += v;
        }
    }
    let scores: Vec<f64> = sum
        .iter()
        .zip(x.iter().zip(b))
        .map(|(&s, (&xi, &bi))| (xi - bi) * s / m as f64)
        .collect();
    Ok(InfluenceMap {
        scores: Tensor::new(scores, input.shape().to_vec())
            .map_err(crate::graph::GraphError::from)?,
        model_id: model.id.clone(),
        baseline_id: "zeros".into(),
        steps_m: m,
    })
}

/// Indices of the `max(1, floor(top_fraction * d))` features with largest
/// `|score|`; ties break toward the lower index.
pub fn active_set(map: &InfluenceMap, top_fraction: f64) -> Result<BTreeSet<usize>, InfluenceError> {
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(InfluenceError::BadFraction(top_fraction));
    }
    let d = map.scores.len();
    let take = ((top_fraction * d as f64).floor() as usize).clamp(1, d);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (map.scores.data()[a].abs(), map.scores.data()[b].abs());
        sb.partial_cmp(&sa).unwrap().then(a.cmp(&b))
    });
    Ok(order.into_iter().take(take).collect())
}

/// Result of cross-model consensus over per-model active sets.
#[derive(Debug, Clone)]
pub struct ConsensusSelection {
    /// Features active in strictly more than `threshold_n` models, ordered
    /// by descending total `|score|` (ties toward the lower index).
    pub selected_indices: Vec<usize>,
    pub per_model_active: BTreeMap<String, BTreeSet<usize>>,
    pub threshold_n: usize,
    pub bank_size_k: usize,
    pub top_fraction: f64,
}

/// Selects features active for strictly more than `threshold_n` of the `k`
/// supplied maps. Counting is order-free; the ranking sum iterates maps in
/// ascending `model_id` order so the result is invariant to input order.
pub fn consensus_select(
    maps: &[InfluenceMap],
    threshold_n: usize,
    top_fraction: f64,
) -> Result<ConsensusSelection, InfluenceError> {
    if maps.is_empty() {
        return Err(InfluenceError::EmptyMapList);
    }
    let k = maps.len();
    if threshold_n == 0 || threshold_n >= k {
        return Err(InfluenceError::BadThreshold { n: threshold_n, k });
    }
    let d = maps[0].scores.len();
    for m in maps {
        if m.scores.len() != d {
            return Err(InfluenceError::MapShapeMismatch(d, m.scores.len()));
        }
    }

    let mut canonical: Vec<&InfluenceMap> = maps.iter().collect();
    canonical.sort_by(|a, b| a.model_id.cmp(&b.model_id));

    let mut per_model_active = BTreeMap::new();
    let mut counts = vec![0usize; d];
    let mut weight = vec![0.0f64; d];
    for map in &canonical {
        let active = active_set(map, top_fraction)?;
        for &i in &active {
            counts[i] += 1;
        }
        for (w, s) in weight.iter_mut().zip(map.scores.data()) {
            *w += s.abs();
        }
        per_model_active.insert(map.model_id.clone(), active);
    }

    let mut selected: Vec<usize> = (0..d).filter(|&i| counts[i] > threshold_n).collect();
    selected.sort_by(|&a, &b| weight[b].partial_cmp(&weight[a]).unwrap().then(a.cmp(&b)));

    Ok(ConsensusSelection {
        selected_indices: selected,
        per_model_active,
        threshold_n,
        bank_size_k: k,
        top_fraction,
    })
}
