//! Feed-forward computation graphs with reverse-mode differentiation.
//!
//! Graphs are straight-line layer stacks (no branching), which is all the
//! surrogate bank needs. Shapes are inferred and checked at construction, so
//! `forward` can only fail on a bad input tensor or a non-finite activation.
//! The backward pass produces gradients with respect to the input (used by
//! attribution and white-box attacks) and, on demand, with respect to the
//! weights (used by training).

use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input shape {actual:?} does not match graph input {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("layer {layer} ({kind}): {message}")]
    BadLayer {
        layer: usize,
        kind: &'static str,
        message: String,
    },
    #[error("class index {index} out of range for {classes} output classes")]
    ClassIndex { index: usize, classes: usize },
    #[error("non-finite activation after layer {layer} ({kind})")]
    NonFiniteActivation { layer: usize, kind: &'static str },
    #[error("graph must end in softmax for cross-entropy gradients")]
    MissingSoftmaxHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output spatial extent shrinks by `kernel - 1`.
    Valid,
    /// Zero padding that preserves spatial extent (odd kernels only).
    Same,
}

#[derive(Debug, Clone)]
pub enum Layer {
    /// Fully connected: `y = W x + b`, weights shaped `[out, in]`.
    Dense { weights: Tensor, bias: Tensor },
    /// 2-D convolution, stride 1, kernels shaped `[out_ch, in_ch, kh, kw]`.
    Conv2d {
        kernels: Tensor,
        bias: Tensor,
        padding: Padding,
    },
    Relu,
    /// 2x2 max pooling, stride 2; odd trailing rows/columns are dropped.
    MaxPool2x2,
    Flatten,
    Softmax,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::MaxPool2x2 => "maxpool",
            Layer::Flatten => "flatten",
            Layer::Softmax => "softmax",
        }
    }
}

/// Gradient of a scalar output with respect to the graph input.
#[derive(Debug, Clone)]
pub struct Gradient {
    pub wrt_input: Tensor,
}

/// Per-layer weight gradients produced by the training backward pass. Layers
/// without parameters contribute `None`.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    Dense { dw: Vec<f64>, db: Vec<f64> },
    Conv2d { dk: Vec<f64>, db: Vec<f64> },
    None,
}

#[derive(Debug, Clone)]
pub struct ComputationGraph {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// Activation shape after each layer, `[0]` being the input shape.
    shapes: Vec<Vec<usize>>,
}

fn conv_dims(
    idx: usize,
    in_shape: &[usize],
    kernels: &Tensor,
    padding: Padding,
) -> Result<(usize, usize, usize, usize, usize, usize, usize), GraphError> {
    let bad = |message: String| GraphError::BadLayer {
        layer: idx,
        kind: "conv2d",
        message,
    };
    let [c, h, w] = in_shape else {
        return Err(bad(format!("needs [channels, h, w] input, got {in_shape:?}")));
    };
    let [oc, ic, kh, kw] = kernels.shape() else {
        return Err(bad(format!(
            "kernels must be [out_ch, in_ch, kh, kw], got {:?}",
            kernels.shape()
        )));
    };
    if ic != c {
        return Err(bad(format!("kernel expects {ic} input channels, input has {c}")));
    }
    let (ph, pw) = match padding {
        Padding::Valid => (0usize, 0usize),
        Padding::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(bad(format!("same padding needs odd kernels, got {kh}x{kw}")));
            }
            ((kh - 1) / 2, (kw - 1) / 2)
        }
    };
    if h + 2 * ph < *kh || w + 2 * pw < *kw {
        return Err(bad(format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
    }
    let oh = h + 2 * ph - kh + 1;
    let ow = w + 2 * pw - kw + 1;
    Ok((*oc, *kh, *kw, ph, pw, oh, ow))
}

fn infer_shape(idx: usize, layer: &Layer, in_shape: &[usize]) -> Result<Vec<usize>, GraphError> {
    match layer {
        Layer::Dense { weights, bias } => {
            let bad = |message: String| GraphError::BadLayer {
                layer: idx,
                kind: "dense",
                message,
            };
            let [out, inp] = weights.shape() else {
                return Err(bad(format!("weights must be rank 2, got {:?}", weights.shape())));
            };
            if in_shape != [*inp] {
                return Err(bad(format!("expects flat [{inp}] input, got {in_shape:?}")));
            }
            if bias.shape() != [*out] {
                return Err(bad(format!("bias shape {:?} != [{out}]", bias.shape())));
            }
            Ok(vec![*out])
        }
        Layer::Conv2d {
            kernels,
            bias,
            padding,
        } => {
            let (oc, _, _, _, _, oh, ow) = conv_dims(idx, in_shape, kernels, *padding)?;
            if bias.shape() != [oc] {
                return Err(GraphError::BadLayer {
                    layer: idx,
                    kind: "conv2d",
                    message: format!("bias shape {:?} != [{oc}]", bias.shape()),
                });
            }
            Ok(vec![oc, oh, ow])
        }
        Layer::Relu => Ok(in_shape.to_vec()),
        Layer::MaxPool2x2 => {
            let [c, h, w] = in_shape else {
                return Err(GraphError::BadLayer {
                    layer: idx,
                    kind: "maxpool",
                    message: format!("needs [channels, h, w] input, got {in_shape:?}"),
                });
            };
            if *h < 2 || *w < 2 {
                return Err(GraphError::BadLayer {
                    layer: idx,
                    kind: "maxpool",
                    message: format!("input {h}x{w} too small for 2x2 pooling"),
                });
            }
            Ok(vec![*c, h / 2, w / 2])
        }
        Layer::Flatten => Ok(vec![in_shape.iter().product()]),
        Layer::Softmax => {
            if in_shape.len() != 1 {
                return Err(GraphError::BadLayer {
                    layer: idx,
                    kind: "softmax",
                    message: format!("needs a flat input, got {in_shape:?}"),
                });
            }
            Ok(in_shape.to_vec())
        }
    }
}

impl ComputationGraph {
    /// Builds a graph, inferring and validating the activation shape after
    /// every layer. An empty layer list is the identity function.
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self, GraphError> {
        if input_shape.is_empty() || input_shape.iter().product::<usize>() == 0 {
            return Err(GraphError::Tensor(TensorError::EmptyShape { shape: input_shape }));
        }
        let mut shapes = vec![input_shape.clone()];
        for (idx, layer) in layers.iter().enumerate() {
            let next = infer_shape(idx, layer, shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().unwrap()
    }

    pub fn output_dim(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// Hyphen-joined layer-kind sequence, e.g. `flatten-dense-relu-dense-softmax`.
    pub fn fingerprint(&self) -> String {
        if self.layers.is_empty() {
            return "identity".to_string();
        }
        self.layers
            .iter()
            .map(Layer::kind)
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn ends_in_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Softmax))
    }

    fn check_input(&self, input: &Tensor) -> Result<(), GraphError> {
        if input.shape() != self.input_shape {
            return Err(GraphError::InputShape {
                expected: self.input_shape.clone(),
                actual: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Runs the graph and returns the final activation. Pure: identical
    /// arguments produce bit-identical outputs.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor, GraphError> {
        self.check_input(input)?;
        let mut current = input.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            current = apply_layer(layer, &current, &self.shapes[idx + 1])?;
            if current.data().iter().any(|v| !v.is_finite()) {
                return Err(GraphError::NonFiniteActivation {
                    layer: idx,
                    kind: layer.kind(),
                });
            }
        }
        Ok(current)
    }

    /// Like [`forward`](Self::forward) but stops before a trailing softmax,
    /// returning raw class scores. Graphs without a softmax head are run in
    /// full.
    pub fn forward_logits(&self, input: &Tensor) -> Result<Tensor, GraphError> {
        self.check_input(input)?;
        let upto = if self.ends_in_softmax() {
            self.layers.len() - 1
        } else {
            self.layers.len()
        };
        let mut current = input.clone();
        for (idx, layer) in self.layers.iter().take(upto).enumerate() {
            current = apply_layer(layer, &current, &self.shapes[idx + 1])?;
            if current.data().iter().any(|v| !v.is_finite()) {
                return Err(GraphError::NonFiniteActivation {
                    layer: idx,
                    kind: layer.kind(),
                });
            }
        }
        Ok(current)
    }

    /// Forward pass keeping every intermediate activation (`trace[0]` is the
    /// input, `trace[i + 1]` the output of layer `i`).
    fn forward_trace(&self, input: &Tensor) -> Result<Vec<Tensor>, GraphError> {
        self.check_input(input)?;
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(input.clone());
        for (idx, layer) in self.layers.iter().enumerate() {
            let next = apply_layer(layer, trace.last().unwrap(), &self.shapes[idx + 1])?;
            if next.data().iter().any(|v| !v.is_finite()) {
                return Err(GraphError::NonFiniteActivation {
                    layer: idx,
                    kind: layer.kind(),
                });
            }
            trace.push(next);
        }
        Ok(trace)
    }

    /// Reverse pass from layer `start` (inclusive) back to the input. `seed`
    /// is the upstream gradient at the output of layer `start`.
    fn backward_from(
        &self,
        trace: &[Tensor],
        start: usize,
        seed: Vec<f64>,
        mut weight_grads: Option<&mut Vec<LayerGrads>>,
    ) -> Vec<f64> {
        let mut upstream = seed;
        for idx in (0..=start).rev() {
            let layer = &self.layers[idx];
            let (down, grads) = backward_layer(
                layer,
                trace[idx].data(),
                &self.shapes[idx],
                &self.shapes[idx + 1],
                &upstream,
                weight_grads.is_some(),
            );
            if let Some(store) = weight_grads.as_deref_mut() {
                store[idx] = grads;
            }
            upstream = down;
        }
        upstream
    }

    /// Gradient of one output scalar (class score) with respect to the input.
    pub fn input_gradient(&self, input: &Tensor, class_index: usize) -> Result<Gradient, GraphError> {
        let classes = self.output_dim();
        if class_index >= classes {
            return Err(GraphError::ClassIndex {
                index: class_index,
                classes,
            });
        }
        let trace = self.forward_trace(input)?;
        let mut seed = vec![0.0; classes];
        seed[class_index] = 1.0;
        if self.layers.is_empty() {
            return Ok(Gradient {
                wrt_input: Tensor::new(seed, self.input_shape.clone())?,
            });
        }
        let dx = self.backward_from(&trace, self.layers.len() - 1, seed, None);
        Ok(Gradient {
            wrt_input: Tensor::new(dx, self.input_shape.clone())?,
        })
    }

    /// Gradient of the weighted sum of output scalars; exposing this keeps
    /// linearity of the backward pass testable without composing calls.
    pub fn input_gradient_weighted(
        &self,
        input: &Tensor,
        output_weights: &[f64],
    ) -> Result<Gradient, GraphError> {
        let classes = self.output_dim();
        if output_weights.len() != classes {
            return Err(GraphError::ClassIndex {
                index: output_weights.len(),
                classes,
            });
        }
        let trace = self.forward_trace(input)?;
        let seed = output_weights.to_vec();
        if self.layers.is_empty() {
            return Ok(Gradient {
                wrt_input: Tensor::new(seed, self.input_shape.clone())?,
            });
        }
        let dx = self.backward_from(&trace, self.layers.len() - 1, seed, None);
        Ok(Gradient {
            wrt_input: Tensor::new(dx, self.input_shape.clone())?,
        })
    }

    /// Cross-entropy loss against `label` and its input gradient, using the
    /// numerically fused softmax + cross-entropy backward step. Requires a
    /// softmax head.
    pub fn input_gradient_ce(&self, input: &Tensor, label: usize) -> Result<(f64, Gradient), GraphError> {
        let (loss, dlogits, trace) = self.ce_seed(input, label)?;
        let dx = if self.layers.len() == 1 {
            dlogits.clone()
        } else {
            self.backward_from(&trace, self.layers.len() - 2, dlogits, None)
        };
        Ok((
            loss,
            Gradient {
                wrt_input: Tensor::new(dx, self.input_shape.clone())?,
            },
        ))
    }

    /// Cross-entropy loss and per-layer weight gradients for one example.
    pub fn loss_grads_ce(&self, input: &Tensor, label: usize) -> Result<(f64, Vec<LayerGrads>), GraphError> {
        let (loss, dlogits, trace) = self.ce_seed(input, label)?;
        let mut grads: Vec<LayerGrads> = (0..self.layers.len()).map(|_| LayerGrads::None).collect();
        if self.layers.len() > 1 {
            self.backward_from(&trace, self.layers.len() - 2, dlogits, Some(&mut grads));
        }
        Ok((loss, grads))
    }

    fn ce_seed(&self, input: &Tensor, label: usize) -> Result<(f64, Vec<f64>, Vec<Tensor>), GraphError> {
        if !self.ends_in_softmax() {
            return Err(GraphError::MissingSoftmaxHead);
        }
        let classes = self.output_dim();
        if label >= classes {
            return Err(GraphError::ClassIndex { index: label, classes });
        }
        let trace = self.forward_trace(input)?;
        let probs = trace.last().unwrap().data();
        let loss = -(probs[label].max(1e-300)).ln();
        let mut dlogits = probs.to_vec();
        dlogits[label] -= 1.0;
        Ok((loss, dlogits, trace))
    }

    /// In-place SGD step: `w -= lr * grad` for every parameterised layer.
    pub fn apply_gradients(&mut self, grads: &[LayerGrads], lr: f64) {
        for (layer, grad) in self.layers.iter_mut().zip(grads) {
            match (layer, grad) {
                (Layer::Dense { weights, bias }, LayerGrads::Dense { dw, db }) => {
                    sgd_step(weights, dw, lr);
                    sgd_step(bias, db, lr);
                }
                (Layer::Conv2d { kernels, bias, .. }, LayerGrads::Conv2d { dk, db }) => {
                    sgd_step(kernels, dk, lr);
                    sgd_step(bias, db, lr);
                }
                _ => {}
            }
        }
    }

    /// Divides the first parameterised layer's weights by `factor`, folding a
    /// fixed input scaling into the model so it consumes raw pixel values.
    pub fn fold_input_scale(&mut self, factor: f64) {
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Dense { weights, .. } => {
                    scale_in_place(weights, 1.0 / factor);
                    return;
                }
                Layer::Conv2d { kernels, .. } => {
                    scale_in_place(kernels, 1.0 / factor);
                    return;
                }
                _ => {}
            }
        }
    }
}

fn sgd_step(params: &mut Tensor, grad: &[f64], lr: f64) {
    let shape = params.shape().to_vec();
    let mut data = std::mem::replace(params, Tensor::zeros(&[1])).into_data();
    for (p, g) in data.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    *params = Tensor::new(data, shape).expect("finite update");
}

fn scale_in_place(params: &mut Tensor, factor: f64) {
    let shape = params.shape().to_vec();
    let mut data = std::mem::replace(params, Tensor::zeros(&[1])).into_data();
    for p in data.iter_mut() {
        *p *= factor;
    }
    *params = Tensor::new(data, shape).expect("finite scale");
}

fn apply_layer(layer: &Layer, input: &Tensor, out_shape: &[usize]) -> Result<Tensor, GraphError> {
    let x = input.data();
    let out = match layer {
        Layer::Dense { weights, bias } => {
            let cols = weights.shape()[1];
            let w = weights.data();
            let mut y = bias.data().to_vec();
            for (o, yo) in y.iter_mut().enumerate() {
                let row = &w[o * cols..(o + 1) * cols];
                let mut acc = 0.0;
                for (wi, xi) in row.iter().zip(x) {
                    acc += wi * xi;
                }
                *yo += acc;
            }
            y
        }
        Layer::Conv2d {
            kernels,
            bias,
            padding,
        } => conv_forward(x, input.shape(), kernels, bias.data(), *padding, out_shape),
        Layer::Relu => x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        Layer::MaxPool2x2 => {
            let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let mut y = vec![0.0; c * oh * ow];
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        // Strict > keeps the lowest linear index on ties.
                        let mut best = plane[(2 * i) * w + 2 * j];
                        for (du, dv) in [(0, 1), (1, 0), (1, 1)] {
                            let v = plane[(2 * i + du) * w + 2 * j + dv];
                            if v > best {
                                best = v;
                            }
                        }
                        y[ch * oh * ow + i * ow + j] = best;
                    }
                }
            }
            y
        }
        Layer::Flatten => x.to_vec(),
        Layer::Softmax => softmax(x),
    };
    Ok(Tensor::new(out, out_shape.to_vec())?)
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn conv_forward(
    x: &[f64],
    in_shape: &[usize],
    kernels: &Tensor,
    bias: &[f64],
    padding: Padding,
    out_shape: &[usize],
) -> Vec<f64> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oc, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let k = kernels.data();
    let (kc, kh, kw) = (kernels.shape()[1], kernels.shape()[2], kernels.shape()[3]);
    debug_assert_eq!(kc, c);
    let (ph, pw) = match padding {
        Padding::Valid => (0isize, 0isize),
        Padding::Same => (((kh - 1) / 2) as isize, ((kw - 1) / 2) as isize),
    };
    let mut y = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        let out_plane = &mut y[o * oh * ow..(o + 1) * oh * ow];
        out_plane.fill(bias[o]);
        for ch in 0..c {
            let x_plane = &x[ch * h * w..(ch + 1) * h * w];
            for u in 0..kh {
                for v in 0..kw {
                    let weight = k[((o * c + ch) * kh + u) * kw + v];
                    if weight == 0.0 {
                        continue;
                    }
                    for i in 0..oh {
                        let xi = i as isize + u as isize - ph;
                        if xi < 0 || xi >= h as isize {
                            continue;
                        }
                        let x_row = &x_plane[xi as usize * w..(xi as usize + 1) * w];
                        let out_row = &mut out_plane[i * ow..(i + 1) * ow];
                        // j + v - pw must land in [0, w)
                        let j_lo = (pw - v as isize).max(0) as usize;
                        let j_hi = ((w as isize + pw - v as isize).min(ow as isize)).max(0) as usize;
                        for j in j_lo..j_hi {
                            let xj = (j as isize + v as isize - pw) as usize;
                            out_row[j] += weight * x_row[xj];
                        }
                    }
                }
            }
        }
    }
    y
}

/// One layer of the reverse pass: upstream gradient in, downstream gradient
/// out, plus weight gradients when requested.
fn backward_layer(
    layer: &Layer,
    x: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    dy: &[f64],
    want_weights: bool,
) -> (Vec<f64>, LayerGrads) {
    match layer {
        Layer::Dense { weights, .. } => {
            let (rows, cols) = (weights.shape()[0], weights.shape()[1]);
            let w = weights.data();
            let mut dx = vec![0.0; cols];
            for o in 0..rows {
                let g = dy[o];
                if g == 0.0 {
                    continue;
                }
                let row = &w[o * cols..(o + 1) * cols];
                for (dxi, wi) in dx.iter_mut().zip(row) {
                    *dxi += g * wi;
                }
            }
            let grads = if want_weights {
                let mut dw = vec![0.0; rows * cols];
                for o in 0..rows {
                    let g = dy[o];
                    if g != 0.0 {
                        let drow = &mut dw[o * cols..(o + 1) * cols];
                        for (d, xi) in drow.iter_mut().zip(x) {
                            *d = g * xi;
                        }
                    }
                }
                LayerGrads::Dense { dw, db: dy.to_vec() }
            } else {
                LayerGrads::None
            };
            (dx, grads)
        }
        Layer::Conv2d {
            kernels, padding, ..
        } => conv_backward(x, in_shape, out_shape, kernels, *padding, dy, want_weights),
        Layer::Relu => {
            // Gradient at exactly zero is zero.
            let dx = x
                .iter()
                .zip(dy)
                .map(|(&xi, &g)| if xi > 0.0 { g } else { 0.0 })
                .collect();
            (dx, LayerGrads::None)
        }
        Layer::MaxPool2x2 => {
            let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let mut dx = vec![0.0; c * h * w];
            for ch in 0..c {
                let plane = &x[ch * h * w..(ch + 1) * h * w];
                let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best_idx = (2 * i) * w + 2 * j;
                        let mut best = plane[best_idx];
                        for (du, dv) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = (2 * i + du) * w + 2 * j + dv;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                        dplane[best_idx] += dy[ch * oh * ow + i * ow + j];
                    }
                }
            }
            (dx, LayerGrads::None)
        }
        Layer::Flatten => (dy.to_vec(), LayerGrads::None),
        Layer::Softmax => {
            let y = softmax(x);
            let dot: f64 = dy.iter().zip(&y).map(|(g, yi)| g * yi).sum();
            let dx = y.iter().zip(dy).map(|(&yi, &g)| yi * (g - dot)).collect();
            (dx, LayerGrads::None)
        }
    }
}

fn conv_backward(
    x: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    kernels: &Tensor,
    padding: Padding,
    dy: &[f64],
    want_weights: bool,
) -> (Vec<f64>, LayerGrads) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oc, oh, ow) = (out_shape[0], out_shape[1], out_shape[2]);
    let k = kernels.data();
    let (kh, kw) = (kernels.shape()[2], kernels.shape()[3]);
    let (ph, pw) = match padding {
        Padding::Valid => (0isize, 0isize),
        Padding::Same => (((kh - 1) / 2) as isize, ((kw - 1) / 2) as isize),
    };
    let mut dx = vec![0.0; c * h * w];
    let mut dk = if want_weights {
        vec![0.0; k.len()]
    } else {
        Vec::new()
    };
    let mut db = if want_weights { vec![0.0; oc] } else { Vec::new() };
    for o in 0..oc {
        let dy_plane = &dy[o * oh * ow..(o + 1) * oh * ow];
        if want_weights {
            db[o] = dy_plane.iter().sum();
        }
        for ch in 0..c {
            let x_plane = &x[ch * h * w..(ch + 1) * h * w];
            let dx_plane = &mut dx[ch * h * w..(ch + 1) * h * w];
            for u in 0..kh {
                for v in 0..kw {
                    let kidx = ((o * c + ch) * kh + u) * kw + v;
                    let weight = k[kidx];
                    let mut kacc = 0.0;
                    for i in 0..oh {
                        let xi = i as isize + u as isize - ph;
                        if xi < 0 || xi >= h as isize {
                            continue;
                        }
                        let dy_row = &dy_plane[i * ow..(i + 1) * ow];
                        let j_lo = (pw - v as isize).max(0) as usize;
                        let j_hi = ((w as isize + pw - v as isize).min(ow as isize)).max(0) as usize;
                        let x_row = &x_plane[xi as usize * w..(xi as usize + 1) * w];
                        let dx_row = &mut dx_plane[xi as usize * w..(xi as usize + 1) * w];
                        for j in j_lo..j_hi {
                            let xj = (j as isize + v as isize - pw) as usize;
                            dx_row[xj] += weight * dy_row[j];
                            if want_weights {
                                kacc += dy_row[j] * x_row[xj];
                            }
                        }
                    }
                    if want_weights {
                        dk[kidx] += kacc;
                    }
                }
            }
        }
    }
    let grads = if want_weights {
        LayerGrads::Conv2d { dk, db }
    } else {
        LayerGrads::None
    };
    (dx, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(data: Vec<f64>, shape: Vec<usize>) -> Tensor {
        Tensor::new(data, shape).unwrap()
    }

    #[test]
    fn empty_graph_is_identity() {
        let g = ComputationGraph::new(vec![3], vec![]).unwrap();
        let x = t(vec![1.0, -2.0, 0.5], vec![3]);
        assert_eq!(g.forward(&x).unwrap(), x);
        assert_eq!(g.fingerprint(), "identity");
    }

    #[test]
    fn dense_matches_hand_result() {
        // [[1, 2], [3, 4]] * [1, 2] + [5, 6] = [1*1+2*2+5, 3*1+4*2+6] = [10, 17]
        let g = ComputationGraph::new(
            vec![2],
            vec![Layer::Dense {
                weights: t(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]),
                bias: t(vec![5.0, 6.0], vec![2]),
            }],
        )
        .unwrap();
        let y = g.forward(&t(vec![1.0, 2.0], vec![2])).unwrap();
        assert_eq!(y.data(), &[10.0, 17.0]);
    }

    #[test]
    fn softmax_uniform_on_equal_scores() {
        let g = ComputationGraph::new(vec![2], vec![Layer::Softmax]).unwrap();
        let y = g.forward(&t(vec![0.0, 0.0], vec![2])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalised() {
        let g = ComputationGraph::new(vec![3], vec![Layer::Softmax]).unwrap();
        let a = g.forward(&t(vec![1.0, 2.0, 3.0], vec![3])).unwrap();
        let b = g.forward(&t(vec![1001.0, 1002.0, 1003.0], vec![3])).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(a.data().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn linear_model_gradient_is_weight_row() {
        let w = vec![0.5, -1.5, 2.0];
        let g = ComputationGraph::new(
            vec![3],
            vec![Layer::Dense {
                weights: t(w.clone(), vec![1, 3]),
                bias: t(vec![0.0], vec![1]),
            }],
        )
        .unwrap();
        let grad = g
            .input_gradient(&t(vec![10.0, 20.0, 30.0], vec![3]), 0)
            .unwrap();
        assert_eq!(grad.wrt_input.data(), w.as_slice());
    }

    #[test]
    fn constant_output_has_zero_gradient() {
        // Zero weights: output is the bias regardless of input.
        let g = ComputationGraph::new(
            vec![2],
            vec![Layer::Dense {
                weights: t(vec![0.0; 4], vec![2, 2]),
                bias: t(vec![3.0, 4.0], vec![2]),
            }],
        )
        .unwrap();
        let grad = g.input_gradient(&t(vec![7.0, -7.0], vec![2]), 1).unwrap();
        assert_eq!(grad.wrt_input.data(), &[0.0, 0.0]);
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let g = ComputationGraph::new(vec![3], vec![Layer::Relu]).unwrap();
        let grad = g
            .input_gradient_weighted(&t(vec![-1.0, 0.0, 2.0], vec![3]), &[1.0, 1.0, 1.0])
            .unwrap();
        assert_eq!(grad.wrt_input.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_ties_route_to_lowest_index() {
        let g = ComputationGraph::new(vec![1, 2, 2], vec![Layer::MaxPool2x2]).unwrap();
        let x = t(vec![5.0, 5.0, 5.0, 5.0], vec![1, 2, 2]);
        let grad = g.input_gradient(&x, 0).unwrap();
        assert_eq!(grad.wrt_input.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_drops_odd_edges() {
        let g = ComputationGraph::new(vec![1, 3, 3], vec![Layer::MaxPool2x2]).unwrap();
        assert_eq!(g.output_shape(), &[1, 1, 1]);
        let x = t((0..9).map(|v| v as f64).collect(), vec![1, 3, 3]);
        // Window covers indices {0,1,3,4}; max is 4.
        assert_eq!(g.forward(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn conv_same_preserves_extent_and_valid_shrinks() {
        let kernels = t(vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0], vec![1, 1, 3, 3]);
        let bias = t(vec![0.0], vec![1]);
        let same = ComputationGraph::new(
            vec![1, 4, 4],
            vec![Layer::Conv2d {
                kernels: kernels.clone(),
                bias: bias.clone(),
                padding: Padding::Same,
            }],
        )
        .unwrap();
        assert_eq!(same.output_shape(), &[1, 4, 4]);
        // Identity kernel under same padding reproduces the input.
        let x = t((0..16).map(|v| v as f64).collect(), vec![1, 4, 4]);
        assert_eq!(same.forward(&x).unwrap().data(), x.data());

        let valid = ComputationGraph::new(
            vec![1, 4, 4],
            vec![Layer::Conv2d {
                kernels,
                bias,
                padding: Padding::Valid,
            }],
        )
        .unwrap();
        assert_eq!(valid.output_shape(), &[1, 2, 2]);
    }

    #[test]
    fn shape_mismatch_rejected_at_construction() {
        let err = ComputationGraph::new(
            vec![3],
            vec![Layer::Dense {
                weights: t(vec![1.0, 2.0], vec![1, 2]),
                bias: t(vec![0.0], vec![1]),
            }],
        )
        .unwrap_err();
        assert!(matches!(err, GraphError::BadLayer { layer: 0, .. }));
    }

    #[test]
    fn forward_rejects_wrong_input_shape() {
        let g = ComputationGraph::new(vec![2], vec![Layer::Relu]).unwrap();
        let err = g.forward(&t(vec![1.0, 2.0, 3.0], vec![3])).unwrap_err();
        assert!(matches!(err, GraphError::InputShape { .. }));
    }

    #[test]
    fn forward_is_pure() {
        let g = ComputationGraph::new(
            vec![2],
            vec![
                Layer::Dense {
                    weights: t(vec![0.3, -0.7, 1.1, 0.2], vec![2, 2]),
                    bias: t(vec![0.01, -0.02], vec![2]),
                },
                Layer::Softmax,
            ],
        )
        .unwrap();
        let x = t(vec![0.9, -1.3], vec![2]);
        let a = g.forward(&x).unwrap();
        let b = g.forward(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn ce_gradient_matches_manual_softmax_derivative() {
        let g = ComputationGraph::new(
            vec![2],
            vec![
                Layer::Dense {
                    weights: t(vec![1.0, 0.0, 0.0, 1.0], vec![2, 2]),
                    bias: t(vec![0.0, 0.0], vec![2]),
                },
                Layer::Softmax,
            ],
        )
        .unwrap();
        let x = t(vec![1.0, -1.0], vec![2]);
        let (loss, grad) = g.input_gradient_ce(&x, 0).unwrap();
        let p = softmax(&[1.0, -1.0]);
        assert_abs_diff_eq!(loss, -p[0].ln(), epsilon = 1e-12);
        // d loss / d logits = p - onehot; identity dense passes it through.
        assert_abs_diff_eq!(grad.wrt_input.data()[0], p[0] - 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(grad.wrt_input.data()[1], p[1], epsilon = 1e-12);
    }

    #[test]
    fn class_index_out_of_range() {
        let g = ComputationGraph::new(vec![2], vec![Layer::Softmax]).unwrap();
        let err = g.input_gradient(&t(vec![0.0, 0.0], vec![2]), 2).unwrap_err();
        assert!(matches!(err, GraphError::ClassIndex { index: 2, classes: 2 }));
    }
}
