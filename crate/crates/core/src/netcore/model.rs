use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layer::{self, LayerParams, LayerSpec, ParamGrads};
use crate::error::{Result, VccError};
use crate::tensor::TensorF32;

/// Layer list, input shape, class count and tap layers, without weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub class_count: usize,
    pub tap_layers: Vec<usize>,
}

impl Architecture {
    /// Output shape of every layer, validating that shapes chain.
    pub fn layer_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.to_vec();
        let mut shapes = Vec::with_capacity(self.layers.len());
        for spec in &self.layers {
            shape = spec.output_shape(&shape)?;
            shapes.push(shape.clone());
        }
        Ok(shapes)
    }

    /// Full structural validation: shape chaining, tap ordering, class head width.
    pub fn validate(&self) -> Result<Vec<Vec<usize>>> {
        if self.layers.is_empty() {
            return Err(VccError::InvalidInput("model has no layers".into()));
        }
        let shapes = self.layer_shapes()?;
        self.validate_taps()?;
        let last = shapes.last().expect("non-empty");
        if last.as_slice() != [self.class_count] {
            return Err(VccError::InvalidInput(format!(
                "final layer produces {last:?}, expected [{}] logits",
                self.class_count
            )));
        }
        Ok(shapes)
    }

    fn validate_taps(&self) -> Result<()> {
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(VccError::InvalidInput(format!(
                "tap layers must be strictly increasing, got {:?}",
                self.tap_layers
            )));
        }
        if let Some(&last) = self.tap_layers.last() {
            if last + 1 >= self.layers.len() {
                return Err(VccError::InvalidInput(format!(
                    "tap layer {last} does not precede the class head"
                )));
            }
        }
        Ok(())
    }

    /// Theoretical receptive field (width/height in input pixels) of one
    /// activation at the output of `layer`.
    pub fn receptive_field(&self, layer: usize) -> Result<usize> {
        if layer >= self.layers.len() {
            return Err(VccError::Index {
                index: layer,
                len: self.layers.len(),
            });
        }
        let mut rf = 1usize;
        let mut jump = 1usize;
        for (index, spec) in self.layers[..=layer].iter().enumerate() {
            match *spec {
                LayerSpec::Conv2d { kernel, stride, .. } | LayerSpec::MaxPool2d { kernel, stride } => {
                    rf += (kernel - 1) * jump;
                    jump *= stride;
                }
                LayerSpec::Relu => {}
                _ => {
                    return Err(VccError::UnsupportedLayer {
                        index,
                        kind: spec.name().to_string(),
                    })
                }
            }
        }
        let extent = self.input_shape[1].max(self.input_shape[2]);
        Ok(rf.min(extent))
    }
}

/// An immutable layered network with weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredModel {
    arch: Architecture,
    params: Vec<LayerParams>,
    shapes: Vec<Vec<usize>>,
}

/// Per-layer parameter gradients of the mean cross-entropy over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrads {
    pub layers: Vec<ParamGrads>,
    pub loss: f64,
    pub correct: usize,
}

impl LayeredModel {
    pub fn new(arch: Architecture, params: Vec<LayerParams>) -> Result<Self> {
        let shapes = arch.validate()?;
        if params.len() != arch.layers.len() {
            return Err(VccError::InvalidInput(format!(
                "{} parameter blocks for {} layers",
                params.len(),
                arch.layers.len()
            )));
        }
        for (i, (spec, p)) in arch.layers.iter().zip(&params).enumerate() {
            let (nw, nb) = spec.param_counts();
            if p.weight.len() != nw || p.bias.len() != nb {
                return Err(VccError::InvalidInput(format!(
                    "layer {i} ({}) expects {nw} weights and {nb} biases, got {} and {}",
                    spec.name(),
                    p.weight.len(),
                    p.bias.len()
                )));
            }
            if p.weight.iter().chain(&p.bias).any(|v| !v.is_finite()) {
                return Err(VccError::InvalidInput(format!("layer {i} has non-finite weights")));
            }
        }
        Ok(Self { arch, params, shapes })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.arch.layers
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.arch.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.arch.class_count
    }

    pub fn tap_layers(&self) -> &[usize] {
        &self.arch.tap_layers
    }

    pub fn layer_count(&self) -> usize {
        self.arch.layers.len()
    }

    pub fn output_shape(&self, layer: usize) -> Result<&[usize]> {
        self.shapes
            .get(layer)
            .map(|s| s.as_slice())
            .ok_or(VccError::Index {
                index: layer,
                len: self.layer_count(),
            })
    }

    pub fn with_tap_layers(mut self, taps: Vec<usize>) -> Result<Self> {
        self.arch.tap_layers = taps;
        self.arch.validate_taps()?;
        Ok(self)
    }

    /// Hex SHA-256 over the manifest and the little-endian weights.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&self.arch).expect("architecture serializes"));
        for p in &self.params {
            for v in p.weight.iter().chain(&p.bias) {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    fn check_image(&self, image: &TensorF32) -> Result<()> {
        if image.shape() != self.arch.input_shape {
            return Err(VccError::InvalidInput(format!(
                "image shape {:?} does not match model input {:?}",
                image.shape(),
                self.arch.input_shape
            )));
        }
        Ok(())
    }

    fn check_index(&self, layer: usize) -> Result<()> {
        if layer >= self.layer_count() {
            return Err(VccError::Index {
                index: layer,
                len: self.layer_count(),
            });
        }
        Ok(())
    }

    fn run(&self, mut x: TensorF32, first: usize, last: usize) -> Result<TensorF32> {
        for i in first..=last {
            x = layer::forward(&self.arch.layers[i], &self.params[i], &x);
        }
        if !x.is_finite() {
            return Err(VccError::NonFinite(format!("forward pass to layer {last}")));
        }
        Ok(x)
    }

    /// Activation at the output of `layer` for an input image.
    pub fn forward_to(&self, image: &TensorF32, layer: usize) -> Result<TensorF32> {
        self.check_image(image)?;
        self.check_index(layer)?;
        self.run(image.clone(), 0, layer)
    }

    /// Continues a forward pass from the output of layer `from` to the output of layer `to`.
    pub fn forward_between(&self, activation: &TensorF32, from: usize, to: usize) -> Result<TensorF32> {
        if from >= to {
            return Err(VccError::Ordering { from, to });
        }
        self.check_index(to)?;
        let expected = &self.shapes[from];
        if activation.shape() != expected.as_slice() {
            return Err(VccError::InvalidInput(format!(
                "activation shape {:?} does not match layer {from} output {expected:?}",
                activation.shape()
            )));
        }
        self.run(activation.clone(), from + 1, to)
    }

    /// Class logits (pre-softmax).
    pub fn forward_full(&self, image: &TensorF32) -> Result<Vec<f32>> {
        Ok(self.forward_to(image, self.layer_count() - 1)?.into_data())
    }

    /// Forward pass keeping the input of every layer in `first..=last`.
    fn trace(&self, x: TensorF32, first: usize, last: usize) -> Result<(Vec<TensorF32>, TensorF32)> {
        let mut inputs = Vec::with_capacity(last + 1 - first);
        let mut cur = x;
        for i in first..=last {
            let next = layer::forward(&self.arch.layers[i], &self.params[i], &cur);
            inputs.push(cur);
            cur = next;
        }
        if !cur.is_finite() {
            return Err(VccError::NonFinite(format!("forward pass to layer {last}")));
        }
        Ok((inputs, cur))
    }

    fn backprop(&self, inputs: &[TensorF32], first: usize, mut g: Vec<f32>) -> Vec<f32> {
        for (offset, x) in inputs.iter().enumerate().rev() {
            let i = first + offset;
            g = layer::backward(&self.arch.layers[i], &self.params[i], x, &g, None);
        }
        g
    }

    /// Gradient over `activation` (output of layer `from`) of
    /// `‖pool(forward_between(activation, from, to)) − centroid‖₂`, where `pool`
    /// is global average pooling for spatial outputs and the identity for
    /// vector outputs. Returns the zero tensor when the distance is below 1e-12.
    pub fn distance_grad(
        &self,
        activation: &TensorF32,
        from: usize,
        to: usize,
        centroid: &[f32],
    ) -> Result<TensorF32> {
        if from >= to {
            return Err(VccError::Ordering { from, to });
        }
        self.check_index(to)?;
        if activation.shape() != self.shapes[from].as_slice() {
            return Err(VccError::InvalidInput(format!(
                "activation shape {:?} does not match layer {from} output {:?}",
                activation.shape(),
                self.shapes[from]
            )));
        }
        let (inputs, out) = self.trace(activation.clone(), from + 1, to)?;
        let grad_out = pooled_distance_grad(&out, centroid)?;
        let Some(grad_out) = grad_out else {
            return Ok(TensorF32::zeros(activation.shape().to_vec()));
        };
        let g = self.backprop(&inputs, from + 1, grad_out);
        Ok(TensorF32::from_parts(activation.shape().to_vec(), g))
    }

    /// Gradient of one class logit with respect to the output of layer `from`.
    pub fn logit_grad(&self, activation: &TensorF32, from: usize, class: usize) -> Result<TensorF32> {
        let last = self.layer_count() - 1;
        if class >= self.class_count() {
            return Err(VccError::InvalidInput(format!("class {class} out of range")));
        }
        if from >= last {
            return Err(VccError::Ordering { from, to: last });
        }
        let (inputs, _) = self.trace(activation.clone(), from + 1, last)?;
        let mut seed = vec![0.0f32; self.class_count()];
        seed[class] = 1.0;
        let g = self.backprop(&inputs, from + 1, seed);
        Ok(TensorF32::from_parts(activation.shape().to_vec(), g))
    }

    /// Per-weight gradients of the mean softmax cross-entropy over a batch.
    pub fn backprop_weights(&self, batch: &[TensorF32], labels: &[usize]) -> Result<WeightGrads> {
        if batch.len() != labels.len() || batch.is_empty() {
            return Err(VccError::InvalidInput(format!(
                "{} images for {} labels",
                batch.len(),
                labels.len()
            )));
        }
        let mut grads: Vec<ParamGrads> = self
            .arch
            .layers
            .iter()
            .map(|spec| {
                let (nw, nb) = spec.param_counts();
                ParamGrads {
                    weight: vec![0.0; nw],
                    bias: vec![0.0; nb],
                }
            })
            .collect();
        let last = self.layer_count() - 1;
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut correct = 0;
        for (image, &label) in batch.iter().zip(labels) {
            self.check_image(image)?;
            if label >= self.class_count() {
                return Err(VccError::InvalidInput(format!("label {label} out of range")));
            }
            let (inputs, logits) = self.trace(image.clone(), 0, last)?;
            let probs = softmax(logits.data());
            loss -= probs[label].max(1e-300).ln() * scale;
            if argmax(logits.data()) == label {
                correct += 1;
            }
            let mut g: Vec<f32> = probs
                .iter()
                .enumerate()
                .map(|(c, &p)| ((p - if c == label { 1.0 } else { 0.0 }) * scale) as f32)
                .collect();
            for i in (0..=last).rev() {
                let spec = &self.arch.layers[i];
                let pg = if spec.has_params() { Some(&mut grads[i]) } else { None };
                // The input gradient of the first layer is never needed.
                if i == 0 && pg.is_none() {
                    break;
                }
                g = layer::backward(spec, &self.params[i], &inputs[i], &g, pg);
            }
        }
        Ok(WeightGrads {
            layers: grads,
            loss,
            correct,
        })
    }
}

/// Gradient of `‖pool(out) − centroid‖₂` with respect to `out`, or `None` at the degenerate point.
fn pooled_distance_grad(out: &TensorF32, centroid: &[f32]) -> Result<Option<Vec<f32>>> {
    let (pooled, plane) = match out.chw() {
        Some((c, h, w)) => (layer::gap_channels(out.data(), c, h * w), h * w),
        None => (out.data().to_vec(), 1),
    };
    if pooled.len() != centroid.len() {
        return Err(VccError::InvalidInput(format!(
            "centroid has {} dimensions, pooled features have {}",
            centroid.len(),
            pooled.len()
        )));
    }
    let diff: Vec<f64> = pooled
        .iter()
        .zip(centroid)
        .map(|(&p, &q)| p as f64 - q as f64)
        .collect();
    let dist = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
    if dist < 1e-12 {
        return Ok(None);
    }
    let mut g = vec![0.0f32; out.len()];
    for (c, d) in diff.iter().enumerate() {
        let v = (d / dist / plane as f64) as f32;
        g[c * plane..(c + 1) * plane].fill(v);
    }
    Ok(Some(g))
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&l| (l as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the first maximum.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
