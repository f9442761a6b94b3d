//! The model surface the pipeline needs, independent of where the model runs.
//!
//! [`LayeredModel`] implements it in-process; [`crate::bridge::BridgeOracle`]
//! forwards the same calls to an external responder.

use crate::error::{Result, VccError};
use crate::netcore::LayeredModel;
use crate::tensor::TensorF32;

pub trait FeatureOracle: Sync {
    fn input_shape(&self) -> [usize; 3];
    fn class_count(&self) -> usize;
    fn layer_count(&self) -> usize;
    fn tap_layers(&self) -> Vec<usize>;
    fn output_shape(&self, layer: usize) -> Result<Vec<usize>>;
    fn forward_to(&self, image: &TensorF32, layer: usize) -> Result<TensorF32>;
    fn forward_between(&self, activation: &TensorF32, from: usize, to: usize) -> Result<TensorF32>;
    fn distance_grad(&self, activation: &TensorF32, from: usize, to: usize, centroid: &[f32]) -> Result<TensorF32>;
    fn logits(&self, image: &TensorF32) -> Result<Vec<f32>>;
    /// Identifier recorded as graph provenance.
    fn model_hash(&self) -> String;

    /// Gradient of logit `class` with respect to the output of layer `from`.
    ///
    /// The default derives it from a single distance gradient to the
    /// logit layer: with `q = logits + e_class`, the residual is exactly
    /// `−e_class`, so the distance gradient is the negated logit gradient.
    fn logit_grad(&self, activation: &TensorF32, from: usize, class: usize) -> Result<TensorF32> {
        let last = self.layer_count() - 1;
        if class >= self.class_count() {
            return Err(VccError::InvalidInput(format!("class {class} out of range")));
        }
        let mut target = self.forward_between(activation, from, last)?.into_data();
        target[class] += 1.0;
        let g = self.distance_grad(activation, from, last, &target)?;
        let shape = g.shape().to_vec();
        TensorF32::new(shape, g.into_data().into_iter().map(|v| -v).collect())
    }
}

impl FeatureOracle for LayeredModel {
    fn input_shape(&self) -> [usize; 3] {
        LayeredModel::input_shape(self)
    }

    fn class_count(&self) -> usize {
        LayeredModel::class_count(self)
    }

    fn layer_count(&self) -> usize {
        LayeredModel::layer_count(self)
    }

    fn tap_layers(&self) -> Vec<usize> {
        LayeredModel::tap_layers(self).to_vec()
    }

    fn output_shape(&self, layer: usize) -> Result<Vec<usize>> {
        LayeredModel::output_shape(self, layer).map(|s| s.to_vec())
    }

    fn forward_to(&self, image: &TensorF32, layer: usize) -> Result<TensorF32> {
        LayeredModel::forward_to(self, image, layer)
    }

    fn forward_between(&self, activation: &TensorF32, from: usize, to: usize) -> Result<TensorF32> {
        LayeredModel::forward_between(self, activation, from, to)
    }

    fn distance_grad(&self, activation: &TensorF32, from: usize, to: usize, centroid: &[f32]) -> Result<TensorF32> {
        LayeredModel::distance_grad(self, activation, from, to, centroid)
    }

    fn logits(&self, image: &TensorF32) -> Result<Vec<f32>> {
        self.forward_full(image)
    }

    fn model_hash(&self) -> String {
        self.content_hash()
    }

    fn logit_grad(&self, activation: &TensorF32, from: usize, class: usize) -> Result<TensorF32> {
        LayeredModel::logit_grad(self, activation, from, class)
    }
}

/// Spatial size `(height, width)` of a tap layer.
pub(crate) fn spatial_dims(oracle: &dyn FeatureOracle, layer: usize) -> Result<(usize, usize, usize)> {
    match oracle.output_shape(layer)?.as_slice() {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(VccError::InvalidInput(format!(
            "layer {layer} is not spatial (output shape {other:?})"
        ))),
    }
}
