//! Layer-wise concept discovery.
//!
//! Every segment found at a layer is re-embedded on its own: the masked RGB
//! image is resized to the model input, run up to that layer and
//! spatially averaged. The pooled vectors of all segments at the layer are
//! over-clustered with k-means and small clusters are pruned with a
//! generalised logistic threshold that grows with the number of segments.

mod kmeans;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, kmeans_with, KMeansConfig, KMeansResult, Points};

use crate::error::{Result, VccError};
use crate::io::ImageFile;
use crate::netcore::gap_channels;
use crate::oracle::FeatureOracle;
use crate::rng::{derive_seed, tag};
use crate::segment::{resize_plane, SegmentId, SegmentRecord, SegmentSet};
use crate::tensor::TensorF32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub layer: usize,
    pub centroid: Vec<f32>,
    pub members: Vec<SegmentId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptLayer {
    #[serde(rename = "index")]
    pub layer: usize,
    pub concepts: Vec<Concept>,
    /// Segments at this layer before clustering.
    pub segment_count: usize,
}

impl ConceptLayer {
    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }
}

/// Constants of the generalised logistic `Y(t) = A + (K − A) / (C + Q·e^{−B t})^{1/ν}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruningConfig {
    pub a: f64,
    pub k: f64,
    pub c: f64,
    pub q: f64,
    pub b: f64,
    pub nu: f64,
}

impl Default for PruningConfig {
    fn default() -> Self {
        Self {
            a: -102.0,
            k: 115.0,
            c: 1.0,
            q: 1.0,
            b: 0.0004,
            nu: 1.0,
        }
    }
}

impl PruningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > self.a && self.b > 0.0 && self.nu > 0.0) {
            return Err(VccError::Config(format!("invalid pruning constants {self:?}")));
        }
        Ok(())
    }
}

/// Minimum member count for a cluster among `t` segments.
pub fn pruning_threshold(t: f64, cfg: &PruningConfig) -> f64 {
    cfg.a + (cfg.k - cfg.a) / (cfg.c + cfg.q * (-cfg.b * t).exp()).powf(1.0 / cfg.nu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    /// Over-clustering cluster count.
    pub clusters: usize,
    pub pruning: PruningConfig,
    pub seed: u64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        Self {
            clusters: 25,
            pruning: PruningConfig::default(),
            seed: 0,
        }
    }
}

/// Per-channel spatial mean of a `C×H×W` tensor.
pub fn gap(activation: &TensorF32) -> Result<Vec<f32>> {
    let (c, h, w) = activation
        .chw()
        .ok_or_else(|| VccError::InvalidInput(format!("gap needs C×H×W, got {:?}", activation.shape())))?;
    Ok(gap_channels(activation.data(), c, h * w))
}

/// Model input for a masked segment image, bilinearly resized when the image
/// size differs from the model input. Zero pixels stay zero.
pub fn segment_input(image: &ImageFile, input_shape: [usize; 3]) -> Result<TensorF32> {
    let t = image.to_tensor();
    let [c, th, tw] = input_shape;
    if c != 3 {
        return Err(VccError::InvalidInput(format!("model expects {c} channels, images have 3")));
    }
    let (h, w) = (image.height(), image.width());
    if (h, w) == (th, tw) {
        return Ok(t);
    }
    let plane = h * w;
    let data = (0..3)
        .flat_map(|ch| resize_plane(&t.data()[ch * plane..(ch + 1) * plane], h, w, th, tw))
        .collect();
    TensorF32::new(vec![3, th, tw], data)
}

/// Activation of each segment at its own layer.
pub fn segment_activations(oracle: &dyn FeatureOracle, segments: &[SegmentRecord]) -> Result<Vec<TensorF32>> {
    segments
        .par_iter()
        .map(|s| oracle.forward_to(&segment_input(&s.rgb, oracle.input_shape())?, s.mask.layer))
        .collect()
}

/// Pooled embedding of each segment at its own layer.
pub fn embed_segments(oracle: &dyn FeatureOracle, segments: &[SegmentRecord]) -> Result<Vec<Vec<f32>>> {
    segment_activations(oracle, segments)?.iter().map(gap).collect()
}

/// Clusters one layer's embeddings and keeps clusters with at least `⌈Y(t)⌉` members.
pub fn cluster_layer(
    layer: usize,
    ids: &[SegmentId],
    embeddings: &[Vec<f32>],
    cfg: &DiscoveryConfig,
) -> Result<ConceptLayer> {
    cfg.pruning.validate()?;
    let t = ids.len();
    if t == 0 {
        return Ok(ConceptLayer {
            layer,
            concepts: Vec::new(),
            segment_count: 0,
        });
    }
    let points = Points::from_rows(embeddings)?;
    let k = cfg.clusters.min(t).max(1);
    let fit = kmeans(&points, k, derive_seed(cfg.seed, &[tag("concepts"), layer as u64]))?;
    let min_members = pruning_threshold(t as f64, &cfg.pruning).ceil();
    let mut groups: Vec<(Vec<SegmentId>, Vec<f32>)> = fit
        .centroids
        .into_iter()
        .enumerate()
        .map(|(c, centroid)| {
            let members: Vec<SegmentId> = ids
                .iter()
                .zip(&fit.assignments)
                .filter(|&(_, &a)| a == c)
                .map(|(&id, _)| id)
                .collect();
            (members, centroid)
        })
        .filter(|(members, _)| members.len() as f64 >= min_members && !members.is_empty())
        .collect();
    // Order concepts by their smallest member id so numbering does not depend
    // on the k-means label permutation.
    groups.sort_by_key(|(members, _)| members.iter().copied().min());
    let concepts = groups
        .into_iter()
        .enumerate()
        .map(|(i, (mut members, centroid))| {
            members.sort_unstable();
            Concept {
                id: format!("L{layer}_C{i}"),
                layer,
                centroid,
                members,
            }
        })
        .collect();
    Ok(ConceptLayer {
        layer,
        concepts,
        segment_count: t,
    })
}

/// Embeds, clusters and prunes every layer of a segment set.
pub fn discover_concepts(
    oracle: &dyn FeatureOracle,
    segments: &SegmentSet,
    cfg: &DiscoveryConfig,
) -> Result<Vec<ConceptLayer>> {
    segments
        .layers
        .iter()
        .map(|(&layer, records)| {
            let embeddings = embed_segments(oracle, records)?;
            let ids: Vec<SegmentId> = records.iter().map(|r| r.id).collect();
            cluster_layer(layer, &ids, &embeddings, cfg)
        })
        .collect()
}
