//! Top-down feature-space segmentation.
//!
//! Tap layers are processed from deepest to shallowest. Every mask found at
//! a deeper layer is upsampled to the next shallower layer and the
//! activations inside it are clustered again, so each shallow segment is
//! nested inside the deeper segment it came from. The deepest layer starts
//! from an all-ones mask. Each mask is also lifted to image resolution and
//! applied to the RGB image, giving the masked segments used downstream.

mod cluster;
mod mask;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cluster::{choose_k_silhouette, mask_slic, mean_silhouette, SILHOUETTE_FLOOR};
pub use mask::{resize_plane, rgb_mask, upsample_mask, MaskGrid};

use crate::error::{Result, VccError};
use crate::io::ImageFile;
use crate::oracle::{spatial_dims, FeatureOracle};
use crate::rng::{derive_seed, tag};

pub type SegmentId = u64;

/// A segment mask at one layer with its lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub image: usize,
    pub layer: usize,
    pub parent: Option<SegmentId>,
    pub grid: MaskGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentRecord {
    pub id: SegmentId,
    pub mask: BinaryMask,
    /// Mask lifted to image resolution.
    pub image_mask: MaskGrid,
    /// Image with everything outside `image_mask` set to zero.
    pub rgb: ImageFile,
}

impl SegmentRecord {
    pub fn relative_size(&self) -> f64 {
        self.image_mask.active_count() as f64 / (self.image_mask.height * self.image_mask.width) as f64
    }
}

/// Number of surviving children of one parent mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChildCount {
    pub image: usize,
    pub layer: usize,
    /// `None` for the all-ones seed of the deepest layer.
    pub parent: Option<SegmentId>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SegmentSet {
    pub layers: BTreeMap<usize, Vec<SegmentRecord>>,
    pub child_counts: Vec<ChildCount>,
}

impl SegmentSet {
    pub fn segments(&self, layer: usize) -> &[SegmentRecord] {
        self.layers.get(&layer).map_or(&[], |v| v.as_slice())
    }

    pub fn get(&self, id: SegmentId) -> Option<&SegmentRecord> {
        self.layers.values().flatten().find(|s| s.id == id)
    }

    pub fn len(&self) -> usize {
        self.layers.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentConfig {
    pub compactness: f32,
    /// Upper end of the silhouette candidate range; the range is
    /// `2..=min(max_k, active_cells / cells_per_cluster)`.
    pub max_k: usize,
    pub cells_per_cluster: usize,
    /// Masks with fewer active cells than `max(min_cells, min_fraction · cells)` are dropped.
    pub min_cells: usize,
    pub min_fraction: f64,
    pub seed: u64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        Self {
            compactness: 0.8,
            max_k: 8,
            cells_per_cluster: 9,
            min_cells: 4,
            min_fraction: 0.01,
            seed: 0,
        }
    }
}

/// Segments a batch of images over the given tap layers.
pub fn topdown_segment(
    oracle: &dyn FeatureOracle,
    images: &[ImageFile],
    tap_layers: &[usize],
    cfg: &SegmentConfig,
) -> Result<SegmentSet> {
    if images.is_empty() {
        return Err(VccError::InvalidInput("no images to segment".into()));
    }
    if tap_layers.is_empty() {
        return Err(VccError::InvalidInput("no tap layers".into()));
    }
    let mut taps = tap_layers.to_vec();
    taps.sort_unstable();
    taps.dedup();
    for &t in &taps {
        spatial_dims(oracle, t)?;
    }

    let per_image: Vec<(Vec<SegmentRecord>, Vec<ChildCount>)> = images
        .par_iter()
        .enumerate()
        .map(|(i, img)| segment_image(oracle, i, img, &taps, cfg))
        .collect::<Result<_>>()?;

    let mut set = SegmentSet::default();
    let mut offset = 0u64;
    for (records, counts) in per_image {
        let n = records.len() as u64;
        for mut r in records {
            r.id += offset;
            r.mask.parent = r.mask.parent.map(|p| p + offset);
            set.layers.entry(r.mask.layer).or_default().push(r);
        }
        set.child_counts.extend(counts.into_iter().map(|mut c| {
            c.parent = c.parent.map(|p| p + offset);
            c
        }));
        offset += n;
    }
    for &t in &taps {
        set.layers.entry(t).or_default();
    }
    Ok(set)
}

fn segment_image(
    oracle: &dyn FeatureOracle,
    image_index: usize,
    image: &ImageFile,
    taps: &[usize],
    cfg: &SegmentConfig,
) -> Result<(Vec<SegmentRecord>, Vec<ChildCount>)> {
    let input = image.to_tensor();
    if input.shape() != oracle.input_shape() {
        return Err(VccError::InvalidInput(format!(
            "image shape {:?} does not match model input {:?}",
            input.shape(),
            oracle.input_shape()
        )));
    }
    let mut acts = Vec::with_capacity(taps.len());
    let mut cur = oracle.forward_to(&input, taps[0])?;
    acts.push(cur.clone());
    for pair in taps.windows(2) {
        cur = oracle.forward_between(&cur, pair[0], pair[1])?;
        acts.push(cur.clone());
    }

    let mut records: Vec<SegmentRecord> = Vec::new();
    let mut counts = Vec::new();
    // (parent id, parent mask at its own resolution)
    let mut parents: Vec<(Option<SegmentId>, MaskGrid)> = Vec::new();
    for (depth, &layer) in taps.iter().enumerate().rev() {
        let features = &acts[depth];
        let (_, h, w) = features.chw().expect("tap layers are spatial");
        let threshold = (cfg.min_cells as f64).max(cfg.min_fraction * (h * w) as f64);
        let regions: Vec<(Option<SegmentId>, MaskGrid)> = if depth + 1 == taps.len() {
            vec![(None, MaskGrid::full(h, w))]
        } else {
            parents
                .iter()
                .map(|(id, m)| Ok((*id, upsample_mask(m, h, w)?)))
                .collect::<Result<_>>()?
        };
        let mut next = Vec::new();
        for (parent, region) in regions {
            let seed = derive_seed(
                cfg.seed,
                &[tag("segment"), image_index as u64, layer as u64, parent.map_or(u64::MAX, |p| p)],
            );
            let active = region.active_count();
            let k_max = cfg.max_k.min(active / cfg.cells_per_cluster.max(1));
            let k = if k_max >= 2 {
                let (_, points) = cluster::region_features(features, &region)?;
                choose_k_silhouette(&points, 2..=k_max, seed)?
            } else {
                1
            };
            let masks = mask_slic(features, &region, k, cfg.compactness, seed)?;
            let mut kept = 0;
            for grid in masks {
                if (grid.active_count() as f64) < threshold {
                    continue;
                }
                let image_mask = upsample_mask(&grid, image.height(), image.width())?;
                let rgb = rgb_mask(image, &image_mask)?;
                let id = records.len() as SegmentId;
                records.push(SegmentRecord {
                    id,
                    mask: BinaryMask {
                        image: image_index,
                        layer,
                        parent,
                        grid: grid.clone(),
                    },
                    image_mask,
                    rgb,
                });
                next.push((Some(id), grid));
                kept += 1;
            }
            counts.push(ChildCount {
                image: image_index,
                layer,
                parent,
                count: kept,
            });
        }
        parents = next;
    }
    Ok((records, counts))
}

/// Mean fraction of image pixels covered by the segments.
pub fn relative_segment_size(segments: &[SegmentRecord]) -> Result<f64> {
    if segments.is_empty() {
        return Err(VccError::UndefinedMetric("relative size of an empty segment list".into()));
    }
    Ok(segments.iter().map(SegmentRecord::relative_size).sum::<f64>() / segments.len() as f64)
}
