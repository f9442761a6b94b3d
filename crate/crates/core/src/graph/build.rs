use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::VccGraph;
use crate::concepts::{cluster_layer, gap, segment_activations, segment_input, ConceptLayer, DiscoveryConfig};
use crate::error::{Result, VccError};
use crate::io::ImageFile;
use crate::itcav::{
    class_gradients, class_node, edge_from_cavs, layer_null_cavs, member_gradients, source_cavs, Cav, EdgeConfig,
    EdgeStat, SignConvention, SourceConcept,
};
use crate::oracle::FeatureOracle;
use crate::rng::{derive_seed, tag};
use crate::segment::{topdown_segment, SegmentConfig, SegmentSet};
use crate::tensor::TensorF32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct BuildConfig {
    /// Defaults to the model's own tap layers.
    pub tap_layers: Option<Vec<usize>>,
    pub segment: SegmentConfig,
    pub discovery: DiscoveryConfig,
    pub edges: EdgeConfig,
    /// Master seed; the stage seeds are derived from it.
    pub seed: u64,
}

/// A built graph together with the segments its concepts refer to.
#[derive(Debug, Clone)]
pub struct VccBuild {
    pub graph: VccGraph,
    pub segments: SegmentSet,
}

/// Segments the class images, discovers concepts per tap layer and connects
/// them with significance-tested edges.
pub fn build_vcc(
    oracle: &dyn FeatureOracle,
    images: &[ImageFile],
    class: usize,
    pool: &[ImageFile],
    cfg: &BuildConfig,
) -> Result<VccBuild> {
    if class >= oracle.class_count() {
        return Err(VccError::InvalidInput(format!("class {class} out of range")));
    }
    let mut taps = cfg.tap_layers.clone().unwrap_or_else(|| oracle.tap_layers());
    taps.sort_unstable();
    taps.dedup();
    let seg_cfg = SegmentConfig {
        seed: derive_seed(cfg.seed, &[tag("segment")]),
        ..cfg.segment.clone()
    };
    let disc_cfg = DiscoveryConfig {
        seed: derive_seed(cfg.seed, &[tag("discover")]),
        ..cfg.discovery.clone()
    };
    let edge_cfg = EdgeConfig {
        seed: derive_seed(cfg.seed, &[tag("edges")]),
        ..cfg.edges.clone()
    };

    let segments = topdown_segment(oracle, images, &taps, &seg_cfg)?;

    // Concepts, keeping each segment's flattened activation for CAV training.
    let mut layers = Vec::new();
    let mut activations: BTreeMap<u64, TensorF32> = BTreeMap::new();
    for &t in &taps {
        let records = segments.segments(t);
        let acts = segment_activations(oracle, records)?;
        let embeddings = acts.iter().map(gap).collect::<Result<Vec<_>>>()?;
        let ids: Vec<u64> = records.iter().map(|r| r.id).collect();
        layers.push(cluster_layer(t, &ids, &embeddings, &disc_cfg)?);
        activations.extend(ids.into_iter().zip(acts));
    }

    let input_shape = oracle.input_shape();
    let pool_inputs: Vec<TensorF32> = pool.iter().map(|p| segment_input(p, input_shape)).collect::<Result<_>>()?;
    let pool_acts = tap_activations(oracle, &pool_inputs, &taps)?;

    let mut warnings = Vec::new();
    let mut edges = Vec::new();
    let mut class_edges = Vec::new();
    for (rank, layer) in layers.iter().enumerate() {
        if layer.concepts.is_empty() {
            warnings.push(format!("layer {} has no concepts; its edges are skipped", layer.layer));
            continue;
        }
        let pool_refs: Vec<&[f32]> = pool_acts[rank].iter().map(|a| a.data()).collect();
        let cavs = layer_cavs(layer, &activations, &pool_refs, &edge_cfg, &mut warnings)?;
        let null = layer_null_cavs(layer.layer, &pool_refs, &edge_cfg)?;
        let null = null.as_deref();

        if let Some(next) = layers.get(rank + 1) {
            // Distance gradients of each deeper concept's members at this layer.
            let targets: Vec<(String, Vec<TensorF32>)> = next
                .concepts
                .iter()
                .map(|dst| {
                    let inputs = dst
                        .members
                        .iter()
                        .map(|id| {
                            let seg = segments.get(*id).expect("member segments exist");
                            segment_input(&seg.rgb, input_shape)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let grads = member_gradients(oracle, &inputs, layer.layer, next.layer, &dst.centroid)?;
                    Ok((dst.id.clone(), grads))
                })
                .collect::<Result<_>>()?;
            let found: Vec<EdgeStat> = cavs
                .par_iter()
                .flat_map_iter(|(src, cavs)| {
                    targets.iter().map(move |(dst, grads)| {
                        edge_from_cavs(src, dst, cavs, null, grads, edge_cfg.sign, edge_cfg.alpha)
                    })
                })
                .collect::<Result<_>>()?;
            edges.extend(found.into_iter().filter(|e| e.significant));
        } else {
            let class_inputs: Vec<TensorF32> =
                images.iter().map(|i| segment_input(i, input_shape)).collect::<Result<_>>()?;
            let grads = class_gradients(oracle, &class_inputs, layer.layer, class)?;
            let node = class_node(class);
            let found: Vec<EdgeStat> = cavs
                .par_iter()
                .map(|(src, cavs)| {
                    edge_from_cavs(src, &node, cavs, null, &grads, SignConvention::Literal, edge_cfg.alpha)
                })
                .collect::<Result<_>>()?;
            class_edges.extend(found.into_iter().filter(|e| e.significant));
        }
    }

    let mut graph = VccGraph {
        model_hash: oracle.model_hash(),
        class,
        seed: cfg.seed,
        alpha: edge_cfg.alpha,
        tap_layers: taps,
        layers,
        edges,
        class_edges,
        warnings,
    };
    graph.canonicalize();
    graph.validate()?;
    Ok(VccBuild { graph, segments })
}

/// Per-run CAVs for every concept of a layer. Concepts whose CAVs cannot be
/// trained are reported and left without outgoing edges.
fn layer_cavs(
    layer: &ConceptLayer,
    activations: &BTreeMap<u64, TensorF32>,
    pool: &[&[f32]],
    cfg: &EdgeConfig,
    warnings: &mut Vec<String>,
) -> Result<Vec<(String, Vec<Cav>)>> {
    let trained: Vec<(String, Result<Vec<Cav>>)> = layer
        .concepts
        .par_iter()
        .map(|c| {
            let pos: Vec<&[f32]> = c.members.iter().map(|m| activations[m].data()).collect();
            let src = SourceConcept {
                id: &c.id,
                layer: layer.layer,
                activations: &pos,
            };
            (c.id.clone(), source_cavs(src, pool, cfg))
        })
        .collect();
    let mut out = Vec::new();
    for (id, r) in trained {
        match r {
            Ok(cavs) => out.push((id, cavs)),
            Err(e @ (VccError::ZeroMargin(_) | VccError::InsufficientData(_))) => {
                warnings.push(format!("concept {id} has no CAV: {e}"));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Activations of each input at every tap layer, indexed `[tap][input]`.
pub(crate) fn tap_activations(
    oracle: &dyn FeatureOracle,
    inputs: &[TensorF32],
    taps: &[usize],
) -> Result<Vec<Vec<TensorF32>>> {
    let per_input: Vec<Vec<TensorF32>> = inputs
        .par_iter()
        .map(|x| {
            let mut out = Vec::with_capacity(taps.len());
            let mut cur = oracle.forward_to(x, taps[0])?;
            for w in taps.windows(2) {
                let next = oracle.forward_between(&cur, w[0], w[1])?;
                out.push(std::mem::replace(&mut cur, next));
            }
            out.push(cur);
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut by_tap: Vec<Vec<TensorF32>> = (0..taps.len()).map(|_| Vec::with_capacity(inputs.len())).collect();
    for acts in per_input {
        for (slot, a) in by_tap.iter_mut().zip(acts) {
            slot.push(a);
        }
    }
    Ok(by_tap)
}
