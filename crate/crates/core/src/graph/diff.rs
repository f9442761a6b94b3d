use serde::{Deserialize, Serialize};

use super::VccGraph;
use crate::concepts::embed_segments;
use crate::error::{Result, VccError};
use crate::io::ImageFile;
use crate::oracle::FeatureOracle;
use crate::segment::{topdown_segment, SegmentConfig};
use crate::tensor::squared_distance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAssignment {
    pub segment: u64,
    /// 0 for the first graph, 1 for the second.
    pub graph: usize,
    pub concept: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTally {
    pub layer: usize,
    pub assignments: Vec<SegmentAssignment>,
    /// Segments assigned to each graph.
    pub counts: [usize; 2],
}

/// Segments `image` and assigns every segment to the nearest concept
/// centroid across both graphs at its layer. Layers where either graph has
/// no concepts are skipped and reported.
pub fn nearest_concept_diff(
    oracle: &dyn FeatureOracle,
    graphs: [&VccGraph; 2],
    image: &ImageFile,
    cfg: &SegmentConfig,
) -> Result<(Vec<LayerTally>, Vec<String>)> {
    if graphs[0].tap_layers != graphs[1].tap_layers {
        return Err(VccError::InvalidInput("graphs were built on different tap layers".into()));
    }
    let taps = graphs[0].tap_layers.clone();
    let segments = topdown_segment(oracle, std::slice::from_ref(image), &taps, cfg)?;
    let mut warnings = Vec::new();
    let mut tallies = Vec::new();
    for &t in &taps {
        let layers = [graphs[0].layer(t), graphs[1].layer(t)];
        if layers.iter().any(|l| l.is_none_or(|l| l.concepts.is_empty())) {
            warnings.push(format!("layer {t} has no concepts in one of the graphs; skipped"));
            continue;
        }
        let records = segments.segments(t);
        let embeddings = embed_segments(oracle, records)?;
        let mut tally = LayerTally {
            layer: t,
            assignments: Vec::new(),
            counts: [0, 0],
        };
        for (record, e) in records.iter().zip(&embeddings) {
            let mut best: Option<SegmentAssignment> = None;
            for (g, layer) in layers.iter().enumerate() {
                for c in &layer.expect("checked").concepts {
                    if c.centroid.len() != e.len() {
                        return Err(VccError::InvalidInput(format!(
                            "concept {} does not live in layer {t}'s feature space",
                            c.id
                        )));
                    }
                    let d = squared_distance(e, &c.centroid).sqrt();
                    if best.as_ref().is_none_or(|b| d < b.distance) {
                        best = Some(SegmentAssignment {
                            segment: record.id,
                            graph: g,
                            concept: c.id.clone(),
                            distance: d,
                        });
                    }
                }
            }
            let best = best.expect("both layers have concepts");
            tally.counts[best.graph] += 1;
            tally.assignments.push(best);
        }
        tallies.push(tally);
    }
    Ok((tallies, warnings))
}
