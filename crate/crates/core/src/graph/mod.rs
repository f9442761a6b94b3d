//! Concept graphs: assembly, metrics and validation experiments.

mod build;
mod diff;
mod suppress;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use build::{build_vcc, BuildConfig, VccBuild};
pub use diff::{nearest_concept_diff, LayerTally, SegmentAssignment};
pub use suppress::{
    pick_concept_targets, random_targets, suppress_concept, suppression_curve, suppression_experiment, trapezoid_auc,
    SuppressionCurve, SuppressionRun, SuppressionSummary, SuppressionTarget,
};

use crate::concepts::{segment_input, Concept, ConceptLayer};
use crate::error::{Result, VccError};
use crate::itcav::EdgeStat;
use crate::oracle::FeatureOracle;
use crate::segment::SegmentSet;

/// A visual concept connectome for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VccGraph {
    pub model_hash: String,
    pub class: usize,
    pub seed: u64,
    pub alpha: f64,
    pub tap_layers: Vec<usize>,
    pub layers: Vec<ConceptLayer>,
    /// Concept-to-concept edges between consecutive tap layers.
    pub edges: Vec<EdgeStat>,
    /// Deepest-layer concept to class-node edges.
    pub class_edges: Vec<EdgeStat>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl VccGraph {
    pub fn class_node(&self) -> String {
        crate::itcav::class_node(self.class)
    }

    pub fn concepts(&self) -> impl Iterator<Item = &Concept> {
        self.layers.iter().flat_map(|l| l.concepts.iter())
    }

    pub fn concept(&self, id: &str) -> Option<&Concept> {
        self.concepts().find(|c| c.id == id)
    }

    pub fn layer(&self, index: usize) -> Option<&ConceptLayer> {
        self.layers.iter().find(|l| l.layer == index)
    }

    /// Outgoing edges of a node, class edges included.
    pub fn outgoing<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a EdgeStat> + 'a {
        self.edges.iter().chain(&self.class_edges).filter(move |e| e.src == id)
    }

    /// Puts layers, concepts and edges in canonical order.
    pub fn canonicalize(&mut self) {
        let position: BTreeMap<String, (usize, usize)> = self
            .layers
            .iter()
            .flat_map(|l| l.concepts.iter().enumerate().map(move |(i, c)| (c.id.clone(), (l.layer, i))))
            .collect();
        self.layers.sort_by_key(|l| l.layer);
        let key = |e: &EdgeStat| (position.get(&e.src).copied(), position.get(&e.dst).copied(), e.dst.clone());
        self.edges.sort_by_key(key);
        self.class_edges.sort_by_key(key);
    }

    /// Checks the structural invariants: unique ids, layered acyclic edges
    /// between consecutive tap layers or from the deepest layer into the
    /// class node, weights in `[0, 1]` and every edge significant.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(VccError::InvalidInput(m));
        let taps = &self.tap_layers;
        if taps.is_empty() || taps.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("tap layers {taps:?} are not strictly increasing"));
        }
        let rank: BTreeMap<usize, usize> = taps.iter().enumerate().map(|(i, &t)| (t, i)).collect();
        let mut layer_of = BTreeMap::new();
        for layer in &self.layers {
            if !rank.contains_key(&layer.layer) {
                return bad(format!("concept layer {} is not a tap layer", layer.layer));
            }
            let mut members = BTreeSet::new();
            let dim = layer.concepts.first().map(|c| c.centroid.len());
            for c in &layer.concepts {
                if c.layer != layer.layer || c.members.is_empty() || Some(c.centroid.len()) != dim {
                    return bad(format!("concept {} is malformed", c.id));
                }
                if c.members.iter().any(|m| !members.insert(*m)) {
                    return bad(format!("concept {} shares members with another concept", c.id));
                }
                if layer_of.insert(c.id.clone(), layer.layer).is_some() {
                    return bad(format!("duplicate concept id {}", c.id));
                }
            }
        }
        let check = |e: &EdgeStat| -> Result<()> {
            if !(0.0..=1.0).contains(&e.weight) || !(0.0..=1.0).contains(&e.p_value) {
                return bad(format!("edge {} -> {} has weight or p outside [0, 1]", e.src, e.dst));
            }
            if !e.significant || e.p_value > self.alpha {
                return bad(format!("edge {} -> {} is not significant", e.src, e.dst));
            }
            Ok(())
        };
        let mut seen = BTreeSet::new();
        for e in &self.edges {
            check(e)?;
            let (Some(&a), Some(&b)) = (layer_of.get(&e.src), layer_of.get(&e.dst)) else {
                return bad(format!("edge {} -> {} references an unknown concept", e.src, e.dst));
            };
            if rank[&b] != rank[&a] + 1 {
                return bad(format!("edge {} -> {} skips or reverses layers", e.src, e.dst));
            }
            if !seen.insert((&e.src, &e.dst)) {
                return bad(format!("duplicate edge {} -> {}", e.src, e.dst));
            }
        }
        let deepest = *taps.last().expect("nonempty");
        let class = self.class_node();
        for e in &self.class_edges {
            check(e)?;
            if layer_of.get(&e.src) != Some(&deepest) || e.dst != class {
                return bad(format!("class edge {} -> {} is malformed", e.src, e.dst));
            }
            if !seen.insert((&e.src, &e.dst)) {
                return bad(format!("duplicate edge {} -> {}", e.src, e.dst));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub concept_count: usize,
    /// `None` for a layer without concepts.
    pub branching_factor: Option<f64>,
    /// `None` when no edges leave the layer.
    pub edge_weight_mean: Option<f64>,
    pub edge_weight_variance: Option<f64>,
}

/// Branching factor and outgoing edge-weight statistics per layer. Variance
/// is the population variance.
pub fn layer_metrics(graph: &VccGraph) -> Vec<LayerMetrics> {
    graph
        .layers
        .iter()
        .map(|layer| {
            let weights: Vec<f64> = layer
                .concepts
                .iter()
                .flat_map(|c| graph.outgoing(&c.id).map(|e| e.weight))
                .collect();
            let n = layer.concepts.len();
            let mean = (!weights.is_empty()).then(|| weights.iter().sum::<f64>() / weights.len() as f64);
            let variance =
                mean.map(|m| weights.iter().map(|w| (w - m) * (w - m)).sum::<f64>() / weights.len() as f64);
            LayerMetrics {
                layer: layer.layer,
                concept_count: n,
                branching_factor: (n > 0).then(|| weights.len() as f64 / n as f64),
                edge_weight_mean: mean,
                edge_weight_variance: variance,
            }
        })
        .collect()
}

/// Every path from `concept` to the class node, as lists of edge weights.
pub fn enumerate_paths(graph: &VccGraph, concept: &str) -> Vec<Vec<f64>> {
    let class = graph.class_node();
    let mut out = Vec::new();
    let mut stack = Vec::new();
    fn walk(graph: &VccGraph, node: &str, class: &str, stack: &mut Vec<f64>, out: &mut Vec<Vec<f64>>) {
        if node == class {
            out.push(stack.clone());
            return;
        }
        for e in graph.outgoing(node) {
            stack.push(e.weight);
            walk(graph, &e.dst, class, stack, out);
            stack.pop();
        }
    }
    walk(graph, concept, &class, &mut stack, &mut out);
    out
}

/// Number of paths to the class node, by dynamic programming over layers.
pub fn path_count(graph: &VccGraph, concept: &str) -> u128 {
    let mut memo = BTreeMap::new();
    path_stats(graph, concept, &mut memo).0
}

/// (path count, sum over paths of the mean edge weight), memoised per node.
fn path_stats(graph: &VccGraph, node: &str, memo: &mut BTreeMap<String, (u128, f64)>) -> (u128, f64) {
    if node == graph.class_node() {
        return (1, 0.0);
    }
    if let Some(&v) = memo.get(node) {
        return v;
    }
    // Paths of a given start node all have the same length in a layered graph,
    // so per-path means can be accumulated from suffix sums.
    let mut count = 0u128;
    let mut total = 0.0;
    for e in graph.outgoing(node) {
        let (c, s) = path_stats(graph, &e.dst, memo);
        let len = path_length(graph, &e.dst) as f64;
        // Each suffix mean m over `len` edges becomes (m·len + w)/(len + 1).
        count += c;
        total += (s * len + e.weight * c as f64) / (len + 1.0);
    }
    memo.insert(node.to_string(), (count, total));
    (count, total)
}

fn path_length(graph: &VccGraph, node: &str) -> usize {
    if node == graph.class_node() {
        return 0;
    }
    let layer = graph.concept(node).map(|c| c.layer);
    let rank = graph.tap_layers.iter().position(|&t| Some(t) == layer).unwrap_or(0);
    graph.tap_layers.len() - rank
}

/// Average path strength: mean over all paths to the class node of the mean
/// edge weight along the path.
pub fn aps(graph: &VccGraph, concept: &str) -> Result<f64> {
    if graph.concept(concept).is_none() {
        return Err(VccError::InvalidConcept(format!("unknown concept {concept}")));
    }
    let (count, total) = path_stats(graph, concept, &mut BTreeMap::new());
    if count == 0 {
        return Err(VccError::NoPath(format!("no path from {concept} to {}", graph.class_node())));
    }
    Ok(total / count as f64)
}

/// Logit sum: the class logit summed over the concept's member segments.
pub fn ls(oracle: &dyn FeatureOracle, concept: &Concept, segments: &SegmentSet, class: usize) -> Result<f64> {
    if class >= oracle.class_count() {
        return Err(VccError::InvalidInput(format!("class {class} out of range")));
    }
    let mut total = 0.0;
    for id in &concept.members {
        let seg = segments
            .get(*id)
            .ok_or_else(|| VccError::InvalidConcept(format!("segment {id} of {} is missing", concept.id)))?;
        total += oracle.logits(&segment_input(&seg.rgb, oracle.input_shape())?)?[class] as f64;
    }
    Ok(total)
}

/// Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(VccError::InvalidInput("pearson needs paired samples".into()));
    }
    if x.len() < 3 {
        return Err(VccError::InsufficientData(format!("pearson needs 3 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(VccError::UndefinedMetric("correlation with a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Ranks starting at 1, ties sharing their mean rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson over average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(VccError::InvalidInput("spearman needs paired samples".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApsLsPoint {
    pub concept: String,
    pub aps: f64,
    pub ls: f64,
}

/// APS and LS for every concept with a path to the class node, and their
/// Pearson correlation.
pub fn aps_ls_correlation(
    graph: &VccGraph,
    oracle: &dyn FeatureOracle,
    segments: &SegmentSet,
) -> Result<(Vec<ApsLsPoint>, f64)> {
    let mut points = Vec::new();
    for c in graph.concepts() {
        match aps(graph, &c.id) {
            Ok(a) => points.push(ApsLsPoint {
                concept: c.id.clone(),
                aps: a,
                ls: ls(oracle, c, segments, graph.class)?,
            }),
            Err(VccError::NoPath(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    let x: Vec<f64> = points.iter().map(|p| p.aps).collect();
    let y: Vec<f64> = points.iter().map(|p| p.ls).collect();
    let r = pearson(&x, &y)?;
    Ok((points, r))
}
