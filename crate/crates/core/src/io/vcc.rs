use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::graph::VccGraph;

/// Canonical pretty JSON. Floats use shortest round-trip decimals, so equal
/// graphs always serialize to identical bytes.
pub fn vcc_to_json(graph: &VccGraph) -> Result<Vec<u8>> {
    let mut g = graph.clone();
    g.canonicalize();
    let mut bytes = serde_json::to_vec_pretty(&g)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn vcc_from_json(bytes: &[u8]) -> Result<VccGraph> {
    let graph: VccGraph = serde_json::from_slice(bytes)?;
    graph.validate()?;
    Ok(graph)
}

pub fn write_vcc_json(graph: &VccGraph, path: &Path) -> Result<()> {
    fs::write(path, vcc_to_json(graph)?)?;
    Ok(())
}

pub fn read_vcc_json(path: &Path) -> Result<VccGraph> {
    vcc_from_json(&fs::read(path)?)
}

/// Graphviz rendering: one rank per layer, pen width growing with edge
/// weight and the class node as the sink.
pub fn export_dot(graph: &VccGraph) -> String {
    let mut out = String::new();
    let class = graph.class_node();
    out.push_str("digraph vcc {\n  rankdir=BT;\n  node [shape=box, fontsize=10];\n");
    for layer in &graph.layers {
        let _ = writeln!(out, "  subgraph layer_{} {{\n    rank=same;", layer.layer);
        for c in &layer.concepts {
            let _ = writeln!(out, "    \"{}\" [label=\"{}\\n{} segs\"];", c.id, c.id, c.members.len());
        }
        out.push_str("  }\n");
    }
    let _ = writeln!(out, "  \"{class}\" [shape=doublecircle];\n  {{ rank=sink; \"{class}\"; }}");
    for e in graph.edges.iter().chain(&graph.class_edges) {
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\" [penwidth={:.3}, label=\"{:.2}\"];",
            e.src,
            e.dst,
            0.25 + 4.0 * e.weight,
            e.weight
        );
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::sample_graph;

    #[test]
    fn json_round_trip_is_byte_stable() {
        let g = sample_graph();
        let a = vcc_to_json(&g).unwrap();
        let back = vcc_from_json(&a).unwrap();
        assert_eq!(vcc_to_json(&back).unwrap(), a);
        let text = String::from_utf8(a).unwrap();
        for field in ["model_hash", "class", "seed", "layers", "index", "concepts", "centroid", "members", "edges", "class_edges", "p_value", "runs"] {
            assert!(text.contains(&format!("\"{field}\"")), "missing {field}");
        }
    }

    #[test]
    fn floats_survive_exactly() {
        let mut g = sample_graph();
        g.layers[0].concepts[0].centroid[0] = 0.1f32 + f32::EPSILON;
        g.edges[0].weight = 1.0 / 3.0;
        let back = vcc_from_json(&vcc_to_json(&g).unwrap()).unwrap();
        assert_eq!(back.layers[0].concepts[0].centroid[0].to_bits(), g.layers[0].concepts[0].centroid[0].to_bits());
        assert_eq!(back.edges[0].weight.to_bits(), g.edges[0].weight.to_bits());
    }

    #[test]
    fn invalid_graphs_are_rejected_on_read() {
        let mut g = sample_graph();
        g.edges[0].weight = 1.5;
        let bytes = serde_json::to_vec(&g).unwrap();
        assert!(vcc_from_json(&bytes).is_err());
    }

    #[test]
    fn dot_has_ranks_and_sink() {
        let g = sample_graph();
        let dot = export_dot(&g);
        assert!(dot.starts_with("digraph vcc {"));
        assert_eq!(dot.matches("rank=same").count(), g.layers.len());
        assert!(dot.contains(&format!("rank=sink; \"{}\"", g.class_node())));
        assert_eq!(dot.matches(" -> ").count(), g.edges.len() + g.class_edges.len());
    }
}
