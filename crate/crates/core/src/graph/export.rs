// SPDX-License-Identifier: MIT OR Apache-2.0

//! Circuit JSON and Graphviz DOT.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{ChannelKind, Circuit, ComputationalGraph, Node, Provenance};
use crate::error::{Error, Result};

pub const CIRCUIT_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphShape {
    pub n_layers: usize,
    pub n_heads: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub src: String,
    pub dst: String,
    pub channel: String,
    pub score: Option<f64>,
}

/// On-disk circuit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitFile {
    pub version: u32,
    pub model_config_hash: String,
    pub graph: GraphShape,
    pub method: String,
    pub k: Option<usize>,
    pub n: usize,
    pub nodes: Vec<String>,
    pub edges: Vec<EdgeRecord>,
}

pub fn circuit_to_json(graph: &ComputationalGraph, circuit: &Circuit) -> CircuitFile {
    let nodes = circuit
        .nodes(graph)
        .into_iter()
        .map(|n| graph.node(n).to_string())
        .collect();
    let edges = circuit
        .edge_indices()
        .map(|e| {
            let edge = graph.edge(e);
            let c = graph.channel(edge.channel);
            EdgeRecord {
                src: graph.node(edge.src).to_string(),
                dst: graph.node(c.node).to_string(),
                channel: c.kind.to_string(),
                score: circuit.score(e),
            }
        })
        .collect();
    CircuitFile {
        version: CIRCUIT_FILE_VERSION,
        model_config_hash: circuit.provenance.config_hash.clone(),
        graph: GraphShape {
            n_layers: graph.n_layers(),
            n_heads: graph.n_heads(),
        },
        method: circuit.provenance.method.clone(),
        k: circuit.provenance.k,
        n: circuit.provenance.n,
        nodes,
        edges,
    }
}

/// Rebuild the graph and circuit described by a circuit file.
pub fn circuit_from_json(file: &CircuitFile) -> Result<(ComputationalGraph, Circuit)> {
    if file.version != CIRCUIT_FILE_VERSION {
        return Err(Error::CircuitFormat(format!(
            "unsupported version {}",
            file.version
        )));
    }
    let graph = ComputationalGraph::new(file.graph.n_layers, file.graph.n_heads);
    if graph.fingerprint() != file.model_config_hash {
        return Err(Error::GraphMismatch(
            file.model_config_hash.clone(),
            graph.fingerprint(),
        ));
    }
    let bad = |msg: String| Error::CircuitFormat(msg);
    let mut circuit = Circuit::empty(Provenance {
        method: file.method.clone(),
        k: file.k,
        n: file.n,
        config_hash: file.model_config_hash.clone(),
    });
    for rec in &file.edges {
        let src: Node = rec.src.parse().map_err(bad)?;
        let dst: Node = rec.dst.parse().map_err(bad)?;
        let kind: ChannelKind = rec.channel.parse().map_err(bad)?;
        let edge = graph
            .node_index(src)
            .zip(graph.node_index(dst))
            .and_then(|(s, d)| graph.edge_index(s, graph.channel_index(d, kind)?))
            .ok_or_else(|| {
                bad(format!(
                    "no edge {} -> {}.{} in this graph",
                    rec.src, rec.dst, rec.channel
                ))
            })?;
        circuit.insert(edge, rec.score);
    }
    Ok((graph, circuit))
}

impl CircuitFile {
    pub fn to_json_string(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Graphviz rendering of a circuit, or of the whole graph when `circuit` is
/// `None`.
pub fn to_dot(graph: &ComputationalGraph, circuit: Option<&Circuit>) -> String {
    let edges: Vec<usize> = match circuit {
        Some(c) => c.edge_indices().collect(),
        None => (0..graph.n_edges()).collect(),
    };
    let nodes: Vec<usize> = match circuit {
        Some(c) => c.nodes(graph).into_iter().collect(),
        None => (0..graph.n_nodes()).collect(),
    };
    let mut out = String::from("digraph circuit {\n  rankdir=BT;\n  node [shape=box];\n");
    for n in nodes {
        let node = graph.node(n);
        let shape = match node {
            Node::Input | Node::Logits => "ellipse",
            Node::Head { .. } => "box",
            Node::Mlp { .. } => "hexagon",
        };
        let _ = writeln!(out, "  \"{node}\" [shape={shape}];");
    }
    for e in edges {
        let edge = graph.edge(e);
        let c = graph.channel(edge.channel);
        let label = match circuit.and_then(|c| c.score(e)) {
            Some(s) => format!("{} {:.4}", c.kind, s),
            None => c.kind.to_string(),
        };
        let _ = writeln!(
            out,
            "  \"{}\" -> \"{}\" [label=\"{}\"];",
            graph.node(edge.src),
            graph.node(c.node),
            label
        );
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_preserves_edges_and_scores() {
        let g = ComputationalGraph::new(2, 3);
        let mut c = Circuit::empty(Provenance::manual(&g));
        c.insert(0, Some(0.25));
        c.insert(7, None);
        c.insert(g.n_edges() - 1, Some(-1.5));
        let text = circuit_to_json(&g, &c).to_json_string().unwrap();
        let (g2, c2) = circuit_from_json(&CircuitFile::from_json_str(&text).unwrap()).unwrap();
        assert_eq!(g2.n_edges(), g.n_edges());
        assert_eq!(c2, c);
    }

    #[test]
    fn dot_lists_every_circuit_edge() {
        let g = ComputationalGraph::new(1, 1);
        let c = Circuit::from_edges(Provenance::manual(&g), [2, 6]);
        let dot = to_dot(&g, Some(&c));
        assert_eq!(dot.matches("->").count(), 2);
        assert!(dot.contains("\"input\" -> \"a0.h0\" [label=\"v\"]"));
        assert!(dot.starts_with("digraph"));
    }

    #[test]
    fn rejects_tampered_hash() {
        let g = ComputationalGraph::new(1, 2);
        let mut f = circuit_to_json(&g, &Circuit::full(&g));
        f.model_config_hash = "deadbeef".into();
        assert!(circuit_from_json(&f).is_err());
    }
}
