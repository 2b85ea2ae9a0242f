// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ComputationalGraph, Node};
use crate::error::{Error, Result};

/// Where a circuit came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub k: Option<usize>,
    pub n: usize,
    /// Fingerprint of the graph the edge indices refer to.
    pub config_hash: String,
}

impl Provenance {
    pub fn manual(graph: &ComputationalGraph) -> Self {
        Self {
            method: "manual".into(),
            k: None,
            n: 0,
            config_hash: graph.fingerprint(),
        }
    }
}

/// A subset of graph edges, optionally with the score each was selected by.
#[derive(Debug, Clone, PartialEq)]
pub struct Circuit {
    edges: BTreeMap<usize, Option<f64>>,
    pub provenance: Provenance,
}

impl Circuit {
    pub fn empty(provenance: Provenance) -> Self {
        Self {
            edges: BTreeMap::new(),
            provenance,
        }
    }

    pub fn from_edges(provenance: Provenance, edges: impl IntoIterator<Item = usize>) -> Self {
        Self {
            edges: edges.into_iter().map(|e| (e, None)).collect(),
            provenance,
        }
    }

    /// Every edge of `graph`.
    pub fn full(graph: &ComputationalGraph) -> Self {
        let mut provenance = Provenance::manual(graph);
        provenance.method = "full".into();
        provenance.n = graph.n_edges();
        Self::from_edges(provenance, 0..graph.n_edges())
    }

    pub fn insert(&mut self, edge: usize, score: Option<f64>) {
        self.edges.insert(edge, score);
    }

    pub fn remove(&mut self, edge: usize) -> bool {
        self.edges.remove(&edge).is_some()
    }

    pub fn contains(&self, edge: usize) -> bool {
        self.edges.contains_key(&edge)
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Edge indices in ascending order.
    pub fn edge_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.edges.keys().copied()
    }

    pub fn score(&self, edge: usize) -> Option<f64> {
        self.edges.get(&edge).copied().flatten()
    }

    pub fn edge_set(&self) -> BTreeSet<usize> {
        self.edges.keys().copied().collect()
    }

    /// Membership mask over all graph edges.
    pub fn mask(&self, graph: &ComputationalGraph) -> Vec<bool> {
        let mut m = vec![false; graph.n_edges()];
        for e in self.edge_indices() {
            m[e] = true;
        }
        m
    }

    /// Nodes touched by at least one circuit edge.
    pub fn nodes(&self, graph: &ComputationalGraph) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for e in self.edge_indices() {
            let edge = graph.edge(e);
            out.insert(edge.src);
            out.insert(graph.channel(edge.channel).node);
        }
        out
    }

    fn check_graph(&self, graph: &ComputationalGraph) -> Result<()> {
        let fp = graph.fingerprint();
        if self.provenance.config_hash != fp {
            return Err(Error::GraphMismatch(
                self.provenance.config_hash.clone(),
                fp,
            ));
        }
        if let Some(&last) = self.edges.keys().next_back() {
            if last >= graph.n_edges() {
                return Err(Error::CircuitFormat(format!(
                    "edge index {last} out of range for {} edges",
                    graph.n_edges()
                )));
            }
        }
        Ok(())
    }
}

/// The `n` edges with the largest `|score|` (ties to the lower canonical
/// index), pruned to a fixed point.
pub fn extract_circuit(
    graph: &ComputationalGraph,
    scores: &[f64],
    n: usize,
    provenance: Provenance,
) -> Result<Circuit> {
    if scores.len() != graph.n_edges() {
        return Err(Error::ShapeMismatch {
            op: "extract_circuit",
            lhs: vec![scores.len()],
            rhs: vec![graph.n_edges()],
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].abs().total_cmp(&scores[a].abs()).then(a.cmp(&b)));
    let mut circuit = Circuit::empty(provenance);
    for &e in order.iter().take(n) {
        circuit.insert(e, Some(scores[e]));
    }
    Ok(prune(graph, &circuit))
}

/// Repeatedly drop nodes with no parents (other than Input) or no children
/// (other than Logits), together with their edges, until nothing changes.
pub fn prune(graph: &ComputationalGraph, circuit: &Circuit) -> Circuit {
    let mut out = circuit.clone();
    loop {
        let mut has_in = vec![false; graph.n_nodes()];
        let mut has_out = vec![false; graph.n_nodes()];
        for e in out.edge_indices() {
            let edge = graph.edge(e);
            has_out[edge.src] = true;
            has_in[graph.channel(edge.channel).node] = true;
        }
        let dead: Vec<usize> = out
            .edge_indices()
            .filter(|&e| {
                let edge = graph.edge(e);
                let dst = graph.channel(edge.channel).node;
                let src_orphaned = graph.node(edge.src) != Node::Input && !has_in[edge.src];
                let dst_barren = graph.node(dst) != Node::Logits && !has_out[dst];
                src_orphaned || dst_barren
            })
            .collect();
        if dead.is_empty() {
            return out;
        }
        for e in dead {
            out.remove(e);
        }
    }
}

/// Overlap of a candidate circuit with a reference circuit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub edge_precision: f64,
    pub edge_recall: f64,
    pub node_precision: f64,
    pub node_recall: f64,
    /// Set when either circuit is empty and a ratio was defined by convention.
    pub degenerate: bool,
}

fn ratios(candidate: &BTreeSet<usize>, reference: &BTreeSet<usize>) -> (f64, f64, bool) {
    let hit = candidate.intersection(reference).count() as f64;
    let mut degenerate = false;
    let precision = if candidate.is_empty() {
        degenerate = true;
        1.0
    } else {
        hit / candidate.len() as f64
    };
    let recall = if candidate.is_empty() {
        degenerate = true;
        0.0
    } else if reference.is_empty() {
        degenerate = true;
        1.0
    } else {
        hit / reference.len() as f64
    };
    (precision, recall, degenerate)
}

/// Edge and node precision/recall of `candidate` against `reference`.
///
/// An empty candidate has precision 1 and recall 0; an empty reference with
/// a nonempty candidate has recall 1. Both cases set `degenerate`.
pub fn precision_recall(
    graph: &ComputationalGraph,
    candidate: &Circuit,
    reference: &Circuit,
) -> Result<PrecisionRecall> {
    candidate.check_graph(graph)?;
    reference.check_graph(graph)?;
    let (edge_precision, edge_recall, d1) = ratios(&candidate.edge_set(), &reference.edge_set());
    let (node_precision, node_recall, d2) =
        ratios(&candidate.nodes(graph), &reference.nodes(graph));
    Ok(PrecisionRecall {
        edge_precision,
        edge_recall,
        node_precision,
        node_recall,
        degenerate: d1 || d2,
    })
}
