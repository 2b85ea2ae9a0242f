// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge-level computational graph of a transformer.
//!
//! Nodes are the token/position embedding (`Input`), every attention head,
//! every MLP and the unembedding (`Logits`). An edge carries one node's
//! residual-stream contribution into one input *channel* of a downstream
//! node: the Q, K or V input of a head, the MLP input, or the logits input.
//!
//! Canonical node order is `Input, Head(0,0..H), Mlp(0), Head(1,..), Mlp(1),
//! .., Logits`. Every channel reads from a prefix of that order, which makes
//! edge indices pure arithmetic: edges are grouped by destination channel
//! (canonical channel order) and, within a channel, ordered by source.

mod circuit;
mod export;

use std::fmt;

use sha2::{Digest, Sha256};

use crate::model::ModelConfig;

pub use circuit::{extract_circuit, precision_recall, prune, Circuit, PrecisionRecall, Provenance};
pub use export::{circuit_from_json, circuit_to_json, to_dot, CircuitFile, EdgeRecord};

/// A computation in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    Input,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Logits,
}

impl fmt::Display for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Node::Input => write!(f, "input"),
            Node::Head { layer, head } => write!(f, "a{layer}.h{head}"),
            Node::Mlp { layer } => write!(f, "m{layer}"),
            Node::Logits => write!(f, "logits"),
        }
    }
}

impl std::str::FromStr for Node {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("unrecognised node name `{s}`");
        match s {
            "input" => Ok(Node::Input),
            "logits" => Ok(Node::Logits),
            _ if s.starts_with('a') => {
                let (l, h) = s[1..].split_once(".h").ok_or_else(bad)?;
                Ok(Node::Head {
                    layer: l.parse().map_err(|_| bad())?,
                    head: h.parse().map_err(|_| bad())?,
                })
            }
            _ if s.starts_with('m') => Ok(Node::Mlp {
                layer: s[1..].parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Which input of the destination node an edge feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChannelKind {
    Q,
    K,
    V,
    MlpIn,
    LogitsIn,
}

impl ChannelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelKind::Q => "q",
            ChannelKind::K => "k",
            ChannelKind::V => "v",
            ChannelKind::MlpIn => "mlp_in",
            ChannelKind::LogitsIn => "logits_in",
        }
    }
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ChannelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "q" => Ok(ChannelKind::Q),
            "k" => Ok(ChannelKind::K),
            "v" => Ok(ChannelKind::V),
            "mlp_in" => Ok(ChannelKind::MlpIn),
            "logits_in" => Ok(ChannelKind::LogitsIn),
            other => Err(format!("unrecognised channel `{other}`")),
        }
    }
}

/// One input of one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channel {
    /// Canonical index of the receiving node.
    pub node: usize,
    pub kind: ChannelKind,
    /// Number of source nodes: sources are canonical nodes `0..n_sources`.
    pub n_sources: usize,
}

/// `src` node's output flowing into `channel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Edge {
    pub src: usize,
    pub channel: usize,
}

/// Complete edge-level graph for a given depth and head count.
#[derive(Debug, Clone)]
pub struct ComputationalGraph {
    n_layers: usize,
    n_heads: usize,
    nodes: Vec<Node>,
    channels: Vec<Channel>,
    channel_offsets: Vec<usize>,
    n_edges: usize,
}

impl ComputationalGraph {
    pub fn new(n_layers: usize, n_heads: usize) -> Self {
        let mut nodes = Vec::with_capacity(2 + n_layers * (n_heads + 1));
        nodes.push(Node::Input);
        let mut channels = Vec::with_capacity(n_layers * (3 * n_heads + 1) + 1);
        for layer in 0..n_layers {
            // sources of this layer's heads: Input plus every earlier layer
            let head_sources = nodes.len();
            for head in 0..n_heads {
                let node = nodes.len();
                nodes.push(Node::Head { layer, head });
                for kind in [ChannelKind::Q, ChannelKind::K, ChannelKind::V] {
                    channels.push(Channel {
                        node,
                        kind,
                        n_sources: head_sources,
                    });
                }
            }
            let node = nodes.len();
            nodes.push(Node::Mlp { layer });
            channels.push(Channel {
                node,
                kind: ChannelKind::MlpIn,
                n_sources: node,
            });
        }
        let logits = nodes.len();
        nodes.push(Node::Logits);
        channels.push(Channel {
            node: logits,
            kind: ChannelKind::LogitsIn,
            n_sources: logits,
        });

        let mut channel_offsets = Vec::with_capacity(channels.len() + 1);
        let mut total = 0;
        for c in &channels {
            channel_offsets.push(total);
            total += c.n_sources;
        }
        channel_offsets.push(total);

        Self {
            n_layers,
            n_heads,
            nodes,
            channels,
            channel_offsets,
            n_edges: total,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> Node {
        self.nodes[index]
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes that write into the residual stream (everything but Logits).
    pub fn n_upstream(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn logits_node(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn node_index(&self, node: Node) -> Option<usize> {
        let h1 = self.n_heads + 1;
        let idx = match node {
            Node::Input => 0,
            Node::Head { layer, head } if layer < self.n_layers && head < self.n_heads => {
                1 + layer * h1 + head
            }
            Node::Mlp { layer } if layer < self.n_layers => 1 + layer * h1 + self.n_heads,
            Node::Logits => self.logits_node(),
            _ => return None,
        };
        Some(idx)
    }

    pub fn channels(&self) -> &[Channel] {
        &self.channels
    }

    pub fn channel(&self, index: usize) -> Channel {
        self.channels[index]
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    /// Channel index of `kind` on head `(layer, head)`.
    pub fn head_channel(&self, layer: usize, head: usize, kind: ChannelKind) -> usize {
        let slot = match kind {
            ChannelKind::Q => 0,
            ChannelKind::K => 1,
            ChannelKind::V => 2,
            _ => panic!("{kind} is not a head channel"),
        };
        layer * (3 * self.n_heads + 1) + 3 * head + slot
    }

    pub fn mlp_channel(&self, layer: usize) -> usize {
        layer * (3 * self.n_heads + 1) + 3 * self.n_heads
    }

    pub fn logits_channel(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn channel_index(&self, node: usize, kind: ChannelKind) -> Option<usize> {
        match (self.nodes.get(node)?, kind) {
            (Node::Head { layer, head }, ChannelKind::Q | ChannelKind::K | ChannelKind::V) => {
                Some(self.head_channel(*layer, *head, kind))
            }
            (Node::Mlp { layer }, ChannelKind::MlpIn) => Some(self.mlp_channel(*layer)),
            (Node::Logits, ChannelKind::LogitsIn) => Some(self.logits_channel()),
            _ => None,
        }
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    /// Canonical index of `src → channel`, if that edge exists.
    pub fn edge_index(&self, src: usize, channel: usize) -> Option<usize> {
        let c = self.channels.get(channel)?;
        (src < c.n_sources).then(|| self.channel_offsets[channel] + src)
    }

    pub fn edge(&self, index: usize) -> Edge {
        assert!(index < self.n_edges, "edge index {index} out of range");
        let channel = self.channel_offsets.partition_point(|&o| o <= index) - 1;
        Edge {
            src: index - self.channel_offsets[channel],
            channel,
        }
    }

    /// Edge indices feeding `channel`, in source order.
    pub fn incoming(&self, channel: usize) -> std::ops::Range<usize> {
        self.channel_offsets[channel]..self.channel_offsets[channel + 1]
    }

    /// All edges in canonical order.
    pub fn edges(&self) -> impl Iterator<Item = Edge> + '_ {
        self.channels
            .iter()
            .enumerate()
            .flat_map(|(channel, c)| (0..c.n_sources).map(move |src| Edge { src, channel }))
    }

    /// Readable `src -> dst.channel` label.
    pub fn edge_label(&self, index: usize) -> String {
        let e = self.edge(index);
        let c = self.channels[e.channel];
        format!("{} -> {}.{}", self.nodes[e.src], self.nodes[c.node], c.kind)
    }

    /// Short hex digest identifying the graph shape; circuits carry it so
    /// circuits over different graphs are never compared.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(format!("layers={};heads={}", self.n_layers, self.n_heads));
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Graph for a model configuration.
pub fn build_graph(config: &ModelConfig) -> ComputationalGraph {
    ComputationalGraph::new(config.n_layers, config.n_heads)
}

/// Closed-form edge total for `n_layers` layers of `n_heads` heads.
pub fn edge_count_formula(n_layers: usize, n_heads: usize) -> usize {
    let (l, h) = (n_layers, n_heads);
    let heads: usize = (0..l).map(|i| 3 * h * (1 + (h + 1) * i)).sum();
    let mlps: usize = (0..l).map(|i| (h + 1) * i + h + 1).sum();
    heads + mlps + 1 + l * h + l
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_layer_one_head_has_eight_edges() {
        let g = ComputationalGraph::new(1, 1);
        assert_eq!(g.n_edges(), 8);
        let labels: Vec<_> = (0..8).map(|i| g.edge_label(i)).collect();
        assert_eq!(
            labels,
            [
                "input -> a0.h0.q",
                "input -> a0.h0.k",
                "input -> a0.h0.v",
                "input -> m0.mlp_in",
                "a0.h0 -> m0.mlp_in",
                "input -> logits.logits_in",
                "a0.h0 -> logits.logits_in",
                "m0 -> logits.logits_in",
            ]
        );
    }

    #[test]
    fn zero_layers_is_a_single_edge() {
        let g = ComputationalGraph::new(0, 4);
        assert_eq!(g.n_edges(), 1);
        assert_eq!(g.edge(0), Edge { src: 0, channel: 0 });
    }

    #[test]
    fn edge_index_round_trips() {
        let g = ComputationalGraph::new(3, 2);
        for (i, e) in g.edges().enumerate() {
            assert_eq!(g.edge(i), e);
            assert_eq!(g.edge_index(e.src, e.channel), Some(i));
        }
        assert_eq!(g.edges().count(), g.n_edges());
    }

    #[test]
    fn node_names_parse_back() {
        let g = ComputationalGraph::new(2, 3);
        for (i, n) in g.nodes().iter().enumerate() {
            let parsed: Node = n.to_string().parse().unwrap();
            assert_eq!(g.node_index(parsed), Some(i));
        }
    }

    #[test]
    fn sources_respect_causal_order() {
        let g = ComputationalGraph::new(3, 2);
        for e in g.edges() {
            let dst = g.channel(e.channel).node;
            assert!(e.src < dst);
            match (g.node(e.src), g.node(dst)) {
                (Node::Head { layer: a, .. }, Node::Head { layer: b, .. }) => assert!(a < b),
                (Node::Mlp { layer: a }, Node::Head { layer: b, .. }) => assert!(a < b),
                (Node::Head { layer: a, .. }, Node::Mlp { layer: b }) => assert!(a <= b),
                (Node::Mlp { layer: a }, Node::Mlp { layer: b }) => assert!(a < b),
                (_, Node::Input) | (Node::Logits, _) => panic!("invalid edge"),
                _ => {}
            }
        }
    }
}
