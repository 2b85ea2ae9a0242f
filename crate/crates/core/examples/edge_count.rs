// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge totals for GPT-2 Small, Medium and XL shaped graphs.

use eapgp::graph::{edge_count_formula, ComputationalGraph};

fn main() {
    for (name, layers, heads) in [("small", 12, 12), ("medium", 24, 16), ("xl", 48, 25)] {
        let start = std::time::Instant::now();
        let graph = ComputationalGraph::new(layers, heads);
        println!(
            "{name:>6}: L={layers:2} H={heads:2}  {:>9} edges ({} nodes, {} channels) in {:.1?}",
            graph.n_edges(),
            graph.n_nodes(),
            graph.n_channels(),
            start.elapsed()
        );
        assert_eq!(graph.n_edges(), edge_count_formula(layers, heads));
    }
}
