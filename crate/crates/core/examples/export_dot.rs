// SPDX-License-Identifier: MIT OR Apache-2.0

//! Write a discovered circuit as JSON and Graphviz DOT.
//!
//! ```text
//! cargo run --release --example export_dot -- [model.eapg] && dot -Tsvg circuit.dot -o circuit.svg
//! ```

mod shared;

use eapgp::attribution::{edge_scores, Method, PathSpec};
use eapgp::graph::{circuit_to_json, to_dot};
use eapgp::tasks::TaskKind;

fn main() -> eapgp::Result<()> {
    let model = shared::induction_model()?;
    let graph = model.graph();
    let batch = TaskKind::INDUCTION_DEFAULT.generate(77, 64)?;
    let circuit = edge_scores(&model, &batch, Method::EapGp, &PathSpec::default())?
        .extract(graph, graph.n_edges() / 4)?;
    std::fs::write(
        "circuit.json",
        circuit_to_json(graph, &circuit).to_json_string()?,
    )?;
    std::fs::write("circuit.dot", to_dot(graph, Some(&circuit)))?;
    println!(
        "wrote circuit.json and circuit.dot ({} edges)",
        circuit.len()
    );
    Ok(())
}
