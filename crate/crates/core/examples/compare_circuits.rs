// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge and node overlap between the circuits the three methods find.
//!
//! ```text
//! cargo run --release --example compare_circuits -- [model.eapg]
//! ```

mod shared;

use eapgp::attribution::{edge_scores, Method, PathSpec};
use eapgp::graph::precision_recall;
use eapgp::tasks::TaskKind;

fn main() -> eapgp::Result<()> {
    let model = shared::induction_model()?.cast::<f64>();
    let graph = model.graph();
    let batch = TaskKind::INDUCTION_DEFAULT.generate(77, 64)?;
    let n = graph.n_edges() / 5;
    let circuits = Method::ALL
        .iter()
        .map(|&m| edge_scores(&model, &batch, m, &PathSpec::default())?.extract(graph, n))
        .collect::<eapgp::Result<Vec<_>>>()?;
    // EAP-IG serves as the reference.
    for (method, candidate) in Method::ALL.iter().zip(&circuits) {
        let pr = precision_recall(graph, candidate, &circuits[1])?;
        println!(
            "{method:>6} vs eap-ig: edges P {:.2} R {:.2}, nodes P {:.2} R {:.2} ({} edges)",
            pr.edge_precision,
            pr.edge_recall,
            pr.node_precision,
            pr.node_recall,
            candidate.len()
        );
    }
    Ok(())
}
