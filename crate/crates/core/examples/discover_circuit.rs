// SPDX-License-Identifier: MIT OR Apache-2.0

//! Score edges with each method, keep the top 10%, and report faithfulness.
//!
//! ```text
//! cargo run --release --example discover_circuit -- [model.eapg]
//! ```

mod shared;

use eapgp::attribution::{run_pipeline, Method, PathSpec};
use eapgp::tasks::TaskKind;

fn main() -> eapgp::Result<()> {
    let model = shared::induction_model()?.cast::<f64>();
    let batch = TaskKind::INDUCTION_DEFAULT.generate(77, 64)?;
    let n = model.graph().n_edges() / 10;
    for method in Method::ALL {
        let out = run_pipeline(&model, &batch, method, &PathSpec::with_k(5), n)?;
        println!(
            "{method:>6}: kept {:2} of {n} edges after pruning, NFS {:.3}",
            out.report.n_edges_after_prune, out.report.nfs
        );
        for e in out.circuit.edge_indices() {
            println!(
                "        {:<26} {:+.4}",
                model.graph().edge_label(e),
                out.circuit.score(e).unwrap_or(0.0)
            );
        }
    }
    Ok(())
}
