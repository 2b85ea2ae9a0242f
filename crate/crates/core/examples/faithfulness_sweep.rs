// SPDX-License-Identifier: MIT OR Apache-2.0

//! NFS across sparsity levels for all three methods, written as CSV.
//!
//! ```text
//! cargo run --release --example faithfulness_sweep -- [model.eapg] > sweep.csv
//! ```

mod shared;

use eapgp::attribution::{edge_scores, Method, PathSpec};
use eapgp::evaluation::{faithfulness_sweep, stats, write_sweep_csv};
use eapgp::tasks::TaskKind;

fn main() -> eapgp::Result<()> {
    let model = shared::induction_model()?.cast::<f64>();
    let graph = model.graph();
    let batch = TaskKind::INDUCTION_DEFAULT.generate(77, 64)?;
    let levels = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95];
    let mut rows = Vec::new();
    for method in Method::ALL {
        let scores = edge_scores(&model, &batch, method, &PathSpec::default())?;
        let sweep = faithfulness_sweep(
            &model,
            graph,
            &scores.scores,
            &scores.provenance(graph, 0),
            &levels,
            &batch,
        )?;
        let sizes: Vec<f64> = sweep.iter().map(|r| r.n_edges_after_prune as f64).collect();
        let nfs: Vec<f64> = sweep.iter().map(|r| r.nfs).collect();
        eprintln!(
            "{method}: Spearman(size, NFS) = {:.3}",
            stats::spearman(&sizes, &nfs)
        );
        rows.extend(sweep);
    }
    write_sweep_csv(std::io::stdout().lock(), &rows)
}
