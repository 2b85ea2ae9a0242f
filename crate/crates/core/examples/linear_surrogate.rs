// SPDX-License-Identifier: MIT OR Apache-2.0

//! On a model that is affine in every node input, all three methods give
//! the same scores and those scores are exact single-edge patching effects.

use eapgp::attribution::{edge_scores, Method, PathSpec};
use eapgp::evaluation::mean_metric;
use eapgp::model::{InterventionSpec, Model, ModelConfig};
use eapgp::tasks::gen_induction;

fn main() -> eapgp::Result<()> {
    let config = ModelConfig {
        linear: true,
        ..ModelConfig::induction_toy(16, 12, 0)
    };
    let model = Model::<f64>::new(config)?;
    let graph = model.graph();
    let batch = gen_induction(5, 16, 12, 16)?;
    let eap = edge_scores(&model, &batch, Method::Eap, &PathSpec::default())?.scores;
    for k in [1, 2, 5, 10] {
        for method in [Method::EapIg, Method::EapGp] {
            let s = edge_scores(&model, &batch, method, &PathSpec::with_k(k))?.scores;
            let gap = s
                .iter()
                .zip(&eap)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            println!("{method:>6} k={k:2}: max |score - eap| = {gap:.1e}");
        }
    }
    let (_, corrupted) = model.forward_with_cache(&batch.corrupted)?;
    let clean = mean_metric(&model.forward(&batch.clean)?, &batch.metrics)?;
    let mut worst: f64 = 0.0;
    for e in 0..graph.n_edges() {
        let spec = InterventionSpec::new(graph, [e], &corrupted)?;
        let delta =
            mean_metric(&model.patched_forward(&batch.clean, &spec)?, &batch.metrics)? - clean;
        worst = worst.max((delta - eap[e]).abs());
    }
    println!(
        "max |eap - patching delta| over {} edges = {worst:.1e}",
        graph.n_edges()
    );
    Ok(())
}
