// SPDX-License-Identifier: MIT OR Apache-2.0

//! Channel-input gradients of a one-layer model against central
//! differences, measured by corrupting a single Input edge with a shifted
//! cache entry.

use eapgp::autodiff::Tensor;
use eapgp::evaluation::mean_metric;
use eapgp::model::{ActivationCache, InterventionSpec, Model, ModelConfig};
use eapgp::tasks::gen_induction;

fn main() -> eapgp::Result<()> {
    let config = ModelConfig {
        n_layers: 1,
        d_model: 8,
        d_head: 4,
        d_mlp: 16,
        ..ModelConfig::induction_toy(8, 6, 3)
    };
    let model = Model::<f64>::new(config)?;
    let graph = model.graph();
    let batch = gen_induction(1, 2, 6, 8)?;
    let analytic = model.grads_wrt_node_inputs(&batch.clean, None, &batch.metrics)?;
    let (_, clean) = model.forward_with_cache(&batch.clean)?;
    let base: Vec<Tensor<f64>> = (0..clean.len())
        .map(|i| clean.get(i).cloned())
        .collect::<eapgp::Result<_>>()?;

    let h = 1e-5;
    let metric_with = |edge: usize, i: usize, delta: f64| -> eapgp::Result<f64> {
        let mut c = base.clone();
        c[0].data_mut()[i] += delta;
        let cache = ActivationCache::new(c, clean.logits().clone());
        let spec = InterventionSpec::new(graph, [edge], &cache)?;
        mean_metric(&model.patched_forward(&batch.clean, &spec)?, &batch.metrics)
    };
    for (ch, channel) in graph.channels().iter().enumerate() {
        let edge = graph.edge_index(0, ch).expect("Input feeds every channel");
        let mut worst: f64 = 0.0;
        let scale = analytic.grads[ch].max_abs();
        for i in 0..base[0].numel() {
            let fd = (metric_with(edge, i, h)? - metric_with(edge, i, -h)?) / (2.0 * h);
            worst = worst.max((fd - analytic.grads[ch].data()[i]).abs());
        }
        println!(
            "{:>12}: max |analytic - numeric| / max |grad| = {:.2e}",
            format!("{}.{}", graph.node(channel.node), channel.kind),
            worst / scale
        );
    }
    Ok(())
}
