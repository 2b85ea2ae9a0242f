// SPDX-License-Identifier: MIT OR Apache-2.0

//! Oracles shared by the integration tests. Nothing here calls the
//! attribution code; everything is plain forward passes.

#![allow(dead_code)]

use eapgp::autodiff::{Float, Tensor};
use eapgp::evaluation::mean_metric;
use eapgp::model::{ActivationCache, InterventionSpec, Model, ModelConfig};
use eapgp::tasks::TaskBatch;

/// A one-layer model small enough for exhaustive finite differences.
pub fn one_layer(seed: u64, vocab: usize, seq: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 8,
        d_head: 4,
        d_mlp: 16,
        ..ModelConfig::induction_toy(vocab, seq, seed)
    }
}

/// Mean task metric of the model on `batch` with `edges` corrupted from
/// `cache`.
pub fn patched_metric<F: Float>(
    model: &Model<F>,
    batch: &TaskBatch,
    edges: &[usize],
    cache: &ActivationCache<F>,
) -> f64 {
    let spec = InterventionSpec::new(model.graph(), edges.iter().copied(), cache).unwrap();
    let logits = model.patched_forward(&batch.clean, &spec).unwrap();
    mean_metric(&logits, &batch.metrics).unwrap()
}

/// `L(only edge e corrupted) − L(clean)` for every edge.
pub fn single_edge_deltas<F: Float>(model: &Model<F>, batch: &TaskBatch) -> Vec<f64> {
    let (_, corrupted) = model.forward_with_cache(&batch.corrupted).unwrap();
    let clean = mean_metric(&model.forward(&batch.clean).unwrap(), &batch.metrics).unwrap();
    (0..model.graph().n_edges())
        .map(|e| patched_metric(model, batch, &[e], &corrupted) - clean)
        .collect()
}

/// Central differences of the batch-mean metric with respect to every
/// channel input.
///
/// Channel `c` is perturbed alone by corrupting only the Input → `c` edge
/// with a cache whose Input contribution is the clean one plus `±h` in a
/// single entry.
pub fn fd_channel_grads(model: &Model<f64>, batch: &TaskBatch, h: f64) -> Vec<Tensor<f64>> {
    let graph = model.graph();
    let (_, clean) = model.forward_with_cache(&batch.clean).unwrap();
    let contributions: Vec<Tensor<f64>> = (0..clean.len())
        .map(|i| clean.get(i).unwrap().clone())
        .collect();
    let input = contributions[0].clone();
    let shifted = |i: usize, delta: f64| {
        let mut c = contributions.clone();
        c[0].data_mut()[i] += delta;
        ActivationCache::new(c, clean.logits().clone())
    };
    (0..graph.n_channels())
        .map(|ch| {
            let edge = graph.edge_index(0, ch).unwrap();
            Tensor::from_fn(input.shape(), |i| {
                let plus = patched_metric(model, batch, &[edge], &shifted(i, h));
                let minus = patched_metric(model, batch, &[edge], &shifted(i, -h));
                (plus - minus) / (2.0 * h)
            })
        })
        .collect()
}

/// `‖a − b‖∞ / ‖b‖∞`, or the absolute error when `b` is zero.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

pub fn as_f64<F: Float>(t: &Tensor<F>) -> Vec<f64> {
    t.data().iter().map(|x| x.as_f64()).collect()
}
