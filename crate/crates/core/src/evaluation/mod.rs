// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task metrics, circuit faithfulness and sparsity sweeps.

pub mod metric;
pub mod stats;

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Float;
use crate::error::{Error, Result};
use crate::graph::{extract_circuit, Circuit, ComputationalGraph, Provenance};
use crate::model::{ActivationCache, InterventionSpec, Model};
use crate::tasks::TaskBatch;

pub use metric::{
    logit_diff, mean_metric, metric_loss, metric_value, prob_diff, MetricKind, MetricSpec,
};

/// How faithfully a circuit reproduces the model on one batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessReport {
    pub delta_plus: f64,
    pub delta_minus: f64,
    pub delta_c: f64,
    pub nfs: f64,
    pub sparsity: f64,
    pub n_edges_selected: usize,
    pub n_edges_after_prune: usize,
    pub method: String,
    pub k: Option<usize>,
    pub wall_time_s: f64,
}

/// `(δ_C − δ_−)/(δ_+ − δ_−)`, unclipped.
pub fn normalized_faithfulness(delta_c: f64, delta_plus: f64, delta_minus: f64) -> Result<f64> {
    if delta_plus == delta_minus {
        return Err(Error::DegenerateTask(delta_plus));
    }
    Ok((delta_c - delta_minus) / (delta_plus - delta_minus))
}

/// Clean and corrupted baselines plus the corrupted cache used to patch.
#[derive(Debug, Clone)]
pub struct EvalContext<F: Float> {
    pub delta_plus: f64,
    pub delta_minus: f64,
    corrupted: ActivationCache<F>,
}

impl<F: Float> EvalContext<F> {
    pub fn new(model: &Model<F>, batch: &TaskBatch) -> Result<Self> {
        batch.validate(model.config().vocab_size)?;
        let clean = model.forward(&batch.clean)?;
        let (corrupted_logits, corrupted) = model.forward_with_cache(&batch.corrupted)?;
        Ok(Self {
            delta_plus: mean_metric(&clean, &batch.metrics)?,
            delta_minus: mean_metric(&corrupted_logits, &batch.metrics)?,
            corrupted,
        })
    }

    pub fn corrupted_cache(&self) -> &ActivationCache<F> {
        &self.corrupted
    }

    /// Mean metric with every edge outside `circuit` patched.
    pub fn delta_c(&self, model: &Model<F>, circuit: &Circuit, batch: &TaskBatch) -> Result<f64> {
        let graph = model.graph();
        if circuit.provenance.config_hash != graph.fingerprint() {
            return Err(Error::GraphMismatch(
                circuit.provenance.config_hash.clone(),
                graph.fingerprint(),
            ));
        }
        let spec = InterventionSpec::from_circuit(graph, circuit, &self.corrupted);
        let logits = model.patched_forward(&batch.clean, &spec)?;
        mean_metric(&logits, &batch.metrics)
    }

    /// Full report for a circuit that was selected from `n_selected` edges.
    pub fn report(
        &self,
        model: &Model<F>,
        circuit: &Circuit,
        batch: &TaskBatch,
        n_selected: usize,
        sparsity: f64,
    ) -> Result<FaithfulnessReport> {
        let start = Instant::now();
        let delta_c = self.delta_c(model, circuit, batch)?;
        Ok(FaithfulnessReport {
            delta_plus: self.delta_plus,
            delta_minus: self.delta_minus,
            delta_c,
            nfs: normalized_faithfulness(delta_c, self.delta_plus, self.delta_minus)?,
            sparsity,
            n_edges_selected: n_selected,
            n_edges_after_prune: circuit.len(),
            method: circuit.provenance.method.clone(),
            k: circuit.provenance.k,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }
}

/// δ_C: mean task metric with all non-circuit edges corrupted.
pub fn evaluate_circuit<F: Float>(
    model: &Model<F>,
    circuit: &Circuit,
    batch: &TaskBatch,
) -> Result<f64> {
    EvalContext::new(model, batch)?.delta_c(model, circuit, batch)
}

/// Number of edges kept at a sparsity level.
pub fn edges_for_sparsity(n_edges: usize, level: f64) -> usize {
    ((1.0 - level) * n_edges as f64).round() as usize
}

/// One report per sparsity level, in the given order.
pub fn faithfulness_sweep<F: Float>(
    model: &Model<F>,
    graph: &ComputationalGraph,
    scores: &[f64],
    provenance: &Provenance,
    sparsity_levels: &[f64],
    batch: &TaskBatch,
) -> Result<Vec<FaithfulnessReport>> {
    if let Some(bad) = sparsity_levels.iter().find(|l| !(0.0..1.0).contains(*l)) {
        return Err(Error::InvalidArgument(format!(
            "sparsity level {bad} outside [0, 1)"
        )));
    }
    let ctx = EvalContext::new(model, batch)?;
    sparsity_levels
        .iter()
        .map(|&level| {
            let start = Instant::now();
            let n = edges_for_sparsity(graph.n_edges(), level);
            let mut prov = provenance.clone();
            prov.n = n;
            let circuit = extract_circuit(graph, scores, n, prov)?;
            let mut row = ctx.report(model, &circuit, batch, n, level)?;
            row.wall_time_s = start.elapsed().as_secs_f64();
            Ok(row)
        })
        .collect()
}

/// Sweep table as CSV.
pub fn write_sweep_csv(w: impl Write, rows: &[FaithfulnessReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "sparsity",
        "n_selected",
        "n_after_prune",
        "method",
        "k",
        "delta_plus",
        "delta_minus",
        "delta_c",
        "nfs",
        "wall_time_s",
    ])?;
    for r in rows {
        out.write_record([
            r.sparsity.to_string(),
            r.n_edges_selected.to_string(),
            r.n_edges_after_prune.to_string(),
            r.method.clone(),
            r.k.map_or(String::new(), |k| k.to_string()),
            r.delta_plus.to_string(),
            r.delta_minus.to_string(),
            r.delta_c.to_string(),
            r.nfs.to_string(),
            format!("{:.6}", r.wall_time_s),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// The sparsity grid used for end-to-end sweeps.
pub const DEFAULT_SPARSITY_LEVELS: [f64; 9] =
    [0.90, 0.92, 0.94, 0.95, 0.96, 0.97, 0.98, 0.99, 0.995];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nfs_examples() {
        assert_eq!(normalized_faithfulness(3.80, 3.80, 0.03).unwrap(), 1.0);
        assert_eq!(normalized_faithfulness(0.03, 3.80, 0.03).unwrap(), 0.0);
        let mid = normalized_faithfulness((3.80 + 0.03) / 2.0, 3.80, 0.03).unwrap();
        assert!((mid - 0.5).abs() < 1e-15);
    }

    #[test]
    fn equal_baselines_are_degenerate() {
        assert!(matches!(
            normalized_faithfulness(1.0, 2.0, 2.0),
            Err(Error::DegenerateTask(_))
        ));
    }

    #[test]
    fn nfs_is_not_clipped() {
        assert!(normalized_faithfulness(-1.0, 1.0, 0.0).unwrap() < 0.0);
    }

    #[test]
    fn sparsity_rounding() {
        assert_eq!(edges_for_sparsity(32491, 0.0), 32491);
        assert_eq!(edges_for_sparsity(46, 0.90), 5);
        assert_eq!(edges_for_sparsity(46, 0.995), 0);
    }
}
