// SPDX-License-Identifier: MIT OR Apache-2.0

//! Edge attribution: EAP, EAP-IG and EAP-GP.
//!
//! Every method scores edge `u → v.c` as
//!
//! ```text
//! score(u, v.c) = Σ (x'_u − x_u) ⊙ mean_j ∂L/∂(input of v.c) at point j
//! ```
//!
//! where `L` is the batch-mean task metric, the sum runs over examples,
//! positions and features, and the methods differ only in the points at
//! which the gradient is averaged:
//!
//! - EAP: one point, the clean run (or the corrupted run).
//! - EAP-IG: `k` points on the straight line from the corrupted to the
//!   clean activation.
//! - EAP-GP: the first `k` iterates of normalized gradient descent from the
//!   clean activation towards the corrupted output.
//!
//! In [`PathMode::Shared`] a single path is built in Input-node space and
//! shared by all edges, with every downstream activation recomputed at each
//! point. [`PathMode::PerNode`] builds a separate path in each source node's
//! output space, which costs one path per node.

mod objective;
mod path;
mod saturation;
pub mod toy;

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};
use crate::evaluation::{EvalContext, FaithfulnessReport};
use crate::graph::{extract_circuit, Circuit, ComputationalGraph, Provenance};
use crate::model::Model;
use crate::tasks::TaskBatch;

pub use crate::model::Positions;
pub use objective::{PathObjective, TransformerObjective};
pub use path::{
    build_gradpath, straight_line_path, IntegrationPath, PathKind, StepRule, DEGENERATE_NORM,
};
pub use saturation::{saturation_profile, write_path_diagnostics, SaturationProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "eap")]
    Eap,
    #[serde(rename = "eap-ig")]
    EapIg,
    #[serde(rename = "eap-gp")]
    EapGp,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Eap, Method::EapIg, Method::EapGp];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Eap => "eap",
            Method::EapIg => "eap-ig",
            Method::EapGp => "eap-gp",
        }
    }

    pub fn path_kind(self) -> Option<PathKind> {
        match self {
            Method::Eap => None,
            Method::EapIg => Some(PathKind::StraightLine),
            Method::EapGp => Some(PathKind::GradPath),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "eap" => Ok(Method::Eap),
            "eap-ig" => Ok(Method::EapIg),
            "eap-gp" => Ok(Method::EapGp),
            other => Err(format!(
                "unknown method `{other}` (expected eap|eap-ig|eap-gp)"
            )),
        }
    }
}

/// Where EAP evaluates its single gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradPoint {
    #[default]
    Clean,
    Corrupted,
}

impl std::str::FromStr for GradPoint {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "clean" => Ok(GradPoint::Clean),
            "corrupted" => Ok(GradPoint::Corrupted),
            other => Err(format!(
                "unknown grad point `{other}` (expected clean|corrupted)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMode {
    #[default]
    Shared,
    PerNode,
}

impl std::str::FromStr for PathMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "shared" => Ok(PathMode::Shared),
            "per_node" | "per-node" => Ok(PathMode::PerNode),
            other => Err(format!(
                "unknown path mode `{other}` (expected shared|per_node)"
            )),
        }
    }
}

/// Path options. `step_rule` and `objective_positions` only affect GradPath;
/// `grad_point` only affects EAP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSpec {
    pub k: usize,
    pub step_rule: StepRule,
    pub objective_positions: Positions,
    pub grad_point: GradPoint,
    pub path_mode: PathMode,
}

impl Default for PathSpec {
    fn default() -> Self {
        Self::with_k(5)
    }
}

impl PathSpec {
    pub fn with_k(k: usize) -> Self {
        Self {
            k,
            step_rule: StepRule::LiteralUnit,
            objective_positions: Positions::All,
            grad_point: GradPoint::Clean,
            path_mode: PathMode::Shared,
        }
    }
}

/// One score per graph edge, in canonical edge order.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeScores {
    pub method: Method,
    pub spec: PathSpec,
    pub batch: String,
    pub scores: Vec<f64>,
}

impl EdgeScores {
    /// `k` as recorded in provenance; EAP has none.
    pub fn k(&self) -> Option<usize> {
        (self.method != Method::Eap).then_some(self.spec.k)
    }

    pub fn provenance(&self, graph: &ComputationalGraph, n: usize) -> Provenance {
        Provenance {
            method: self.method.as_str().into(),
            k: self.k(),
            n,
            config_hash: graph.fingerprint(),
        }
    }

    pub fn extract(&self, graph: &ComputationalGraph, n: usize) -> Result<Circuit> {
        extract_circuit(graph, &self.scores, n, self.provenance(graph, n))
    }

    pub fn write_csv(&self, w: impl Write, graph: &ComputationalGraph) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["edge_index", "src", "dst", "channel", "score"])?;
        for (i, s) in self.scores.iter().enumerate() {
            let e = graph.edge(i);
            let c = graph.channel(e.channel);
            out.write_record([
                i.to_string(),
                graph.node(e.src).to_string(),
                graph.node(c.node).to_string(),
                c.kind.to_string(),
                format!("{s:e}"),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Clean and corrupted activations plus their differences.
struct Activations<F: Float> {
    clean: Vec<Tensor<F>>,
    corrupted: Vec<Tensor<F>>,
    diffs: Vec<Tensor<F>>,
}

fn activations<F: Float>(model: &Model<F>, batch: &TaskBatch) -> Result<Activations<F>> {
    batch.validate(model.config().vocab_size)?;
    let (_, clean) = model.forward_with_cache(&batch.clean)?;
    let (_, corrupted) = model.forward_with_cache(&batch.corrupted)?;
    let n = model.graph().n_upstream();
    let clean: Vec<Tensor<F>> = (0..n)
        .map(|u| clean.get(u).cloned())
        .collect::<Result<_>>()?;
    let corrupted: Vec<Tensor<F>> = (0..n)
        .map(|u| corrupted.get(u).cloned())
        .collect::<Result<_>>()?;
    let diffs = corrupted
        .iter()
        .zip(&clean)
        .map(|(c, x)| c.sub(x))
        .collect::<Result<_>>()?;
    Ok(Activations {
        clean,
        corrupted,
        diffs,
    })
}

/// Gradient-evaluation points for `method` between `x` and `x_prime`.
pub fn gradient_points<F: Float, O: PathObjective<F> + ?Sized>(
    objective: &O,
    method: Method,
    spec: &PathSpec,
    x: &Tensor<F>,
    x_prime: &Tensor<F>,
) -> Result<Vec<Tensor<F>>> {
    Ok(match method {
        Method::Eap => vec![match spec.grad_point {
            GradPoint::Clean => x.clone(),
            GradPoint::Corrupted => x_prime.clone(),
        }],
        Method::EapIg => straight_line_path(x, x_prime, spec.k)?.points,
        Method::EapGp => build_gradpath(objective, x, x_prime, spec.k, spec.step_rule)?.points,
    })
}

/// Channel gradients averaged over `points`.
pub fn mean_loss_grads<F: Float, O: PathObjective<F> + ?Sized>(
    objective: &O,
    points: &[Tensor<F>],
) -> Result<Vec<Tensor<F>>> {
    let mut acc: Option<Vec<Tensor<F>>> = None;
    for p in points {
        let g = objective.loss_grads(p)?;
        acc = Some(match acc {
            None => g,
            Some(a) => a
                .iter()
                .zip(&g)
                .map(|(x, y)| x.add(y))
                .collect::<Result<_>>()?,
        });
    }
    let acc = acc.ok_or(Error::EmptyPath)?;
    let inv = F::of(1.0 / points.len() as f64);
    Ok(acc.into_iter().map(|t| t.scale(inv)).collect())
}

fn dot<F: Float>(a: &Tensor<F>, b: &Tensor<F>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| x.as_f64() * y.as_f64())
        .sum()
}

/// Edge scores for `method` on `batch`.
pub fn edge_scores<F: Float>(
    model: &Model<F>,
    batch: &TaskBatch,
    method: Method,
    spec: &PathSpec,
) -> Result<EdgeScores> {
    if spec.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let graph = model.graph();
    let acts = activations(model, batch)?;
    let mut scores = vec![0.0; graph.n_edges()];
    let objective = |node: usize| TransformerObjective {
        model,
        tokens: &batch.clean,
        metrics: &batch.metrics,
        node,
        positions: spec.objective_positions,
    };
    let mut score_from = |src: Option<usize>, grads: &[Tensor<F>]| {
        for ch in 0..graph.n_channels() {
            for (u, e) in graph.incoming(ch).enumerate() {
                if src.is_none_or(|s| s == u) {
                    scores[e] = dot(&acts.diffs[u], &grads[ch]);
                }
            }
        }
    };
    match spec.path_mode {
        PathMode::Shared => {
            let obj = objective(0);
            let points = gradient_points(&obj, method, spec, &acts.clean[0], &acts.corrupted[0])?;
            score_from(None, &mean_loss_grads(&obj, &points)?);
        }
        PathMode::PerNode => {
            for u in 0..graph.n_upstream() {
                let obj = objective(u);
                let points =
                    gradient_points(&obj, method, spec, &acts.clean[u], &acts.corrupted[u])?;
                score_from(Some(u), &mean_loss_grads(&obj, &points)?);
            }
        }
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite score for edge {}",
            graph.edge_label(i)
        )));
    }
    Ok(EdgeScores {
        method,
        spec: *spec,
        batch: batch.name.clone(),
        scores,
    })
}

/// EAP: one gradient at `spec.grad_point`.
pub fn eap_scores<F: Float>(
    model: &Model<F>,
    batch: &TaskBatch,
    spec: &PathSpec,
) -> Result<EdgeScores> {
    edge_scores(model, batch, Method::Eap, spec)
}

/// EAP-IG with `spec.k` straight-line points.
pub fn eap_ig_scores<F: Float>(
    model: &Model<F>,
    batch: &TaskBatch,
    spec: &PathSpec,
) -> Result<EdgeScores> {
    edge_scores(model, batch, Method::EapIg, spec)
}

/// EAP-GP with `spec.k` GradPath points.
pub fn eap_gp_scores<F: Float>(
    model: &Model<F>,
    batch: &TaskBatch,
    spec: &PathSpec,
) -> Result<EdgeScores> {
    edge_scores(model, batch, Method::EapGp, spec)
}

/// The shared Input-space path a method would integrate over, for
/// diagnostics. EAP gets a one-point straight "path".
pub fn input_path<F: Float>(
    model: &Model<F>,
    batch: &TaskBatch,
    method: Method,
    spec: &PathSpec,
) -> Result<IntegrationPath<F>> {
    let acts = activations(model, batch)?;
    let (x, xp) = (&acts.clean[0], &acts.corrupted[0]);
    let obj = TransformerObjective {
        model,
        tokens: &batch.clean,
        metrics: &batch.metrics,
        node: 0,
        positions: spec.objective_positions,
    };
    match method {
        Method::EapGp => build_gradpath(&obj, x, xp, spec.k, spec.step_rule),
        Method::EapIg => straight_line_path(x, xp, spec.k),
        Method::Eap => straight_line_path(x, xp, 1),
    }
}

/// Result of scoring, extracting and evaluating one circuit.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub scores: EdgeScores,
    pub circuit: Circuit,
    pub report: FaithfulnessReport,
}

/// Score every edge, keep the top `n`, prune, and measure faithfulness.
pub fn run_pipeline<F: Float>(
    model: &Model<F>,
    batch: &TaskBatch,
    method: Method,
    spec: &PathSpec,
    n: usize,
) -> Result<PipelineOutput> {
    let start = Instant::now();
    let graph = model.graph();
    let scores = edge_scores(model, batch, method, spec)?;
    let circuit = scores.extract(graph, n)?;
    let ctx = EvalContext::new(model, batch)?;
    let sparsity = 1.0 - n.min(graph.n_edges()) as f64 / graph.n_edges() as f64;
    let mut report = ctx.report(model, &circuit, batch, n, sparsity)?;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(PipelineOutput {
        scores,
        circuit,
        report,
    })
}
