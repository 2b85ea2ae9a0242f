// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use super::PathObjective;
use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};

/// Below this gradient norm a GradPath step is considered degenerate.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Step length rule for GradPath.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Every step has unit length.
    #[default]
    LiteralUnit,
    /// Every step has length `‖x − x'‖ / k`, the straight line's step.
    EndpointBudget,
}

impl std::str::FromStr for StepRule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "literal_unit" | "literal-unit" => Ok(StepRule::LiteralUnit),
            "endpoint_budget" | "endpoint-budget" => Ok(StepRule::EndpointBudget),
            other => Err(format!(
                "unknown step rule `{other}` (expected literal_unit|endpoint_budget)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    StraightLine,
    GradPath,
}

/// Points at which loss gradients are averaged.
///
/// Tensors have the examples on their first axis. For a straight line the
/// points are `x' + (j/k)(x − x')`, `j = 1..k`. For GradPath they are
/// `γ_0 = x, γ_1, .., γ_{k−1}` and `endpoint` is `γ_k`.
#[derive(Debug, Clone)]
pub struct IntegrationPath<F: Float> {
    pub kind: PathKind,
    pub points: Vec<Tensor<F>>,
    pub endpoint: Tensor<F>,
    /// `‖endpoint − target‖` per example, where the target is `x'` for
    /// GradPath and `x` for the straight line.
    pub endpoint_residual: Vec<f64>,
    /// GradPath only: `W_j` per step, per example.
    pub grad_norms: Vec<Vec<f64>>,
    /// `‖γ_{j+1} − γ_j‖` per step, per example.
    pub step_lengths: Vec<Vec<f64>>,
    /// GradPath only: first step at which each example switched to the
    /// straight-line fill.
    pub degenerate_from: Vec<Option<usize>>,
}

impl<F: Float> IntegrationPath<F> {
    pub fn k(&self) -> usize {
        self.points.len()
    }

    /// Mean over examples of `W_j`, one value per step.
    pub fn mean_grad_norms(&self) -> Vec<f64> {
        self.grad_norms.iter().map(|w| mean(w)).collect()
    }

    pub fn mean_endpoint_residual(&self) -> f64 {
        mean(&self.endpoint_residual)
    }
}

fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        0.0
    } else {
        x.iter().sum::<f64>() / x.len() as f64
    }
}

fn examples<F: Float>(t: &Tensor<F>) -> Result<(usize, usize)> {
    match t.shape().first() {
        Some(&b) if b > 0 => Ok((b, t.numel() / b)),
        _ => Err(Error::ShapeMismatch {
            op: "path point",
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

/// Per-example L2 norms.
pub(crate) fn example_norms<F: Float>(t: &Tensor<F>) -> Vec<f64> {
    let per = t.numel() / t.shape()[0].max(1);
    t.data()
        .chunks(per.max(1))
        .map(|c| {
            c.iter()
                .map(|x| x.as_f64() * x.as_f64())
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

fn check_endpoints<F: Float>(x: &Tensor<F>, x_prime: &Tensor<F>, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    x.check_same_shape(x_prime, "path endpoints")?;
    examples(x).map(|_| ())
}

/// Points `x' + (j/k)(x − x')` for `j = 1..k`; the last point is `x` exactly.
pub fn straight_line_path<F: Float>(
    x: &Tensor<F>,
    x_prime: &Tensor<F>,
    k: usize,
) -> Result<IntegrationPath<F>> {
    check_endpoints(x, x_prime, k)?;
    let (b, _) = examples(x)?;
    let points: Vec<Tensor<F>> = (1..=k)
        .map(|j| {
            if j == k {
                return x.clone();
            }
            let a = F::of(j as f64 / k as f64);
            x_prime
                .zip_map(x, "straight line", |p, c| p + a * (c - p))
                .expect("shapes checked")
        })
        .collect();
    let mut step_lengths = Vec::with_capacity(k);
    let mut prev = x_prime.clone();
    for p in &points {
        step_lengths.push(example_norms(&p.sub(&prev)?));
        prev = p.clone();
    }
    Ok(IntegrationPath {
        kind: PathKind::StraightLine,
        endpoint: x.clone(),
        points,
        endpoint_residual: vec![0.0; b],
        grad_norms: Vec::new(),
        step_lengths,
        degenerate_from: vec![None; b],
    })
}

/// Normalized gradient descent from `x` on `‖G(γ) − G(x')‖²`.
///
/// `k` descent steps are taken; the first `k` iterates (starting at `x`)
/// are the gradient points. An example whose gradient norm drops below
/// [`DEGENERATE_NORM`] stops descending and walks the straight line to `x'`
/// over its remaining steps.
pub fn build_gradpath<F: Float, O: PathObjective<F> + ?Sized>(
    objective: &O,
    x: &Tensor<F>,
    x_prime: &Tensor<F>,
    k: usize,
    rule: StepRule,
) -> Result<IntegrationPath<F>> {
    check_endpoints(x, x_prime, k)?;
    let (b, per) = examples(x)?;
    let target = objective.output(x_prime)?;
    let budget: Vec<f64> = example_norms(&x.sub(x_prime)?)
        .into_iter()
        .map(|d| d / k as f64)
        .collect();

    let mut gamma = x.clone();
    let mut points = Vec::with_capacity(k);
    let mut grad_norms = Vec::with_capacity(k);
    let mut step_lengths = Vec::with_capacity(k);
    let mut degenerate_from: Vec<Option<usize>> = vec![None; b];
    for j in 0..k {
        points.push(gamma.clone());
        let g = objective.distance_grad(&gamma, &target)?;
        if !g.is_finite() {
            return Err(Error::NonFinitePath { step: j });
        }
        let w = example_norms(&g);
        let before = gamma.clone();
        let gd = g.data();
        let xp = x_prime.data();
        let data = gamma.data_mut();
        for e in 0..b {
            let range = e * per..(e + 1) * per;
            if degenerate_from[e].is_none() && w[e] < DEGENERATE_NORM {
                degenerate_from[e] = Some(j);
            }
            if degenerate_from[e].is_some() {
                let frac = F::of(1.0 / (k - j) as f64);
                for i in range {
                    data[i] += (xp[i] - data[i]) * frac;
                }
            } else {
                let eta = match rule {
                    StepRule::LiteralUnit => 1.0,
                    StepRule::EndpointBudget => budget[e],
                };
                let c = F::of(eta / w[e]);
                for i in range {
                    data[i] -= c * gd[i];
                }
            }
        }
        grad_norms.push(w);
        step_lengths.push(example_norms(&gamma.sub(&before)?));
    }
    let endpoint_residual = example_norms(&gamma.sub(x_prime)?);
    Ok(IntegrationPath {
        kind: PathKind::GradPath,
        points,
        endpoint: gamma,
        endpoint_residual,
        grad_norms,
        step_lengths,
        degenerate_from,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_f64(&[1, 1], &[v]).unwrap()
    }

    #[test]
    fn straight_line_quarter_points() {
        let p = straight_line_path(&scalar(1.0), &scalar(0.0), 4).unwrap();
        let v: Vec<f64> = p.points.iter().map(|t| t.data()[0]).collect();
        assert_eq!(v, vec![0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn straight_line_k1_is_clean() {
        let x = Tensor::from_f64(&[2, 3], &[0.1, -0.7, 3.0, 1.0, 2.0, 5.5]).unwrap();
        let p = straight_line_path(&x, &x.scale(0.3), 1).unwrap();
        assert_eq!(p.points, vec![x]);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(straight_line_path(&scalar(1.0), &scalar(0.0), 0).is_err());
    }
}
