// SPDX-License-Identifier: MIT OR Apache-2.0

use crate::autodiff::{Float, Tensor};
use crate::error::Result;
use crate::evaluation::MetricSpec;
use crate::model::{Model, Positions, Tokens};

/// A function evaluated along an integration path.
///
/// Points are tensors whose first axis indexes examples; examples never
/// interact, so every per-example quantity can be read off one batched call.
pub trait PathObjective<F: Float> {
    /// Output `G(point)` compared against the target by the path builder.
    fn output(&self, point: &Tensor<F>) -> Result<Tensor<F>>;

    /// `∇_point ‖G(point) − target‖²`, summed over examples (each example's
    /// block is its own gradient).
    fn distance_grad(&self, point: &Tensor<F>, target: &Tensor<F>) -> Result<Tensor<F>>;

    /// Gradient of the batch-mean loss with respect to every channel.
    fn loss_grads(&self, point: &Tensor<F>) -> Result<Vec<Tensor<F>>>;

    /// One label per entry of [`PathObjective::loss_grads`].
    fn channel_labels(&self) -> Vec<String>;
}

/// A transformer run on fixed tokens with one node's contribution replaced
/// by the path point.
pub struct TransformerObjective<'a, F: Float> {
    pub model: &'a Model<F>,
    pub tokens: &'a Tokens,
    pub metrics: &'a [MetricSpec],
    /// Canonical index of the overridden node; 0 is the Input node.
    pub node: usize,
    pub positions: Positions,
}

impl<F: Float> PathObjective<F> for TransformerObjective<'_, F> {
    fn output(&self, point: &Tensor<F>) -> Result<Tensor<F>> {
        self.model
            .output_with_override(self.tokens, self.node, point)
    }

    fn distance_grad(&self, point: &Tensor<F>, target: &Tensor<F>) -> Result<Tensor<F>> {
        Ok(self
            .model
            .distance_grad(self.tokens, self.node, point, target, self.positions)?
            .0)
    }

    fn loss_grads(&self, point: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        Ok(self
            .model
            .grads_with_override(self.tokens, Some((self.node, point)), self.metrics)?
            .grads)
    }

    fn channel_labels(&self) -> Vec<String> {
        let g = self.model.graph();
        g.channels()
            .iter()
            .map(|c| format!("{}.{}", g.node(c.node), c.kind))
            .collect()
    }
}
