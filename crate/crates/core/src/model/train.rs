// SPDX-License-Identifier: MIT OR Apache-2.0

use super::forward::RunSpec;
use super::Model;
use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evaluation::MetricSpec;
use crate::tasks::TaskBatch;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Linear warmup length in steps.
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-3,
            warmup: 50,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Cross-entropy at the answer position, one entry per step.
    pub losses: Vec<f64>,
}

/// Mean negative log-likelihood of the correct ids at each example's answer
/// position. Examples with several correct ids spread their weight evenly.
pub fn cross_entropy_loss<'t, F: Float>(
    tape: &'t Tape<F>,
    logits: Var<'t, F>,
    metrics: &[MetricSpec],
) -> Result<Var<'t, F>> {
    let shape = logits.shape();
    if shape.len() != 3 || shape[0] != metrics.len() {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![metrics.len()],
        });
    }
    let (b, s, v) = (shape[0], shape[1], shape[2]);
    let mut w = Tensor::zeros(&shape);
    for (i, m) in metrics.iter().enumerate() {
        m.validate(v, s)?;
        let base = (i * s + m.position(s)) * v;
        let share = F::of(-1.0 / (b * m.correct_ids.len()) as f64);
        for &c in &m.correct_ids {
            w.data_mut()[base + c] = share;
        }
    }
    let w = tape.constant(w)?;
    logits.log_softmax()?.mul(w)?.sum()
}

/// Adam on the answer-position cross-entropy. `batches(step)` supplies the
/// training batch for each step; only its clean half is used.
pub fn train_toy<F: Float>(
    model: &mut Model<F>,
    mut batches: impl FnMut(usize) -> Result<TaskBatch>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    if config.steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "invalid learning rate {}",
            config.lr
        )));
    }
    let mut m1: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| vec![0.0; p.numel()])
        .collect();
    let mut m2 = m1.clone();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = batches(step)?;
        let grads = {
            let tape = Tape::new();
            let spec = RunSpec {
                trainable: true,
                ..RunSpec::default()
            };
            let run = model.run(&tape, &batch.clean, &spec)?;
            let loss = cross_entropy_loss(&tape, run.logits, &batch.metrics)?;
            let value = loss.value().item().as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { step, loss: value });
            }
            losses.push(value);
            let g = tape.backward(loss)?;
            run.params
                .iter()
                .map(|&p| g.get_or_zeros(p))
                .collect::<Vec<_>>()
        };
        let t = (step + 1) as i32;
        let warm = if config.warmup > 0 {
            ((step + 1) as f64 / config.warmup as f64).min(1.0)
        } else {
            1.0
        };
        let lr = config.lr * warm;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = model.param_mut(i);
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj.as_f64();
                m1[i][j] = config.beta1 * m1[i][j] + (1.0 - config.beta1) * gj;
                m2[i][j] = config.beta2 * m2[i][j] + (1.0 - config.beta2) * gj * gj;
                let update = lr * (m1[i][j] / c1) / ((m2[i][j] / c2).sqrt() + config.eps);
                *x -= F::of(update);
            }
        }
    }
    Ok(TrainReport { losses })
}

/// Share of examples whose arg-max token at the answer position is one of
/// the correct ids, on clean inputs.
pub fn answer_accuracy<F: Float>(model: &Model<F>, batch: &TaskBatch) -> Result<f64> {
    let logits = model.forward(&batch.clean)?;
    let (s, v) = (batch.clean.seq, model.config().vocab_size);
    let mut hits = 0;
    for (i, m) in batch.metrics.iter().enumerate() {
        let base = (i * s + m.position(s)) * v;
        let row = &logits.data()[base..base + v];
        let best = (0..v).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        if m.correct_ids.contains(&best) {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch.metrics.len() as f64)
}
