// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task metrics on the logits at an answer position.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    LogitDiff,
    ProbDiff,
}

/// How one example is scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricSpec {
    pub kind: MetricKind,
    pub correct_ids: Vec<usize>,
    pub incorrect_ids: Vec<usize>,
    /// Sequence index that is scored; `None` means the last position.
    #[serde(default)]
    pub answer_position: Option<usize>,
}

impl MetricSpec {
    pub fn logit_diff(correct: usize, incorrect: usize) -> Self {
        Self {
            kind: MetricKind::LogitDiff,
            correct_ids: vec![correct],
            incorrect_ids: vec![incorrect],
            answer_position: None,
        }
    }

    pub fn prob_diff(correct: Vec<usize>, incorrect: Vec<usize>) -> Self {
        Self {
            kind: MetricKind::ProbDiff,
            correct_ids: correct,
            incorrect_ids: incorrect,
            answer_position: None,
        }
    }

    pub fn at_position(mut self, position: usize) -> Self {
        self.answer_position = Some(position);
        self
    }

    pub fn position(&self, seq: usize) -> usize {
        self.answer_position.unwrap_or(seq.saturating_sub(1))
    }

    /// Structural checks against a vocabulary and sequence length.
    pub fn validate(&self, vocab: usize, seq: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidMetric(m));
        if self.correct_ids.is_empty() {
            return bad("empty correct id set".into());
        }
        if self.kind == MetricKind::LogitDiff
            && (self.correct_ids.len() != 1 || self.incorrect_ids.len() != 1)
        {
            return bad("logit_diff needs exactly one correct and one incorrect id".into());
        }
        if let Some(&id) = self
            .correct_ids
            .iter()
            .chain(&self.incorrect_ids)
            .find(|&&id| id >= vocab)
        {
            return bad(format!("token id {id} outside vocabulary of size {vocab}"));
        }
        if self
            .correct_ids
            .iter()
            .any(|c| self.incorrect_ids.contains(c))
        {
            return bad("correct and incorrect id sets overlap".into());
        }
        let pos = self.position(seq);
        if seq == 0 || pos >= seq {
            return bad(format!(
                "answer position {pos} outside sequence of length {seq}"
            ));
        }
        Ok(())
    }
}

fn answer_row<'a, F: Float>(
    logits: &'a Tensor<F>,
    metric: &MetricSpec,
    example: usize,
) -> Result<&'a [F]> {
    let shape = logits.shape();
    if shape.len() != 3 || example >= shape[0] {
        return Err(Error::ShapeMismatch {
            op: "metric",
            lhs: shape.to_vec(),
            rhs: vec![example],
        });
    }
    let (seq, vocab) = (shape[1], shape[2]);
    metric.validate(vocab, seq)?;
    let pos = metric.position(seq);
    let start = (example * seq + pos) * vocab;
    Ok(&logits.data()[start..start + vocab])
}

/// `log P(correct) − log P(incorrect)`; the normalizer cancels, so this is
/// the raw logit gap.
pub fn logit_diff<F: Float>(
    logits: &Tensor<F>,
    metric: &MetricSpec,
    example: usize,
) -> Result<f64> {
    let row = answer_row(logits, metric, example)?;
    let (c, i) = (metric.correct_ids[0], metric.incorrect_ids[0]);
    Ok((row[c] - row[i]).as_f64())
}

/// `Σ P(correct) − Σ P(incorrect)` under the softmax at the answer position.
pub fn prob_diff<F: Float>(logits: &Tensor<F>, metric: &MetricSpec, example: usize) -> Result<f64> {
    let row = answer_row(logits, metric, example)?;
    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
    let exps: Vec<F> = row.iter().map(|&x| (x - max).exp()).collect();
    let total = exps.iter().fold(F::zero(), |acc, &x| acc + x);
    let mass = |ids: &[usize]| ids.iter().fold(F::zero(), |acc, &i| acc + exps[i] / total);
    Ok((mass(&metric.correct_ids) - mass(&metric.incorrect_ids)).as_f64())
}

pub fn metric_value<F: Float>(
    logits: &Tensor<F>,
    metric: &MetricSpec,
    example: usize,
) -> Result<f64> {
    match metric.kind {
        MetricKind::LogitDiff => logit_diff(logits, metric, example),
        MetricKind::ProbDiff => prob_diff(logits, metric, example),
    }
}

/// Mean metric over a batch of `[batch, seq, vocab]` logits.
pub fn mean_metric<F: Float>(logits: &Tensor<F>, metrics: &[MetricSpec]) -> Result<f64> {
    check_batch(logits.shape(), metrics)?;
    let total: f64 = metrics
        .iter()
        .enumerate()
        .map(|(i, m)| metric_value(logits, m, i))
        .sum::<Result<f64>>()?;
    Ok(total / metrics.len() as f64)
}

fn check_batch(shape: &[usize], metrics: &[MetricSpec]) -> Result<()> {
    if shape.len() != 3 || shape[0] != metrics.len() || metrics.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "metric batch",
            lhs: shape.to_vec(),
            rhs: vec![metrics.len()],
        });
    }
    for m in metrics {
        m.validate(shape[2], shape[1])?;
    }
    Ok(())
}

/// The batch-mean metric as a differentiable scalar on `tape`.
pub fn metric_loss<'t, F: Float>(
    tape: &'t Tape<F>,
    logits: Var<'t, F>,
    metrics: &[MetricSpec],
) -> Result<Var<'t, F>> {
    let shape = logits.shape();
    check_batch(&shape, metrics)?;
    let (batch, seq, vocab) = (shape[0], shape[1], shape[2]);
    let w = F::of(1.0 / batch as f64);
    let mut raw = vec![F::zero(); batch * seq * vocab];
    let mut prob = vec![F::zero(); batch * seq * vocab];
    let (mut any_raw, mut any_prob) = (false, false);
    for (b, m) in metrics.iter().enumerate() {
        let base = (b * seq + m.position(seq)) * vocab;
        let target = match m.kind {
            MetricKind::LogitDiff => {
                any_raw = true;
                &mut raw
            }
            MetricKind::ProbDiff => {
                any_prob = true;
                &mut prob
            }
        };
        for &c in &m.correct_ids {
            target[base + c] += w;
        }
        for &i in &m.incorrect_ids {
            target[base + i] -= w;
        }
    }
    let mut terms = Vec::new();
    if any_raw {
        let wv = tape.constant(Tensor::new(shape.clone(), raw)?)?;
        terms.push(logits.mul(wv)?.sum()?);
    }
    if any_prob {
        let wv = tape.constant(Tensor::new(shape.clone(), prob)?)?;
        terms.push(logits.softmax()?.mul(wv)?.sum()?);
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = total.add(*t)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[1, 1, v.len()], v).unwrap()
    }

    #[test]
    fn equal_logits_give_zero() {
        let l = logits(&[0.5, 0.5, 1.0]);
        assert_eq!(
            logit_diff(&l, &MetricSpec::logit_diff(0, 1), 0).unwrap(),
            0.0
        );
    }

    #[test]
    fn two_token_logit_diff() {
        let l = logits(&[2.0, 1.0]);
        assert_eq!(
            logit_diff(&l, &MetricSpec::logit_diff(0, 1), 0).unwrap(),
            1.0
        );
    }

    #[test]
    fn uniform_prob_diff_is_zero() {
        let l = logits(&[0.0; 4]);
        let m = MetricSpec::prob_diff(vec![0, 1], vec![2, 3]);
        assert_eq!(prob_diff(&l, &m, 0).unwrap(), 0.0);
    }

    #[test]
    fn full_vocab_prob_diff_is_one() {
        let l = logits(&[0.3, -2.0, 1.1, 0.0]);
        let m = MetricSpec::prob_diff(vec![0, 1, 2, 3], vec![]);
        assert!((prob_diff(&l, &m, 0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn prob_diff_softmax_arithmetic() {
        let l = logits(&[2f64.ln(), 0.0, 0.0, 0.0]);
        let m = MetricSpec::prob_diff(vec![0], vec![1]);
        assert!((prob_diff(&l, &m, 0).unwrap() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn out_of_vocab_id_is_an_error() {
        let l = logits(&[0.0; 4]);
        assert!(matches!(
            logit_diff(&l, &MetricSpec::logit_diff(0, 9), 0),
            Err(Error::InvalidMetric(_))
        ));
    }

    #[test]
    fn overlapping_sets_rejected() {
        assert!(MetricSpec::prob_diff(vec![1, 2], vec![2])
            .validate(4, 3)
            .is_err());
    }
}
