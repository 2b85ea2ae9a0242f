// SPDX-License-Identifier: MIT OR Apache-2.0

//! Closed-form objectives for checking path and saturation behaviour.

use super::PathObjective;
use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};

/// Elementwise scalar function `f` with derivative `df`. Points have shape
/// `[examples, features]`; the output is `f` applied to every feature and
/// the loss is the batch mean of `Σ f`.
pub struct ScalarFn {
    f: Box<dyn Fn(f64) -> f64 + Send + Sync>,
    df: Box<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl ScalarFn {
    pub fn new(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            f: Box::new(f),
            df: Box::new(df),
        }
    }

    /// `σ(steepness · (x − center))`: flat far from `center`.
    pub fn sigmoid(steepness: f64, center: f64) -> Self {
        let s = move |x: f64| 1.0 / (1.0 + (-steepness * (x - center)).exp());
        Self::new(s, move |x| steepness * s(x) * (1.0 - s(x)))
    }

    pub fn square() -> Self {
        Self::new(|x| x * x, |x| 2.0 * x)
    }

    fn examples(point: &Tensor<impl Float>) -> Result<usize> {
        match point.shape() {
            [b, _] => Ok(*b),
            s => Err(Error::ShapeMismatch {
                op: "scalar objective",
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }
}

impl<F: Float> PathObjective<F> for ScalarFn {
    fn output(&self, point: &Tensor<F>) -> Result<Tensor<F>> {
        Self::examples(point)?;
        Ok(point.map(|x| F::of((self.f)(x.as_f64()))))
    }

    fn distance_grad(&self, point: &Tensor<F>, target: &Tensor<F>) -> Result<Tensor<F>> {
        let out = self.output(point)?;
        let two = F::of(2.0);
        let g = out.zip_map(target, "distance", |o, t| two * (o - t))?;
        g.zip_map(point, "distance", |gi, x| gi * F::of((self.df)(x.as_f64())))
    }

    fn loss_grads(&self, point: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let b = Self::examples(point)? as f64;
        Ok(vec![point.map(|x| F::of((self.df)(x.as_f64()) / b))])
    }

    fn channel_labels(&self) -> Vec<String> {
        vec!["x".into()]
    }
}

/// `G(γ) = W γ` per example with a linear loss `a · γ`.
pub struct LinearMap<F: Float> {
    /// `[m, n]`
    pub w: Tensor<F>,
    /// `[n]`
    pub a: Tensor<F>,
}

impl<F: Float> LinearMap<F> {
    fn check(&self, point: &Tensor<F>) -> Result<(usize, usize, usize)> {
        let (m, n) = (self.w.shape()[0], self.w.shape()[1]);
        match point.shape() {
            &[b, k] if k == n && self.a.numel() == n => Ok((b, m, n)),
            s => Err(Error::ShapeMismatch {
                op: "linear objective",
                lhs: s.to_vec(),
                rhs: self.w.shape().to_vec(),
            }),
        }
    }
}

impl<F: Float> PathObjective<F> for LinearMap<F> {
    fn output(&self, point: &Tensor<F>) -> Result<Tensor<F>> {
        let (b, m, n) = self.check(point)?;
        let (w, p) = (self.w.data(), point.data());
        Ok(Tensor::from_fn(&[b, m], |idx| {
            let (e, i) = (idx / m, idx % m);
            (0..n).fold(F::zero(), |acc, j| acc + w[i * n + j] * p[e * n + j])
        }))
    }

    fn distance_grad(&self, point: &Tensor<F>, target: &Tensor<F>) -> Result<Tensor<F>> {
        let (b, m, n) = self.check(point)?;
        let r = self.output(point)?.sub(target)?;
        let (w, r) = (self.w.data(), r.data());
        Ok(Tensor::from_fn(&[b, n], |idx| {
            let (e, j) = (idx / n, idx % n);
            F::of(2.0) * (0..m).fold(F::zero(), |acc, i| acc + w[i * n + j] * r[e * m + i])
        }))
    }

    fn loss_grads(&self, point: &Tensor<F>) -> Result<Vec<Tensor<F>>> {
        let (b, _, n) = self.check(point)?;
        let scale = F::of(1.0 / b as f64);
        Ok(vec![Tensor::from_fn(&[b, n], |idx| {
            self.a.data()[idx % n] * scale
        })])
    }

    fn channel_labels(&self) -> Vec<String> {
        vec!["x".into()]
    }
}
