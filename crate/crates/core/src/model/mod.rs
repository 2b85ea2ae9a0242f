// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tiny pre-norm decoder-only transformer.
//!
//! Every attention head and MLP is a node of the edge-level graph: its
//! output is written into the residual stream, and each of its input
//! channels (Q/K/V for heads, the MLP input, the logits input) reads the
//! raw sum of upstream contributions. Layer norms live inside the node that
//! consumes the sum. This makes three kinds of forward pass cheap to
//! express:
//!
//! - cached runs that record every node's contribution,
//! - patched runs where selected edges carry frozen corrupted-run values,
//! - gradient runs that return ∂metric/∂(channel input) for every channel.

mod checkpoint;
mod config;
mod forward;
mod train;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Float, Tensor};
use crate::error::{Error, Result};
use crate::graph::ComputationalGraph;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use config::{ModelConfig, NormPlacement};
pub use forward::{ActivationCache, ChannelGrads, InterventionSpec, Positions};
pub use train::{answer_accuracy, cross_entropy_loss, train_toy, TrainConfig, TrainReport};

/// Integer token ids, `[batch, seq]` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokens {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<usize>,
}

impl Tokens {
    pub fn new(batch: usize, seq: usize, ids: Vec<usize>) -> Result<Self> {
        if ids.len() != batch * seq {
            return Err(Error::ShapeMismatch {
                op: "tokens",
                lhs: vec![batch, seq],
                rhs: vec![ids.len()],
            });
        }
        Ok(Self { batch, seq, ids })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::InvalidTask("ragged token rows".into()));
        }
        Self::new(rows.len(), seq, rows.concat())
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.seq..(i + 1) * self.seq]
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.batch).map(|i| self.row(i).to_vec()).collect()
    }
}

pub(crate) const PER_HEAD: usize = 7;
const PER_LAYER_FIXED: usize = 8;

/// Index arithmetic over the flat parameter list.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    n_layers: usize,
    n_heads: usize,
}

pub(crate) mod slot {
    pub const W_Q: usize = 0;
    pub const B_Q: usize = 1;
    pub const W_K: usize = 2;
    pub const B_K: usize = 3;
    pub const W_V: usize = 4;
    pub const B_V: usize = 5;
    pub const W_O: usize = 6;

    pub const LN2_G: usize = 0;
    pub const LN2_B: usize = 1;
    pub const W_IN: usize = 2;
    pub const B_IN: usize = 3;
    pub const W_OUT: usize = 4;
    pub const B_OUT: usize = 5;
}

impl Layout {
    pub const EMBED: usize = 0;
    pub const POS: usize = 1;

    fn layer_base(&self, layer: usize) -> usize {
        2 + layer * (PER_LAYER_FIXED + PER_HEAD * self.n_heads)
    }

    pub fn ln1(&self, layer: usize) -> (usize, usize) {
        let b = self.layer_base(layer);
        (b, b + 1)
    }

    pub fn head(&self, layer: usize, head: usize, slot: usize) -> usize {
        self.layer_base(layer) + 2 + PER_HEAD * head + slot
    }

    pub fn mlp(&self, layer: usize, slot: usize) -> usize {
        self.layer_base(layer) + 2 + PER_HEAD * self.n_heads + slot
    }

    pub fn ln_f(&self) -> (usize, usize) {
        let b = self.layer_base(self.n_layers);
        (b, b + 1)
    }

    pub fn unembed(&self) -> usize {
        self.layer_base(self.n_layers) + 2
    }

    #[cfg(test)]
    pub fn len(&self) -> usize {
        self.unembed() + 1
    }
}

/// Parameter names and shapes in storage order.
pub fn parameter_manifest(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, dh, dm, v) = (
        config.d_model,
        config.d_head,
        config.d_mlp,
        config.vocab_size,
    );
    let mut out = vec![
        ("embed".to_string(), vec![v, d]),
        ("pos_embed".to_string(), vec![config.max_seq_len, d]),
    ];
    for l in 0..config.n_layers {
        out.push((format!("blocks.{l}.ln1.g"), vec![d]));
        out.push((format!("blocks.{l}.ln1.b"), vec![d]));
        for h in 0..config.n_heads {
            let p = format!("blocks.{l}.attn.{h}");
            out.push((format!("{p}.w_q"), vec![d, dh]));
            out.push((format!("{p}.b_q"), vec![dh]));
            out.push((format!("{p}.w_k"), vec![d, dh]));
            out.push((format!("{p}.b_k"), vec![dh]));
            out.push((format!("{p}.w_v"), vec![d, dh]));
            out.push((format!("{p}.b_v"), vec![dh]));
            out.push((format!("{p}.w_o"), vec![dh, d]));
        }
        out.push((format!("blocks.{l}.ln2.g"), vec![d]));
        out.push((format!("blocks.{l}.ln2.b"), vec![d]));
        out.push((format!("blocks.{l}.mlp.w_in"), vec![d, dm]));
        out.push((format!("blocks.{l}.mlp.b_in"), vec![dm]));
        out.push((format!("blocks.{l}.mlp.w_out"), vec![dm, d]));
        out.push((format!("blocks.{l}.mlp.b_out"), vec![d]));
    }
    out.push(("ln_f.g".to_string(), vec![d]));
    out.push(("ln_f.b".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![d, v]));
    out
}

/// A transformer with immutable-by-default parameters.
#[derive(Debug, Clone)]
pub struct Model<F: Float> {
    config: ModelConfig,
    graph: ComputationalGraph,
    params: Vec<Arc<Tensor<F>>>,
}

impl<F: Float> Model<F> {
    /// Random initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(crate::split_seed(config.seed, "init"));
        let params = parameter_manifest(&config)
            .into_iter()
            .map(|(name, shape)| {
                let std = if name.contains("embed") && name != "unembed" {
                    0.5
                } else if name.ends_with(".g") {
                    return Tensor::full(&shape, F::one());
                } else if shape.len() == 1 {
                    return Tensor::zeros(&shape);
                } else {
                    1.0 / (shape[0] as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn(&shape, |_| F::of(normal.sample(&mut rng)))
            })
            .map(Arc::new)
            .collect();
        Ok(Self::from_parts(config, params))
    }

    fn from_parts(config: ModelConfig, params: Vec<Arc<Tensor<F>>>) -> Self {
        let graph = ComputationalGraph::new(config.n_layers, config.n_heads);
        Self {
            config,
            graph,
            params,
        }
    }

    /// Build from explicit parameter tensors in manifest order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let manifest = parameter_manifest(&config);
        if manifest.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                manifest.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in manifest.iter().zip(&params) {
            if t.shape() != shape.as_slice() {
                return Err(Error::InvalidConfig(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self::from_parts(
            config,
            params.into_iter().map(Arc::new).collect(),
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &ComputationalGraph {
        &self.graph
    }

    pub fn params(&self) -> &[Arc<Tensor<F>>] {
        &self.params
    }

    pub fn param_mut(&mut self, index: usize) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.params[index])
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout {
            n_layers: self.config.n_layers,
            n_heads: self.config.n_heads,
        }
    }

    /// Same weights at another precision.
    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            graph: self.graph.clone(),
            params: self.params.iter().map(|p| Arc::new(p.cast())).collect(),
        }
    }

    /// Copy with every parameter replaced by `f(name, tensor)`.
    pub fn map_params(&self, mut f: impl FnMut(&str, &Tensor<F>) -> Tensor<F>) -> Self {
        let manifest = parameter_manifest(&self.config);
        let params = manifest
            .iter()
            .zip(&self.params)
            .map(|((name, _), t)| Arc::new(f(name, t)))
            .collect();
        Self {
            config: self.config.clone(),
            graph: self.graph.clone(),
            params,
        }
    }

    pub(crate) fn check_tokens(&self, tokens: &Tokens) -> Result<()> {
        if tokens.seq > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.seq,
                max: self.config.max_seq_len,
            });
        }
        if tokens.batch == 0 || tokens.seq == 0 {
            return Err(Error::InvalidTask("empty token batch".into()));
        }
        for (i, &t) in tokens.ids.iter().enumerate() {
            if t >= self.config.vocab_size {
                return Err(Error::TokenOutOfRange {
                    row: i / tokens.seq,
                    col: i % tokens.seq,
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_manifest() {
        let cfg = ModelConfig {
            n_layers: 2,
            n_heads: 3,
            d_model: 12,
            d_head: 4,
            d_mlp: 8,
            vocab_size: 10,
            max_seq_len: 6,
            norm_placement: NormPlacement::PreNorm,
            seed: 1,
            linear: false,
        };
        let m = parameter_manifest(&cfg);
        let layout = Layout {
            n_layers: 2,
            n_heads: 3,
        };
        assert_eq!(layout.len(), m.len());
        assert_eq!(m[layout.head(1, 2, slot::W_O)].0, "blocks.1.attn.2.w_o");
        assert_eq!(m[layout.mlp(0, slot::B_OUT)].0, "blocks.0.mlp.b_out");
        assert_eq!(m[layout.ln1(1).0].0, "blocks.1.ln1.g");
        assert_eq!(m[layout.ln_f().1].0, "ln_f.b");
        assert_eq!(m[layout.unembed()].0, "unembed");
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::induction_toy(12, 8, 3);
        let a = Model::<f32>::new(cfg.clone()).unwrap();
        let b = Model::<f32>::new(cfg).unwrap();
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x == y));
    }
}
