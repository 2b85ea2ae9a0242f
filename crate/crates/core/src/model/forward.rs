// SPDX-License-Identifier: MIT OR Apache-2.0

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{slot, Layout, Model, Tokens};
use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::evaluation::metric::metric_loss;
use crate::evaluation::MetricSpec;
use crate::graph::{ChannelKind, Circuit, ComputationalGraph};

/// Which sequence positions of the logits enter a distance objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positions {
    #[default]
    All,
    Final,
}

impl std::str::FromStr for Positions {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "all" => Ok(Positions::All),
            "final" => Ok(Positions::Final),
            other => Err(format!(
                "unknown objective positions `{other}` (expected all|final)"
            )),
        }
    }
}

/// Residual-stream contribution of every upstream node for one batch, plus
/// the logits of that run.
#[derive(Debug, Clone)]
pub struct ActivationCache<F: Float> {
    contributions: Vec<Arc<Tensor<F>>>,
    logits: Tensor<F>,
}

impl<F: Float> ActivationCache<F> {
    pub fn new(contributions: Vec<Tensor<F>>, logits: Tensor<F>) -> Self {
        Self {
            contributions: contributions.into_iter().map(Arc::new).collect(),
            logits,
        }
    }

    /// Contribution of canonical node `node`.
    pub fn get(&self, node: usize) -> Result<&Tensor<F>> {
        self.contributions
            .get(node)
            .map(|t| t.as_ref())
            .ok_or_else(|| Error::MissingCacheEntry(format!("#{node}")))
    }

    pub fn len(&self) -> usize {
        self.contributions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contributions.is_empty()
    }

    pub fn logits(&self) -> &Tensor<F> {
        &self.logits
    }

    /// Sum of all contributions in canonical order: the raw input of the
    /// logits node.
    pub fn residual_sum(&self) -> Tensor<F> {
        let mut acc = (*self.contributions[0]).clone();
        for c in &self.contributions[1..] {
            acc = acc.add(c).expect("cache tensors share a shape");
        }
        acc
    }

    fn arc(&self, node: usize) -> Arc<Tensor<F>> {
        Arc::clone(&self.contributions[node])
    }
}

/// Edges whose source activations are replaced by corrupted-run values.
#[derive(Debug, Clone)]
pub struct InterventionSpec<'a, F: Float> {
    corrupt: Vec<bool>,
    corrupted: &'a ActivationCache<F>,
}

impl<'a, F: Float> InterventionSpec<'a, F> {
    pub fn new(
        graph: &ComputationalGraph,
        edges: impl IntoIterator<Item = usize>,
        corrupted: &'a ActivationCache<F>,
    ) -> Result<Self> {
        let mut corrupt = vec![false; graph.n_edges()];
        for e in edges {
            *corrupt.get_mut(e).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "edge {e} not in graph of {} edges",
                    graph.n_edges()
                ))
            })? = true;
        }
        Ok(Self { corrupt, corrupted })
    }

    /// Corrupt everything outside `circuit`.
    pub fn from_circuit(
        graph: &ComputationalGraph,
        circuit: &Circuit,
        corrupted: &'a ActivationCache<F>,
    ) -> Self {
        Self {
            corrupt: circuit.mask(graph).into_iter().map(|keep| !keep).collect(),
            corrupted,
        }
    }

    pub fn is_corrupted(&self, edge: usize) -> bool {
        self.corrupt[edge]
    }

    pub fn n_corrupted(&self) -> usize {
        self.corrupt.iter().filter(|&&c| c).count()
    }
}

/// ∂(batch-mean metric)/∂(channel input) for every channel of the graph.
#[derive(Debug, Clone)]
pub struct ChannelGrads<F: Float> {
    pub grads: Vec<Tensor<F>>,
    /// Batch-mean metric at the evaluated point.
    pub loss: f64,
}

pub(crate) struct RunSpec<'a, F: Float> {
    pub override_node: Option<(usize, &'a Tensor<F>)>,
    pub override_grad: bool,
    pub patch: Option<&'a InterventionSpec<'a, F>>,
    pub track_channels: bool,
    pub trainable: bool,
}

impl<F: Float> Default for RunSpec<'_, F> {
    fn default() -> Self {
        Self {
            override_node: None,
            override_grad: false,
            patch: None,
            track_channels: false,
            trainable: false,
        }
    }
}

pub(crate) struct Run<'t, F: Float> {
    pub logits: Var<'t, F>,
    pub contributions: Vec<Var<'t, F>>,
    pub channel_inputs: Vec<Option<Var<'t, F>>>,
    pub params: Vec<Var<'t, F>>,
    pub override_var: Option<Var<'t, F>>,
}

impl<F: Float> Model<F> {
    pub(crate) fn run<'t>(
        &self,
        tape: &'t Tape<F>,
        tokens: &Tokens,
        spec: &RunSpec<'_, F>,
    ) -> Result<Run<'t, F>> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        let graph = &self.graph;
        let (b, s, d) = (tokens.batch, tokens.seq, cfg.d_model);
        if let Some(patch) = spec.patch {
            if patch.corrupt.len() != graph.n_edges() {
                return Err(Error::InvalidArgument(
                    "intervention built for another graph".into(),
                ));
            }
            for node in 0..graph.n_upstream() {
                let t = patch
                    .corrupted
                    .get(node)
                    .map_err(|_| Error::MissingCacheEntry(graph.node(node).to_string()))?;
                if t.shape() != [b, s, d] {
                    return Err(Error::ShapeMismatch {
                        op: "corrupted cache",
                        lhs: t.shape().to_vec(),
                        rhs: vec![b, s, d],
                    });
                }
            }
        }
        let params: Vec<Var<'t, F>> = self
            .params
            .iter()
            .map(|p| tape.leaf_arc(Arc::clone(p), spec.trainable))
            .collect::<Result<_>>()?;
        let layout: Layout = self.layout();
        let p = |i: usize| params[i];

        let mut override_var = None;
        let mut take_override = |node: usize| -> Result<Option<Var<'t, F>>> {
            match spec.override_node {
                Some((n, value)) if n == node => {
                    if value.shape() != [b, s, d] {
                        return Err(Error::ShapeMismatch {
                            op: "override",
                            lhs: value.shape().to_vec(),
                            rhs: vec![b, s, d],
                        });
                    }
                    let v = tape.leaf_arc(Arc::new(value.clone()), spec.override_grad)?;
                    override_var = Some(v);
                    Ok(Some(v))
                }
                _ => Ok(None),
            }
        };

        let mut contributions: Vec<Var<'t, F>> = Vec::with_capacity(graph.n_upstream());
        let mut resid: Vec<Var<'t, F>> = Vec::with_capacity(graph.n_upstream());
        let mut channel_inputs: Vec<Option<Var<'t, F>>> = vec![None; graph.n_channels()];

        let input = match take_override(0)? {
            Some(v) => v,
            None => {
                let emb = tape.embedding(p(Layout::EMBED), &tokens.ids, &[b, s])?;
                emb.add_broadcast(p(Layout::POS).slice(0, 0, s)?)?
            }
        };
        contributions.push(input);
        resid.push(input);

        let read = |ch: usize,
                    contributions: &[Var<'t, F>],
                    resid: &[Var<'t, F>],
                    channel_inputs: &mut Vec<Option<Var<'t, F>>>|
         -> Result<Var<'t, F>> {
            let c = graph.channel(ch);
            let edges = graph.incoming(ch);
            let patched = spec
                .patch
                .filter(|pt| pt.corrupt[edges.clone()].iter().any(|&x| x));
            let mut x = match patched {
                None => resid[c.n_sources - 1],
                Some(pt) => {
                    let mut acc: Option<Var<'t, F>> = None;
                    for (src, e) in edges.enumerate() {
                        let term = if pt.corrupt[e] {
                            tape.leaf_arc(pt.corrupted.arc(src), false)?
                        } else {
                            contributions[src]
                        };
                        acc = Some(match acc {
                            None => term,
                            Some(a) => a.add(term)?,
                        });
                    }
                    acc.expect("every channel has a source")
                }
            };
            if spec.track_channels {
                x = x.watch()?;
            }
            channel_inputs[ch] = Some(x);
            Ok(x)
        };

        let norm = |x: Var<'t, F>, (g, bias): (usize, usize)| -> Result<Var<'t, F>> {
            let x = if cfg.linear { x } else { x.layer_norm()? };
            x.mul_broadcast(p(g))?.add_broadcast(p(bias))
        };

        let uniform = if cfg.linear {
            let mut a = Tensor::zeros(&[b, s, s]);
            for bi in 0..b {
                for i in 0..s {
                    for j in 0..=i {
                        a.data_mut()[(bi * s + i) * s + j] = F::of(1.0 / (i + 1) as f64);
                    }
                }
            }
            Some(tape.constant(a)?)
        } else {
            None
        };
        let scale = F::of(1.0 / (cfg.d_head as f64).sqrt());

        for l in 0..cfg.n_layers {
            let node_base = contributions.len();
            let mut layer_out = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let node = node_base + h;
                let ins: Vec<Var<'t, F>> = [ChannelKind::Q, ChannelKind::K, ChannelKind::V]
                    .into_iter()
                    .map(|kind| {
                        read(
                            graph.head_channel(l, h, kind),
                            &contributions,
                            &resid,
                            &mut channel_inputs,
                        )
                    })
                    .collect::<Result<_>>()?;
                let out = match take_override(node)? {
                    Some(v) => v,
                    None => {
                        let proj = |x: Var<'t, F>, w: usize, bias: usize| -> Result<Var<'t, F>> {
                            norm(x, layout.ln1(l))?
                                .matmul(p(layout.head(l, h, w)))?
                                .add_broadcast(p(layout.head(l, h, bias)))
                        };
                        let v = proj(ins[2], slot::W_V, slot::B_V)?;
                        let pattern = match uniform {
                            Some(u) => u,
                            None => {
                                let q = proj(ins[0], slot::W_Q, slot::B_Q)?;
                                let k = proj(ins[1], slot::W_K, slot::B_K)?;
                                q.batch_matmul(k.transpose()?)?
                                    .scale(scale)?
                                    .causal_softmax()?
                            }
                        };
                        pattern
                            .batch_matmul(v)?
                            .matmul(p(layout.head(l, h, slot::W_O)))?
                    }
                };
                layer_out.push(out);
            }
            for out in layer_out {
                let r = resid.last().expect("input is present").add(out)?;
                contributions.push(out);
                resid.push(r);
            }

            let node = contributions.len();
            let x = read(
                graph.mlp_channel(l),
                &contributions,
                &resid,
                &mut channel_inputs,
            )?;
            let out = match take_override(node)? {
                Some(v) => v,
                None => {
                    let hidden = norm(x, (layout.mlp(l, slot::LN2_G), layout.mlp(l, slot::LN2_B)))?
                        .matmul(p(layout.mlp(l, slot::W_IN)))?
                        .add_broadcast(p(layout.mlp(l, slot::B_IN)))?;
                    let act = if cfg.linear { hidden } else { hidden.gelu()? };
                    act.matmul(p(layout.mlp(l, slot::W_OUT)))?
                        .add_broadcast(p(layout.mlp(l, slot::B_OUT)))?
                }
            };
            let r = resid.last().expect("input is present").add(out)?;
            contributions.push(out);
            resid.push(r);
        }

        let x = read(
            graph.logits_channel(),
            &contributions,
            &resid,
            &mut channel_inputs,
        )?;
        let logits = norm(x, layout.ln_f())?.matmul(p(layout.unembed()))?;
        Ok(Run {
            logits,
            contributions,
            channel_inputs,
            params,
            override_var,
        })
    }

    /// Logits `[batch, seq, vocab]`.
    pub fn forward(&self, tokens: &Tokens) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let run = self.run(&tape, tokens, &RunSpec::default())?;
        Ok((*run.logits.value()).clone())
    }

    /// Logits plus every node's residual-stream contribution.
    pub fn forward_with_cache(&self, tokens: &Tokens) -> Result<(Tensor<F>, ActivationCache<F>)> {
        let tape = Tape::new();
        let run = self.run(&tape, tokens, &RunSpec::default())?;
        let logits = (*run.logits.value()).clone();
        let cache = ActivationCache {
            contributions: run.contributions.iter().map(|v| v.value()).collect(),
            logits: logits.clone(),
        };
        Ok((logits, cache))
    }

    /// Token + position embedding, the Input node's contribution.
    pub fn input_activation(&self, tokens: &Tokens) -> Result<Tensor<F>> {
        Ok(self.forward_with_cache(tokens)?.1.get(0)?.clone())
    }

    /// Clean run where every corrupted edge carries the frozen corrupted
    /// activation of its source.
    pub fn patched_forward(
        &self,
        tokens: &Tokens,
        spec: &InterventionSpec<'_, F>,
    ) -> Result<Tensor<F>> {
        let tape = Tape::new();
        let run_spec = RunSpec {
            patch: Some(spec),
            ..RunSpec::default()
        };
        let run = self.run(&tape, tokens, &run_spec)?;
        Ok((*run.logits.value()).clone())
    }

    /// Gradient of the batch-mean metric with respect to every channel
    /// input, optionally with the Input contribution replaced.
    pub fn grads_wrt_node_inputs(
        &self,
        tokens: &Tokens,
        input_override: Option<&Tensor<F>>,
        metrics: &[MetricSpec],
    ) -> Result<ChannelGrads<F>> {
        self.grads_with_override(tokens, input_override.map(|t| (0, t)), metrics)
    }

    /// Like [`Model::grads_wrt_node_inputs`] with any upstream node's
    /// contribution replaced.
    pub fn grads_with_override(
        &self,
        tokens: &Tokens,
        node_override: Option<(usize, &Tensor<F>)>,
        metrics: &[MetricSpec],
    ) -> Result<ChannelGrads<F>> {
        self.check_override_node(node_override.map(|o| o.0))?;
        let tape = Tape::new();
        let spec = RunSpec {
            override_node: node_override,
            track_channels: true,
            ..RunSpec::default()
        };
        let run = self.run(&tape, tokens, &spec)?;
        let loss = metric_loss(&tape, run.logits, metrics)?;
        let grads = tape.backward(loss)?;
        Ok(ChannelGrads {
            grads: run
                .channel_inputs
                .iter()
                .map(|v| grads.get_or_zeros(v.expect("every channel is read")))
                .collect(),
            loss: loss.value().item().as_f64(),
        })
    }

    /// Logits with node `node`'s contribution replaced by `value`.
    pub fn output_with_override(
        &self,
        tokens: &Tokens,
        node: usize,
        value: &Tensor<F>,
    ) -> Result<Tensor<F>> {
        self.check_override_node(Some(node))?;
        let tape = Tape::new();
        let spec = RunSpec {
            override_node: Some((node, value)),
            ..RunSpec::default()
        };
        Ok((*self.run(&tape, tokens, &spec)?.logits.value()).clone())
    }

    /// `∇_value Σ ‖logits − target‖²` over the chosen positions, with node
    /// `node`'s contribution replaced by `value`. Returns the gradient and
    /// the per-example squared distance.
    pub fn distance_grad(
        &self,
        tokens: &Tokens,
        node: usize,
        value: &Tensor<F>,
        target: &Tensor<F>,
        positions: Positions,
    ) -> Result<(Tensor<F>, Vec<f64>)> {
        self.check_override_node(Some(node))?;
        let tape = Tape::checked();
        let spec = RunSpec {
            override_node: Some((node, value)),
            override_grad: true,
            ..RunSpec::default()
        };
        let run = self.run(&tape, tokens, &spec)?;
        if target.shape() != run.logits.shape().as_slice() {
            return Err(Error::ShapeMismatch {
                op: "distance target",
                lhs: target.shape().to_vec(),
                rhs: run.logits.shape(),
            });
        }
        let target = tape.constant(target.clone())?;
        let s = tokens.seq;
        let (out, tgt) = match positions {
            Positions::All => (run.logits, target),
            Positions::Final => (run.logits.slice(1, s - 1, 1)?, target.slice(1, s - 1, 1)?),
        };
        let diff = out.sub(tgt)?;
        let per_example = diff
            .value()
            .data()
            .chunks(diff.value().numel() / tokens.batch)
            .map(|c| c.iter().map(|x| x.as_f64() * x.as_f64()).sum())
            .collect();
        let dist = diff.squared_norm()?;
        let grads = tape.backward(dist)?;
        let ov = run.override_var.expect("override requested");
        Ok((grads.get_or_zeros(ov), per_example))
    }

    fn check_override_node(&self, node: Option<usize>) -> Result<()> {
        match node {
            Some(n) if n >= self.graph.n_upstream() => Err(Error::InvalidArgument(format!(
                "node {n} has no residual contribution to override"
            ))),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(layers: usize) -> Model<f64> {
        let mut cfg = ModelConfig::induction_toy(10, 6, 5);
        cfg.n_layers = layers;
        Model::new(cfg).unwrap()
    }

    fn tokens() -> Tokens {
        Tokens::from_rows(&[vec![1, 2, 3, 4, 5], vec![5, 4, 3, 2, 1]]).unwrap()
    }

    #[test]
    fn cache_has_one_entry_per_upstream_node() {
        let m = model(2);
        let (_, cache) = m.forward_with_cache(&tokens()).unwrap();
        assert_eq!(cache.len(), m.graph().n_upstream());
    }

    #[test]
    fn empty_intervention_is_bitwise_clean() {
        let m = model(2);
        let (clean, _) = m.forward_with_cache(&tokens()).unwrap();
        let corrupted_tokens =
            Tokens::from_rows(&[vec![1, 2, 3, 4, 6], vec![5, 4, 3, 2, 7]]).unwrap();
        let (_, corrupted) = m.forward_with_cache(&corrupted_tokens).unwrap();
        let spec = InterventionSpec::new(m.graph(), [], &corrupted).unwrap();
        assert_eq!(m.patched_forward(&tokens(), &spec).unwrap(), clean);
        let all = InterventionSpec::new(m.graph(), 0..m.graph().n_edges(), &corrupted).unwrap();
        assert_eq!(
            m.patched_forward(&tokens(), &all).unwrap(),
            *corrupted.logits()
        );
    }

    #[test]
    fn out_of_range_token_names_position() {
        let m = model(1);
        let t = Tokens::from_rows(&[vec![1, 2, 30]]).unwrap();
        let err = m.forward(&t).unwrap_err().to_string();
        assert!(err.contains("position 2"), "{err}");
    }

    #[test]
    fn truncated_cache_is_reported() {
        let m = model(1);
        let (_, cache) = m.forward_with_cache(&tokens()).unwrap();
        let short =
            ActivationCache::new(vec![cache.get(0).unwrap().clone()], cache.logits().clone());
        let spec = InterventionSpec::new(m.graph(), [0], &short).unwrap();
        assert!(matches!(
            m.patched_forward(&tokens(), &spec),
            Err(Error::MissingCacheEntry(_))
        ));
    }
}
