//! The hierarchical classifier: local attention → recurrent layer → sigmoid.
//!
//! The same type also covers the ablation variants (global attention, exact
//! softmax) and a plain recurrent baseline that reads the raw series.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sehm_autodiff::{Graph, NodeId, Tensor};

use crate::attention::{
    draw_orthogonal_features, feature_map_graph, head_graph, AttentionHead, HeadNodes, MultiHeadConfig,
    RandomFeatureMatrix,
};
use crate::error::{config_err, Result, SehmError};
use crate::recurrent::{classifier_graph, recurrent_graph, CellKind, ClassifierHead, RecurrentNodes, RecurrentParams};
use crate::rng::{self, uniform_init};

/// Query/key projections start this much smaller than the usual fan-in
/// bound: near-uniform attention keeps the positive random-feature estimate
/// low-variance early in training.
const QK_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Attention layer feeding the recurrent layer.
    Sehm,
    /// Recurrent layer directly over the raw series.
    Recurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub cell: CellKind,
    /// Number of input variables `D`.
    pub vars: usize,
    /// Neighbor size `C`.
    pub neighbor: usize,
    pub heads: usize,
    /// Random feature count `R`.
    pub features: usize,
    /// Attention output width `D_o`.
    pub out_dim: usize,
    pub hidden: usize,
    /// Windowed attention; off means one global window over the full series.
    pub locality: bool,
    /// Random-feature kernel; off means exact softmax.
    pub kernelization: bool,
    /// Missing values as zeros; off means last-observation-carried-forward.
    pub zero_encoding: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Sehm,
            cell: CellKind::Gru,
            vars: 8,
            neighbor: 30,
            heads: 2,
            features: 8,
            out_dim: 8,
            hidden: 32,
            locality: true,
            kernelization: true,
            zero_encoding: true,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vars", self.vars),
            ("neighbor", self.neighbor),
            ("heads", self.heads),
            ("features", self.features),
            ("out_dim", self.out_dim),
            ("hidden", self.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return config_err(format!("model.{name} must be positive"));
            }
        }
        Ok(())
    }

    fn is_windowed(&self) -> bool {
        self.architecture == Architecture::Sehm && self.locality
    }

    /// Series length after padding to a whole number of windows.
    pub fn padded_len(&self, t: usize) -> usize {
        if self.is_windowed() {
            t.div_ceil(self.neighbor) * self.neighbor
        } else {
            t
        }
    }

    /// Number of recurrent steps `L` for a series of length `t`.
    pub fn steps(&self, t: usize) -> usize {
        if self.is_windowed() {
            t.div_ceil(self.neighbor)
        } else {
            t
        }
    }

    /// Width of one recurrent input row.
    pub fn step_dim(&self) -> usize {
        match self.architecture {
            Architecture::Sehm => self.out_dim,
            Architecture::Recurrent => self.vars,
        }
    }

    /// Flattened latent size `D_r = L · D_o`.
    pub fn latent_dim(&self, t: usize) -> usize {
        self.steps(t) * self.step_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SehmModel {
    pub config: ModelConfig,
    pub features: Option<Arc<RandomFeatureMatrix>>,
    pub heads: Vec<AttentionHead>,
    pub projection: Option<MultiHeadConfig>,
    pub rnn: RecurrentParams,
    pub classifier: ClassifierHead,
}

/// Graph handles for every model parameter.
#[derive(Debug, Clone)]
pub(crate) struct BoundModel {
    pub heads: Vec<HeadNodes>,
    pub w_out: Option<NodeId>,
    pub omega_t: Option<NodeId>,
    pub rnn: RecurrentNodes,
    pub cls_weight: NodeId,
    pub cls_bias: NodeId,
    /// Parameter nodes in [`SehmModel::params`] order.
    pub params: Vec<NodeId>,
}

const STREAM_FEATURES: u64 = 1;
const STREAM_ATTENTION: u64 = 2;
const STREAM_RNN: u64 = 3;
const STREAM_HEAD: u64 = 4;

impl SehmModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let d = config.vars;
        let sehm = config.architecture == Architecture::Sehm;
        let features = (sehm && config.kernelization)
            .then(|| draw_orthogonal_features(d, config.features, rng::derive(seed, STREAM_FEATURES)))
            .transpose()?
            .map(Arc::new);
        let mut heads = Vec::new();
        let mut projection = None;
        if sehm {
            let mut rng = rng::seeded(rng::derive(seed, STREAM_ATTENTION));
            for _ in 0..config.heads {
                let aggregation = config
                    .locality
                    .then(|| Tensor::new(vec![config.neighbor], uniform_init(&mut rng, config.neighbor, config.neighbor)))
                    .transpose()?;
                let mut small = |n| uniform_init(&mut rng, n, d).into_iter().map(|v| v * QK_INIT_SCALE).collect();
                heads.push(AttentionHead {
                    query: Tensor::new(vec![d, d], small(d * d))?,
                    key: Tensor::new(vec![d, d], small(d * d))?,
                    aggregation,
                    features: features.clone(),
                });
            }
            let hd = config.heads * d;
            let w_out = Tensor::new(vec![hd, config.out_dim], uniform_init(&mut rng, hd * config.out_dim, hd))?;
            projection = Some(MultiHeadConfig::new(config.heads, w_out)?);
        }
        let rnn = RecurrentParams::init(config.cell, config.step_dim(), config.hidden, rng::derive(seed, STREAM_RNN))?;
        let classifier = ClassifierHead::init(config.hidden, rng::derive(seed, STREAM_HEAD))?;
        Ok(Self {
            config,
            features,
            heads,
            projection,
            rnn,
            classifier,
        })
    }

    /// All trainable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for h in &self.heads {
            out.push(&h.query);
            out.push(&h.key);
            if let Some(w) = &h.aggregation {
                out.push(w);
            }
        }
        if let Some(p) = &self.projection {
            out.push(&p.w_out);
        }
        out.extend(self.rnn.tensors());
        out.push(&self.classifier.weight);
        out.push(&self.classifier.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for h in &mut self.heads {
            out.push(&mut h.query);
            out.push(&mut h.key);
            if let Some(w) = &mut h.aggregation {
                out.push(w);
            }
        }
        if let Some(p) = &mut self.projection {
            out.push(&mut p.w_out);
        }
        out.extend(self.rnn.tensors_mut());
        out.push(&mut self.classifier.weight);
        out.push(&mut self.classifier.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Adds every parameter to `g`, as leaves when `trainable` and as
    /// constants otherwise.
    pub(crate) fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let ids: Vec<NodeId> = self
            .params()
            .into_iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        self.structure(g, ids)
    }

    /// Arranges already-created parameter nodes (in `params` order).
    pub(crate) fn structure(&self, g: &mut Graph, ids: Vec<NodeId>) -> BoundModel {
        let mut it = ids.iter().copied();
        let mut next = || it.next().expect("parameter count matches layout");
        let heads = self
            .heads
            .iter()
            .map(|h| HeadNodes {
                query: next(),
                key: next(),
                aggregation: h.aggregation.as_ref().map(|_| next()),
            })
            .collect();
        let w_out = self.projection.as_ref().map(|_| next());
        let rnn = RecurrentNodes {
            w_x: next(),
            w_h: next(),
            b_x: next(),
            b_h: next(),
        };
        let cls_weight = next();
        let cls_bias = next();
        let omega_t = self.features.as_ref().map(|f| g.constant(f.transposed()));
        BoundModel {
            heads,
            w_out,
            omega_t,
            rnn,
            cls_weight,
            cls_bias,
            params: ids,
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.config.vars {
            return config_err(format!(
                "model input has shape {s:?}, expected [B, T, {}]",
                self.config.vars
            ));
        }
        if self.config.padded_len(s[1]) != s[1] {
            return config_err(format!(
                "series length {} is not a multiple of the neighbor size {}",
                s[1], self.config.neighbor
            ));
        }
        Ok((s[0], s[1]))
    }

    /// Latent sequence `z` (`[B, L, D_o]`) for an input batch `[B, T, D]`.
    pub(crate) fn encode_graph(&self, g: &mut Graph, m: &BoundModel, x: NodeId) -> Result<NodeId> {
        let (b, t) = self.check_input(g.value(x))?;
        let cfg = &self.config;
        if cfg.architecture == Architecture::Recurrent {
            return Ok(x);
        }
        let d = cfg.vars;
        let (windows, steps) = if cfg.locality {
            let l = t / cfg.neighbor;
            (g.reshape(x, &[b * l, cfg.neighbor, d])?, l)
        } else {
            (x, t)
        };
        let mut outs = Vec::with_capacity(m.heads.len());
        for &head in &m.heads {
            let out = head_graph(g, windows, head, m.omega_t)?;
            outs.push(g.reshape(out, &[b * steps, d])?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let w_out = m.w_out.expect("attention model has an output projection");
        let z = g.matmul(cat, w_out)?;
        Ok(g.reshape(z, &[b, steps, cfg.out_dim])?)
    }

    /// Logits `[B, 1]` from a latent sequence `[B, L, step_dim]`.
    pub(crate) fn head_graph(&self, g: &mut Graph, m: &BoundModel, z: NodeId) -> Result<NodeId> {
        let h = recurrent_graph(g, self.config.cell, self.config.hidden, m.rnn, z)?;
        classifier_graph(g, m.cls_weight, m.cls_bias, h)
    }

    pub(crate) fn logits_graph(&self, g: &mut Graph, m: &BoundModel, x: NodeId) -> Result<NodeId> {
        let z = self.encode_graph(g, m, x)?;
        self.head_graph(g, m, z)
    }

    /// Latent sequences for a batch, `[B, L, step_dim]`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let xn = g.constant(x.clone());
        let z = self.encode_graph(&mut g, &m, xn)?;
        Ok(g.value(z).clone())
    }

    /// Positive-class probabilities for a batch `[B, T, D]`.
    pub fn predict_proba(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let xn = g.constant(x.clone());
        let s = self.logits_graph(&mut g, &m, xn)?;
        Ok(g.value(s).data().iter().map(|&v| sehm_autodiff::sigmoid(v)).collect())
    }

    /// Probabilities from latent sequences `[B, L, step_dim]`.
    pub fn proba_from_latent(&self, z: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let zn = g.constant(z.clone());
        let s = self.head_graph(&mut g, &m, zn)?;
        Ok(g.value(s).data().iter().map(|&v| sehm_autodiff::sigmoid(v)).collect())
    }

    /// `f(z)` and `∇_z f(z)` for every latent in the batch `[B, L, step_dim]`.
    ///
    /// Samples are independent, so the gradient of `Σ_b f_b` with respect
    /// to the batch holds each sample's own gradient.
    pub fn latent_gradient(&self, z: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let zn = g.leaf(z.clone());
        let s = self.head_graph(&mut g, &m, zn)?;
        let p = g.sigmoid(s)?;
        let total = g.sum_all(p)?;
        let grads = g.backward(total)?;
        let probs = g.value(p).data().to_vec();
        Ok((probs, grads.get_or_zeros(zn, z.shape())))
    }

    /// Mean BCE over a batch and its gradient for every parameter.
    pub fn loss_and_gradients(&self, x: &Tensor, labels: &[f64]) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, true);
        let xn = g.constant(x.clone());
        let s = self.logits_graph(&mut g, &m, xn)?;
        if labels.len() != x.shape()[0] {
            return Err(SehmError::Dimension {
                context: "labels",
                expected: x.shape()[0],
                actual: labels.len(),
            });
        }
        let y = g.constant(Tensor::new(vec![labels.len(), 1], labels.to_vec())?);
        let loss = crate::recurrent::bce_logits_graph(&mut g, s, y)?;
        let grads = g.backward(loss)?;
        let value = g.value(loss).item()?;
        let params = self.params();
        let out = m
            .params
            .iter()
            .zip(params)
            .map(|(&id, t)| grads.get_or_zeros(id, t.shape()))
            .collect();
        Ok((value, out))
    }

    /// Zeroes the recurrent input weights reading latent channel `channel`,
    /// so `f` no longer depends on that channel at any step.
    pub fn disconnect_latent_channel(&mut self, channel: usize) -> Result<()> {
        let input = self.rnn.input;
        if channel >= input {
            return Err(SehmError::Dimension {
                context: "latent channel",
                expected: input,
                actual: channel,
            });
        }
        let cols = self.rnn.w_x.shape()[1];
        self.rnn.w_x.data_mut()[channel * cols..(channel + 1) * cols].fill(0.0);
        Ok(())
    }
}

/// `φ` applied to a `[N, C, D]` batch, exposed for kernel diagnostics.
pub fn batch_feature_map(x: &Tensor, features: &RandomFeatureMatrix) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let om = g.constant(features.transposed());
    let out = feature_map_graph(&mut g, xn, om)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(arch: Architecture, locality: bool, kernelization: bool) -> ModelConfig {
        ModelConfig {
            architecture: arch,
            vars: 3,
            neighbor: 4,
            heads: 2,
            features: 6,
            out_dim: 2,
            hidden: 5,
            locality,
            kernelization,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn latent_shapes() {
        let x = Tensor::full(&[2, 12, 3], 0.3);
        for (locality, steps) in [(true, 3), (false, 12)] {
            let m = SehmModel::new(small(Architecture::Sehm, locality, true)).unwrap();
            assert_eq!(m.encode(&x).unwrap().shape(), &[2, steps, 2]);
            assert_eq!(m.config.latent_dim(12), steps * 2);
        }
        let m = SehmModel::new(small(Architecture::Recurrent, true, true)).unwrap();
        assert_eq!(m.encode(&x).unwrap().shape(), &[2, 12, 3]);
        assert!(m.heads.is_empty());
    }

    #[test]
    fn rejects_unpadded_input() {
        let m = SehmModel::new(small(Architecture::Sehm, true, true)).unwrap();
        assert!(m.predict_proba(&Tensor::zeros(&[1, 10, 3])).is_err());
    }

    #[test]
    fn params_round_trip_through_structure() {
        let m = SehmModel::new(small(Architecture::Sehm, true, false)).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, true);
        assert_eq!(b.params.len(), m.params().len());
        assert_eq!(b.heads.len(), 2);
        assert!(b.omega_t.is_none());
    }

    #[test]
    fn disconnected_channel_has_zero_gradient() {
        let mut m = SehmModel::new(small(Architecture::Sehm, true, true)).unwrap();
        m.disconnect_latent_channel(1).unwrap();
        let z = Tensor::full(&[1, 3, 2], 0.4);
        let (_, grad) = m.latent_gradient(&z).unwrap();
        for l in 0..3 {
            assert_eq!(grad.at(&[0, l, 1]), 0.0);
            assert!(grad.at(&[0, l, 0]).abs() > 0.0);
        }
    }
}
