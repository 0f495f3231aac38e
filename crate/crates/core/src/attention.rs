//! Kernelized local attention over fixed-size neighborhoods.
//!
//! A series of length `T` is cut into `L = ceil(T / C)` non-overlapping
//! windows of `C` steps. Within a window, queries and keys are linear
//! projections of the (zero-encoded) raw input, values are the raw input
//! itself, and the softmax kernel `exp(q·k)` is replaced by an inner product
//! of positive random features so the window costs `O(C)` instead of
//! `O(C²)`. A learned vector `w ∈ R^C` collapses each window to one row.
//!
//! Row-vector convention throughout: `q = x · W_Q`, `k = x · W_K`.

use std::sync::Arc;

use rand::Rng as _;
use rand_distr::StandardNormal;
use sehm_autodiff::{Graph, NodeId, Tensor, DEFAULT_EXP_CLAMP};

use crate::error::{config_err, Result, SehmError};
use crate::rng;

/// A series reshaped into `windows × neighbor × vars` with its observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizedSeries {
    pub windows: usize,
    pub neighbor: usize,
    pub vars: usize,
    /// Length of the series before padding.
    pub original_len: usize,
    /// `[L, C, D]`; missing and padded cells hold exactly 0.
    pub values: Tensor,
    /// `[L, C, D]`; 1 where observed, 0 where missing or padded.
    pub mask: Tensor,
}

impl LocalizedSeries {
    /// Values of window `l` as a `C × D` row-major slice.
    pub fn window(&self, l: usize) -> &[f64] {
        let n = self.neighbor * self.vars;
        &self.values.data()[l * n..(l + 1) * n]
    }
}

/// Splits a `T × D` series into windows of `c` steps, zero-padding the tail.
///
/// `observed` is row-major `T × D`; cells with `false` are stored as 0
/// whatever `x` holds there.
pub fn localize(x: &Tensor, observed: &[bool], c: usize) -> Result<LocalizedSeries> {
    if c == 0 {
        return config_err("neighbor size must be at least 1");
    }
    if x.ndim() != 2 {
        return config_err(format!("expected a T x D series, got shape {:?}", x.shape()));
    }
    let (t, d) = (x.shape()[0], x.shape()[1]);
    if observed.len() != t * d {
        return Err(SehmError::Dimension {
            context: "observation mask",
            expected: t * d,
            actual: observed.len(),
        });
    }
    let l = t.div_ceil(c);
    let mut values = vec![0.0; l * c * d];
    let mut mask = vec![0.0; l * c * d];
    for (i, (&v, &obs)) in x.data().iter().zip(observed).enumerate() {
        if obs {
            values[i] = v;
            mask[i] = 1.0;
        }
    }
    Ok(LocalizedSeries {
        windows: l,
        neighbor: c,
        vars: d,
        original_len: t,
        values: Tensor::new(vec![l, c, d], values)?,
        mask: Tensor::new(vec![l, c, d], mask)?,
    })
}

/// Frozen projection directions `Ω` (`R × D`) for the positive random feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomFeatureMatrix {
    pub omega: Tensor,
    pub seed: u64,
}

impl RandomFeatureMatrix {
    pub fn features(&self) -> usize {
        self.omega.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.omega.shape()[1]
    }

    /// `Ωᵀ` as a `D × R` tensor, the layout used by the batched graph.
    pub fn transposed(&self) -> Tensor {
        let (r, d) = (self.features(), self.dim());
        let src = self.omega.data();
        let mut out = vec![0.0; r * d];
        for i in 0..r {
            for j in 0..d {
                out[j * r + i] = src[i * d + j];
            }
        }
        Tensor::new(vec![d, r], out).expect("transpose keeps element count")
    }
}

/// Draws `r` feature directions in blocks of at most `d` mutually orthogonal
/// rows. Each row is rescaled to the norm of an independent `N(0, I_d)` draw,
/// so marginally every row is still Gaussian.
pub fn draw_orthogonal_features(d: usize, r: usize, seed: u64) -> Result<RandomFeatureMatrix> {
    if d == 0 || r == 0 {
        return config_err(format!("feature matrix needs d >= 1 and r >= 1, got d={d}, r={r}"));
    }
    let mut rng = rng::seeded(seed);
    let mut omega = Vec::with_capacity(r * d);
    let mut remaining = r;
    while remaining > 0 {
        let rows = remaining.min(d);
        let block = orthonormal_block(&mut rng, d);
        for row in block.chunks(d).take(rows) {
            let norm = (0..d)
                .map(|_| rng.sample::<f64, _>(StandardNormal).powi(2))
                .sum::<f64>()
                .sqrt();
            omega.extend(row.iter().map(|v| v * norm));
        }
        remaining -= rows;
    }
    Ok(RandomFeatureMatrix {
        omega: Tensor::new(vec![r, d], omega)?,
        seed,
    })
}

/// `d` orthonormal rows from a Gaussian matrix (modified Gram–Schmidt, two passes).
fn orthonormal_block(rng: &mut rng::Rng, d: usize) -> Vec<f64> {
    loop {
        let mut m: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
        let mut ok = true;
        for i in 0..d {
            for _ in 0..2 {
                for j in 0..i {
                    let dot: f64 = (0..d).map(|k| m[i * d + k] * m[j * d + k]).sum();
                    for k in 0..d {
                        m[i * d + k] -= dot * m[j * d + k];
                    }
                }
            }
            let norm = (0..d).map(|k| m[i * d + k].powi(2)).sum::<f64>().sqrt();
            if norm < 1e-10 {
                ok = false;
                break;
            }
            for k in 0..d {
                m[i * d + k] /= norm;
            }
        }
        if ok {
            return m;
        }
    }
}

/// Positive random features `exp(Ω z − ‖z‖²/2) / √R`.
///
/// Exponent arguments are clamped to `±DEFAULT_EXP_CLAMP`, matching the
/// differentiable path.
pub fn feature_map(z: &[f64], features: &RandomFeatureMatrix) -> Result<Vec<f64>> {
    let d = features.dim();
    if z.len() != d {
        return Err(SehmError::Dimension {
            context: "feature map input",
            expected: d,
            actual: z.len(),
        });
    }
    if z.iter().any(|v| !v.is_finite()) {
        return config_err("feature map input is not finite");
    }
    let half_sq = 0.5 * z.iter().map(|v| v * v).sum::<f64>();
    let scale = 1.0 / (features.features() as f64).sqrt();
    Ok(features
        .omega
        .data()
        .chunks(d)
        .map(|w| {
            let arg = w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() - half_sq;
            arg.clamp(-DEFAULT_EXP_CLAMP, DEFAULT_EXP_CLAMP).exp() * scale
        })
        .collect())
}

/// One attention head. With `features` present the head uses the random
/// feature kernel; without, it falls back to exact softmax attention.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    /// `W_Q`, `D × D`.
    pub query: Tensor,
    /// `W_K`, `D × D`.
    pub key: Tensor,
    /// `w`, length `C`. `None` for global (non-local) attention.
    pub aggregation: Option<Tensor>,
    pub features: Option<Arc<RandomFeatureMatrix>>,
}

impl AttentionHead {
    pub fn vars(&self) -> usize {
        self.query.shape()[0]
    }

    fn check(&self, xl: &LocalizedSeries) -> Result<()> {
        let d = xl.vars;
        for (name, w) in [("query projection", &self.query), ("key projection", &self.key)] {
            if w.shape() != [d, d] {
                return config_err(format!("{name} has shape {:?}, expected [{d}, {d}]", w.shape()));
            }
        }
        match &self.aggregation {
            Some(w) if w.len() != xl.neighbor => Err(SehmError::Dimension {
                context: "aggregation vector",
                expected: xl.neighbor,
                actual: w.len(),
            }),
            None => config_err("local attention requires an aggregation vector"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKernel {
    RandomFeatures,
    Softmax,
}

/// Parameter nodes of one head inside a computation graph.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub query: NodeId,
    pub key: NodeId,
    pub aggregation: Option<NodeId>,
}

/// `φ(x)` for a `[N, C, D]` batch; `omega_t` is `Ωᵀ` (`D × R`).
pub fn feature_map_graph(g: &mut Graph, x: NodeId, omega_t: NodeId) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let r = g.value(omega_t).shape()[1];
    let proj = g.matmul(x, omega_t)?;
    let sq = g.square(x)?;
    let sq = g.sum(sq, 2)?;
    let sq = g.reshape(sq, &[shape[0], shape[1], 1])?;
    let half = g.scale(sq, 0.5)?;
    let arg = g.sub(proj, half)?;
    let e = g.exp(arg)?;
    Ok(g.scale(e, 1.0 / (r as f64).sqrt())?)
}

/// Attention over a `[N, C, D]` batch of windows.
///
/// Returns `[N, D]` when the head has an aggregation vector and the
/// per-position outputs `[N, C, D]` otherwise.
pub fn head_graph(
    g: &mut Graph,
    windows: NodeId,
    head: HeadNodes,
    omega_t: Option<NodeId>,
) -> Result<NodeId> {
    let q = g.matmul(windows, head.query)?;
    let k = g.matmul(windows, head.key)?;
    let attended = match omega_t {
        Some(omega_t) => {
            let fq = feature_map_graph(g, q, omega_t)?;
            let fk = feature_map_graph(g, k, omega_t)?;
            let shape = g.value(fk).shape().to_vec();
            let fk_t = g.transpose(fk, 1, 2)?;
            let kv = g.matmul(fk_t, windows)?;
            let ksum = g.sum(fk, 1)?;
            let ksum = g.reshape(ksum, &[shape[0], shape[2], 1])?;
            let num = g.matmul(fq, kv)?;
            let den = g.matmul(fq, ksum)?;
            g.div(num, den)?
        }
        None => {
            let kt = g.transpose(k, 1, 2)?;
            let logits = g.matmul(q, kt)?;
            let p = g.softmax(logits, 2)?;
            g.matmul(p, windows)?
        }
    };
    match head.aggregation {
        Some(w) => {
            let c = g.value(w).len();
            let w = g.reshape(w, &[c, 1])?;
            let weighted = g.mul(attended, w)?;
            Ok(g.sum(weighted, 1)?)
        }
        None => Ok(attended),
    }
}

fn single_head_forward(xl: &LocalizedSeries, head: &AttentionHead, kernel: AttentionKernel) -> Result<Tensor> {
    head.check(xl)?;
    let mut g = Graph::new();
    let windows = g.constant(xl.values.clone());
    let nodes = HeadNodes {
        query: g.constant(head.query.clone()),
        key: g.constant(head.key.clone()),
        aggregation: head.aggregation.clone().map(|w| g.constant(w)),
    };
    let omega_t = match kernel {
        AttentionKernel::RandomFeatures => {
            let features = head
                .features
                .as_ref()
                .ok_or_else(|| SehmError::Config("kernel attention requires a random feature matrix".into()))?;
            if features.dim() != xl.vars {
                return config_err("random feature dimension does not match the series");
            }
            Some(g.constant(features.transposed()))
        }
        AttentionKernel::Softmax => None,
    };
    let out = head_graph(&mut g, windows, nodes, omega_t)?;
    Ok(g.value(out).clone())
}

/// Random-feature local attention for one series: one `D`-vector per window.
pub fn kernel_local_attention(xl: &LocalizedSeries, head: &AttentionHead) -> Result<Tensor> {
    single_head_forward(xl, head, AttentionKernel::RandomFeatures)
}

/// Exact softmax local attention for one series; reference for the kernel path.
pub fn exact_local_attention(xl: &LocalizedSeries, head: &AttentionHead) -> Result<Tensor> {
    single_head_forward(xl, head, AttentionKernel::Softmax)
}

/// Output projection shared by all heads.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadConfig {
    pub heads: usize,
    /// `W^O`, `(H·D) × D_o`.
    pub w_out: Tensor,
}

impl MultiHeadConfig {
    pub fn new(heads: usize, w_out: Tensor) -> Result<Self> {
        if heads == 0 {
            return config_err("at least one head is required");
        }
        if w_out.ndim() != 2 || w_out.shape()[0] % heads != 0 {
            return config_err(format!(
                "output projection shape {:?} incompatible with {heads} heads",
                w_out.shape()
            ));
        }
        Ok(Self { heads, w_out })
    }

    pub fn out_dim(&self) -> usize {
        self.w_out.shape()[1]
    }
}

/// `Concat(head outputs) · W^O`.
pub fn aggregate_multi_head(head_outputs: &[Tensor], cfg: &MultiHeadConfig) -> Result<Tensor> {
    if head_outputs.len() != cfg.heads {
        return Err(SehmError::Dimension {
            context: "head outputs",
            expected: cfg.heads,
            actual: head_outputs.len(),
        });
    }
    let mut g = Graph::new();
    let parts: Vec<NodeId> = head_outputs.iter().map(|t| g.constant(t.clone())).collect();
    let cat = g.concat(&parts, 1)?;
    let w = g.constant(cfg.w_out.clone());
    let out = g.matmul(cat, w)?;
    Ok(g.value(out).clone())
}

/// Query and key projections of one `C × D` window.
fn window_projections(window: &[f64], head: &AttentionHead, d: usize) -> (Vec<f64>, Vec<f64>) {
    let c = window.len() / d;
    let mut q = vec![0.0; c * d];
    let mut k = vec![0.0; c * d];
    sehm_autodiff::matmul_into(c, d, d, window, head.query.data(), &mut q);
    sehm_autodiff::matmul_into(c, d, d, window, head.key.data(), &mut k);
    (q, k)
}

/// Contracts per-query coefficient vectors with the normalized attention of
/// one window: `out[j][d] = Σ_i coef[i][d] · P[i][j]`.
///
/// `window` and `coef` are `C × D`; the result is `C × D`. For the kernel
/// head this runs in `O(C·R·D)`.
pub(crate) fn back_project(window: &[f64], coef: &[f64], head: &AttentionHead, d: usize) -> Result<Vec<f64>> {
    let c = window.len() / d;
    let (q, k) = window_projections(window, head, d);
    let mut out = vec![0.0; c * d];
    match &head.features {
        Some(features) => {
            let r = features.features();
            let fq: Vec<Vec<f64>> = q.chunks(d).map(|v| feature_map(v, features)).collect::<Result<_>>()?;
            let fk: Vec<Vec<f64>> = k.chunks(d).map(|v| feature_map(v, features)).collect::<Result<_>>()?;
            let mut ksum = vec![0.0; r];
            for f in &fk {
                for (s, v) in ksum.iter_mut().zip(f) {
                    *s += v;
                }
            }
            // b[d] = Σ_i coef[i][d] φ(q_i) / den_i, a D × R summary.
            let mut b = vec![0.0; d * r];
            for (i, f) in fq.iter().enumerate() {
                let den: f64 = f.iter().zip(&ksum).map(|(a, s)| a * s).sum();
                for dd in 0..d {
                    let s = coef[i * d + dd] / den;
                    if s != 0.0 {
                        for (bv, fv) in b[dd * r..(dd + 1) * r].iter_mut().zip(f) {
                            *bv += s * fv;
                        }
                    }
                }
            }
            for (j, f) in fk.iter().enumerate() {
                for dd in 0..d {
                    out[j * d + dd] = b[dd * r..(dd + 1) * r].iter().zip(f).map(|(a, b)| a * b).sum();
                }
            }
        }
        None => {
            for i in 0..c {
                let qi = &q[i * d..(i + 1) * d];
                let logits: Vec<f64> = k
                    .chunks(d)
                    .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
                let total: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    let p = ej / total;
                    for dd in 0..d {
                        out[j * d + dd] += coef[i * d + dd] * p;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// `L × C` weights `Σ_i w_i κ(q_i, k_j) / Σ_j' κ(q_i, k_j')` linking each raw
/// time step of a window to that window's output row.
///
/// Contracting row `l` with the window values reproduces the head output.
/// Uses the random-feature kernel when the head has features and the
/// softmax kernel otherwise.
pub fn attention_contribution_weights(xl: &LocalizedSeries, head: &AttentionHead) -> Result<Tensor> {
    head.check(xl)?;
    let (c, d) = (xl.neighbor, xl.vars);
    let w = head.aggregation.as_ref().expect("checked above").data();
    let mut out = Vec::with_capacity(xl.windows * c);
    for l in 0..xl.windows {
        out.extend(back_project_scalar(xl.window(l), w, head, d)?);
    }
    Tensor::new(vec![xl.windows, c], out).map_err(Into::into)
}

/// [`back_project`] with one scalar coefficient per query.
fn back_project_scalar(window: &[f64], coef: &[f64], head: &AttentionHead, d: usize) -> Result<Vec<f64>> {
    let c = coef.len();
    let wide: Vec<f64> = coef.iter().flat_map(|&v| std::iter::repeat(v).take(d)).collect();
    let full = back_project(window, &wide, head, d)?;
    Ok((0..c).map(|j| full[j * d]).collect())
}
