//! Self-explaining linear surrogate `g(z) = θ(z)ᵀz` and its training objective.
//!
//! `θ` is a small MLP with 1-Lipschitz activations. It is fitted so that
//! `θ(z') ≈ ∇f(z')` on points sampled around each center, while a penalty
//! on the product of layer spectral norms — an upper bound on the
//! Jacobian term — keeps `θ` locally stable.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sehm_autodiff::{adam_step, AdamConfig, AdamState, Graph, NodeId, Tensor};

use crate::attention::{back_project, localize, LocalizedSeries, MultiHeadConfig};
use crate::error::{config_err, Result, SehmError};
use crate::model::{Architecture, SehmModel};
use crate::rng::{self, uniform_init};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        Ok(match self {
            Activation::Relu => g.relu(x)?,
            Activation::Tanh => g.tanh(x)?,
            Activation::Sigmoid => g.sigmoid(x)?,
            Activation::Softplus => g.softplus(x)?,
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = SehmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softplus" => Ok(Activation::Softplus),
            other => config_err(format!("unknown activation '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// MLP producing the coefficients `θ(z)`; every hidden layer is followed by
/// `activation`, the last layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaNetwork {
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
}

impl ThetaNetwork {
    /// `depth` affine layers mapping `dim → hidden → … → dim`.
    pub fn new(dim: usize, depth: usize, hidden: usize, activation: Activation, seed: u64) -> Result<Self> {
        if dim == 0 || depth == 0 || hidden == 0 {
            return config_err("theta network needs positive dimension, depth and width");
        }
        let mut rng = rng::seeded(seed);
        let mut layers = Vec::with_capacity(depth);
        for k in 0..depth {
            let fan_in = if k == 0 { dim } else { hidden };
            let fan_out = if k + 1 == depth { dim } else { hidden };
            layers.push(DenseLayer {
                weight: Tensor::new(vec![fan_in, fan_out], uniform_init(&mut rng, fan_in * fan_out, fan_in))?,
                bias: Tensor::new(vec![fan_out], uniform_init(&mut rng, fan_out, fan_in))?,
            });
        }
        Ok(Self { layers, activation })
    }

    pub fn from_layers(layers: Vec<DenseLayer>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return config_err("theta network needs at least one layer");
        }
        for pair in layers.windows(2) {
            if pair[0].weight.shape()[1] != pair[1].weight.shape()[0] {
                return config_err("theta network layer widths do not chain");
            }
        }
        for l in &layers {
            if l.weight.ndim() != 2 || l.bias.len() != l.weight.shape()[1] {
                return config_err("theta network layer has inconsistent bias");
            }
        }
        let (first, last) = (&layers[0].weight, &layers[layers.len() - 1].weight);
        if first.shape()[0] != last.shape()[1] {
            return config_err("theta network must map D_r back to D_r");
        }
        Ok(Self { layers, activation })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    /// Forward pass on `[N, D_r]`; `params` alternate weight and bias nodes.
    pub fn forward_graph(&self, g: &mut Graph, params: &[NodeId], z: NodeId) -> Result<NodeId> {
        let mut h = z;
        let k = self.layers.len();
        for (i, pair) in params.chunks(2).enumerate() {
            let lin = g.matmul(h, pair[0])?;
            h = g.add(lin, pair[1])?;
            if i + 1 < k {
                h = self.activation.apply(g, h)?;
            }
        }
        Ok(h)
    }
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(SehmError::Dimension { context, expected, actual });
    }
    Ok(())
}

/// `θ` for each row of a `[N, D_r]` batch.
pub fn theta_forward_batch(z: &Tensor, net: &ThetaNetwork) -> Result<Tensor> {
    if z.ndim() != 2 {
        return config_err(format!("theta input must be [N, D_r], got {:?}", z.shape()));
    }
    check_len("theta input", net.dim(), z.shape()[1])?;
    let mut g = Graph::new();
    let params: Vec<NodeId> = net.params().into_iter().map(|t| g.constant(t.clone())).collect();
    let zn = g.constant(z.clone());
    let out = net.forward_graph(&mut g, &params, zn)?;
    Ok(g.value(out).clone())
}

pub fn theta_forward(z: &[f64], net: &ThetaNetwork) -> Result<Vec<f64>> {
    let t = theta_forward_batch(&Tensor::new(vec![1, z.len()], z.to_vec())?, net)?;
    Ok(t.into_data())
}

/// `g(z) = θ · z`.
pub fn g_approx(z: &[f64], theta: &[f64]) -> Result<f64> {
    check_len("g(z) coefficients", z.len(), theta.len())?;
    Ok(z.iter().zip(theta).map(|(a, b)| a * b).sum())
}

/// A model whose probability `f` can be differentiated with respect to a
/// flattened latent `z`.
pub trait LatentModel {
    /// `f` and `∇f` for every row of `[N, D_r]`.
    fn probability_and_gradient(&self, z: &Tensor) -> Result<(Vec<f64>, Tensor)>;

    /// `f` alone for every row of `[N, D_r]`.
    fn probability(&self, z: &Tensor) -> Result<Vec<f64>> {
        Ok(self.probability_and_gradient(z)?.0)
    }
}

impl LatentModel for SehmModel {
    fn probability_and_gradient(&self, z: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        let (n, dr) = (z.shape()[0], z.shape()[1]);
        let step = self.config.step_dim();
        if dr % step != 0 {
            return config_err(format!("latent width {dr} is not a multiple of {step}"));
        }
        let (p, grad) = self.latent_gradient(&z.reshape(&[n, dr / step, step])?)?;
        Ok((p, grad.reshape(&[n, dr])?))
    }

    fn probability(&self, z: &Tensor) -> Result<Vec<f64>> {
        let (n, dr) = (z.shape()[0], z.shape()[1]);
        let step = self.config.step_dim();
        self.proba_from_latent(&z.reshape(&[n, dr / step, step])?)
    }
}

/// `∇_z f(z)` for one flattened latent.
pub fn grad_f(model: &impl LatentModel, z: &[f64]) -> Result<Vec<f64>> {
    let (_, g) = model.probability_and_gradient(&Tensor::new(vec![1, z.len()], z.to_vec())?)?;
    Ok(g.into_data())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralNorm {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Unit vector in the row space (`W v / σ`).
    pub left: Vec<f64>,
    /// Unit right singular vector estimate.
    pub right: Vec<f64>,
}

const SPECTRAL_SEED: u64 = 0x5EED_0F_5EC7;

/// Largest singular value of a 2-D `w` by power iteration on `WᵀW` from a
/// fixed seeded start vector.
pub fn spectral_norm(w: &Tensor, max_iters: usize, tol: f64) -> Result<SpectralNorm> {
    let cols = w.shape().get(1).copied().unwrap_or(1);
    let mut rng = rng::seeded(SPECTRAL_SEED);
    let start: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
    spectral_norm_from(w, &start, max_iters, tol)
}

/// [`spectral_norm`] from a caller-supplied start vector (warm start).
pub fn spectral_norm_from(w: &Tensor, start: &[f64], max_iters: usize, tol: f64) -> Result<SpectralNorm> {
    if w.ndim() != 2 {
        return config_err(format!("spectral norm needs a matrix, got shape {:?}", w.shape()));
    }
    if max_iters == 0 {
        return config_err("spectral norm needs max_iters >= 1");
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    check_len("spectral norm start vector", cols, start.len())?;
    let a = w.data();
    let mut v = start.to_vec();
    if normalize(&mut v) == 0.0 {
        v = vec![1.0 / (cols as f64).sqrt(); cols];
    }
    let mut u = vec![0.0; rows];
    let mut prev = f64::NAN;
    for it in 1..=max_iters {
        sehm_autodiff::matmul_into(rows, cols, 1, a, &v, &mut u);
        let sigma = normalize(&mut u);
        if sigma == 0.0 {
            return Ok(SpectralNorm {
                value: 0.0,
                converged: true,
                iterations: it,
                left: u,
                right: v,
            });
        }
        if (sigma - prev).abs() < tol {
            return Ok(SpectralNorm {
                value: sigma,
                converged: true,
                iterations: it,
                left: u,
                right: v,
            });
        }
        prev = sigma;
        // v ← Wᵀu / ‖Wᵀu‖
        for (j, vj) in v.iter_mut().enumerate() {
            *vj = (0..rows).map(|i| a[i * cols + j] * u[i]).sum();
        }
        normalize(&mut v);
    }
    log::warn!("spectral norm did not converge in {max_iters} iterations");
    Ok(SpectralNorm {
        value: prev,
        converged: false,
        iterations: max_iters,
        left: u,
        right: v,
    })
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub const SPECTRAL_MAX_ITERS: usize = 20_000;
pub const SPECTRAL_TOL: f64 = 1e-12;

/// `Π_k ‖W_k‖₂`, a global Lipschitz constant of `θ`.
pub fn lipschitz_certificate(net: &ThetaNetwork) -> Result<f64> {
    net.layers.iter().try_fold(1.0, |acc, l| {
        Ok(acc * spectral_norm(&l.weight, SPECTRAL_MAX_ITERS, SPECTRAL_TOL)?.value)
    })
}

/// How the `J` factor in the gradient-matching term is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum JacobianReading {
    /// `‖θ(z) − ∇f(z)‖₂`
    #[default]
    Identity,
    /// `‖(Σ_i θ_i) 1 − ∇f(z)‖₂`
    AllOnes,
}

impl std::str::FromStr for JacobianReading {
    type Err = SehmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(JacobianReading::Identity),
            "all-ones" => Ok(JacobianReading::AllOnes),
            other => config_err(format!("unknown jacobian reading '{other}' (identity or all-ones)")),
        }
    }
}

fn fit_residual(theta: &[f64], target: &[f64], reading: JacobianReading) -> f64 {
    let total: f64 = theta.iter().sum();
    theta
        .iter()
        .zip(target)
        .map(|(&t, &g)| {
            let lhs = match reading {
                JacobianReading::Identity => t,
                JacobianReading::AllOnes => total,
            };
            (lhs - g).powi(2)
        })
        .sum::<f64>()
        .sqrt()
}

/// Jacobian `∂θ_i/∂z_j` (`D_r × D_r`) by one reverse pass per output.
pub fn theta_jacobian(z: &[f64], net: &ThetaNetwork) -> Result<Tensor> {
    let d = net.dim();
    check_len("theta input", d, z.len())?;
    let mut g = Graph::new();
    let params: Vec<NodeId> = net.params().into_iter().map(|t| g.constant(t.clone())).collect();
    let zn = g.leaf(Tensor::new(vec![1, d], z.to_vec())?);
    let out = net.forward_graph(&mut g, &params, zn)?;
    let mut jac = Vec::with_capacity(d * d);
    for i in 0..d {
        let oi = g.slice(out, 1, i, 1)?;
        let oi = g.sum_all(oi)?;
        let grads = g.backward(oi)?;
        jac.extend_from_slice(grads.get_or_zeros(zn, &[1, d]).data());
    }
    Ok(Tensor::new(vec![d, d], jac)?)
}

/// Induced matrix 1-norm: largest absolute column sum.
pub fn induced_one_norm(m: &Tensor) -> f64 {
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    (0..cols)
        .map(|j| (0..rows).map(|i| m.data()[i * cols + j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Explanation loss with the Jacobian term evaluated in full:
/// `‖θ(z)J − ∇f‖₂ + λ ‖∂θ/∂z‖₁` (induced 1-norm).
pub fn exact_explanation_loss_with_gradient(
    z: &[f64],
    net: &ThetaNetwork,
    grad: &[f64],
    lambda: f64,
    reading: JacobianReading,
) -> Result<f64> {
    check_len("target gradient", z.len(), grad.len())?;
    let theta = theta_forward(z, net)?;
    let fit = fit_residual(&theta, grad, reading);
    if lambda == 0.0 {
        return Ok(fit);
    }
    Ok(fit + lambda * induced_one_norm(&theta_jacobian(z, net)?))
}

pub fn exact_explanation_loss(
    z: &[f64],
    net: &ThetaNetwork,
    model: &impl LatentModel,
    lambda: f64,
    reading: JacobianReading,
) -> Result<f64> {
    exact_explanation_loss_with_gradient(z, net, &grad_f(model, z)?, lambda, reading)
}

/// Upper bound of the exact loss: the Jacobian term is replaced by
/// `λ √D_r Π ‖W_k‖₂`.
pub fn surrogate_loss_with_gradient(
    z: &[f64],
    net: &ThetaNetwork,
    grad: &[f64],
    lambda: f64,
    reading: JacobianReading,
) -> Result<f64> {
    check_len("target gradient", z.len(), grad.len())?;
    let theta = theta_forward(z, net)?;
    let fit = fit_residual(&theta, grad, reading);
    Ok(fit + lambda * (z.len() as f64).sqrt() * lipschitz_certificate(net)?)
}

pub fn surrogate_loss(
    z: &[f64],
    net: &ThetaNetwork,
    model: &impl LatentModel,
    lambda: f64,
    reading: JacobianReading,
) -> Result<f64> {
    surrogate_loss_with_gradient(z, net, &grad_f(model, z)?, lambda, reading)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSet {
    pub center: Vec<f64>,
    pub radius: f64,
    pub count: usize,
    pub seed: u64,
    pub points: Vec<Vec<f64>>,
}

/// `n` points uniform in the Euclidean ball of radius `delta` around `z`.
pub fn sample_perturbations(z: &[f64], delta: f64, n: usize, seed: u64) -> Result<PerturbationSet> {
    if !(delta >= 0.0) || n == 0 {
        return config_err(format!("perturbations need delta >= 0 and n >= 1, got {delta}, {n}"));
    }
    let d = z.len();
    let mut rng = rng::seeded(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut dir: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        while normalize(&mut dir) == 0.0 {
            dir = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        }
        let u: f64 = rng.random();
        let r = delta * u.powf(1.0 / d as f64);
        points.push(z.iter().zip(&dir).map(|(c, v)| c + r * v).collect());
    }
    Ok(PerturbationSet {
        center: z.to_vec(),
        radius: delta,
        count: n,
        seed,
        points,
    })
}

/// Sum of surrogate losses over `points` plus `λ_r` times the L1 norm of all
/// network parameters.
pub fn explanation_objective_with_gradients(
    points: &[Vec<f64>],
    grads: &[Vec<f64>],
    net: &ThetaNetwork,
    lambda: f64,
    lambda_r: f64,
    reading: JacobianReading,
) -> Result<f64> {
    check_len("gradient targets", points.len(), grads.len())?;
    let mut total = 0.0;
    for (p, g) in points.iter().zip(grads) {
        total += surrogate_loss_with_gradient(p, net, g, lambda, reading)?;
    }
    let l1: f64 = net.params().iter().flat_map(|t| t.data()).map(|v| v.abs()).sum();
    Ok(total + lambda_r * l1)
}

pub fn explanation_objective(
    set: &PerturbationSet,
    net: &ThetaNetwork,
    model: &impl LatentModel,
    lambda: f64,
    lambda_r: f64,
    reading: JacobianReading,
) -> Result<f64> {
    let (_, grads) = model.probability_and_gradient(&rows_to_tensor(&set.points)?)?;
    let d = set.center.len();
    let grads: Vec<Vec<f64>> = grads.data().chunks(d).map(<[f64]>::to_vec).collect();
    explanation_objective_with_gradients(&set.points, &grads, net, lambda, lambda_r, reading)
}

pub(crate) fn rows_to_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, Vec::len);
    let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::new(vec![rows.len(), d], data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainerConfig {
    pub lambda: f64,
    pub lambda_r: f64,
    /// Perturbation radius as a fraction of `‖z‖₂`.
    pub delta_frac: f64,
    pub perturbations: usize,
    pub depth: usize,
    /// Hidden width; 0 means `D_r`.
    pub hidden: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    /// Optimizer steps for post-hoc training.
    pub steps: usize,
    /// Points per optimizer step for post-hoc training.
    pub batch_points: usize,
    pub jacobian: JacobianReading,
    pub seed: u64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lambda_r: 1e-4,
            delta_frac: 0.1,
            perturbations: 25,
            depth: 2,
            hidden: 0,
            activation: Activation::Relu,
            learning_rate: 1e-2,
            steps: 1500,
            batch_points: 250,
            jacobian: JacobianReading::Identity,
            seed: 11,
        }
    }
}

impl ExplainerConfig {
    pub fn build_network(&self, dim: usize) -> Result<ThetaNetwork> {
        let hidden = if self.hidden == 0 { dim } else { self.hidden };
        ThetaNetwork::new(dim, self.depth, hidden, self.activation, self.seed)
    }
}

/// Adam state plus warm-started power-iteration vectors for one network.
#[derive(Debug, Clone)]
pub struct ExplainerTrainer {
    pub config: ExplainerConfig,
    adam: AdamState,
    warm: Vec<Vec<f64>>,
}

impl ExplainerTrainer {
    pub fn new(net: &ThetaNetwork, config: ExplainerConfig) -> Result<Self> {
        let adam = AdamState::new(net.params(), AdamConfig::new(config.learning_rate))?;
        let mut rng = rng::seeded(SPECTRAL_SEED);
        let warm = net
            .layers
            .iter()
            .map(|l| (0..l.weight.shape()[1]).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        Ok(Self { config, adam, warm })
    }

    pub fn set_learning_rate(&mut self, learning_rate: f64) -> Result<()> {
        Ok(self.adam.set_learning_rate(learning_rate)?)
    }

    /// One Adam step on the objective over `points` (`[P, D_r]`) with
    /// gradient targets `targets` (`[P, D_r]`). Returns the objective value
    /// before the step.
    pub fn step(&mut self, net: &mut ThetaNetwork, points: &Tensor, targets: &Tensor) -> Result<f64> {
        let cfg = self.config;
        let (p, d) = (points.shape()[0], points.shape()[1]);
        check_len("theta input", net.dim(), d)?;
        let mut norms = Vec::with_capacity(net.layers.len());
        for (layer, warm) in net.layers.iter().zip(&mut self.warm) {
            let s = spectral_norm_from(&layer.weight, warm, 200, 1e-10)?;
            warm.clone_from(&s.right);
            norms.push(s);
        }
        let mut g = Graph::new();
        let params: Vec<NodeId> = net.params().into_iter().map(|t| g.leaf(t.clone())).collect();
        let zn = g.constant(points.clone());
        let tn = g.constant(targets.clone());
        let theta = net.forward_graph(&mut g, &params, zn)?;
        let lhs = match cfg.jacobian {
            JacobianReading::Identity => theta,
            JacobianReading::AllOnes => {
                let s = g.sum(theta, 1)?;
                g.reshape(s, &[p, 1])?
            }
        };
        let diff = g.sub(lhs, tn)?;
        let sq = g.square(diff)?;
        let rows = g.sum(sq, 1)?;
        let norms_per_point = g.sqrt(rows)?;
        let fit = g.sum_all(norms_per_point)?;
        let mut objective = fit;
        if cfg.lambda != 0.0 {
            // σ_k ≈ uᵀ W_k v with the power-iteration vectors held fixed.
            let mut prod: Option<NodeId> = None;
            for (k, s) in norms.iter().enumerate() {
                let (rows, cols) = (s.left.len(), s.right.len());
                let u = g.constant(Tensor::new(vec![1, rows], s.left.clone())?);
                let v = g.constant(Tensor::new(vec![cols, 1], s.right.clone())?);
                let uw = g.matmul(u, params[2 * k])?;
                let sigma = g.matmul(uw, v)?;
                prod = Some(match prod {
                    Some(acc) => g.mul(acc, sigma)?,
                    None => sigma,
                });
            }
            let penalty = g.scale(prod.expect("network has layers"), cfg.lambda * (d as f64).sqrt() * p as f64)?;
            let penalty = g.reshape(penalty, &[1])?;
            objective = g.add(objective, penalty)?;
        }
        if cfg.lambda_r != 0.0 {
            let mut l1 = None;
            for &pn in &params {
                let a = g.abs(pn)?;
                let s = g.sum_all(a)?;
                l1 = Some(match l1 {
                    Some(acc) => g.add(acc, s)?,
                    None => s,
                });
            }
            let l1 = g.scale(l1.expect("network has parameters"), cfg.lambda_r)?;
            objective = g.add(objective, l1)?;
        }
        let value = g.value(objective).item()?;
        if !value.is_finite() {
            return Err(SehmError::Diverged {
                epoch: self.adam.step_count() as usize,
                loss: value,
            });
        }
        let grads = g.backward(objective)?;
        let grad_tensors: Vec<Tensor> = params
            .iter()
            .zip(net.params())
            .map(|(&id, t)| grads.get_or_zeros(id, t.shape()))
            .collect();
        let grad_refs: Vec<&Tensor> = grad_tensors.iter().collect();
        adam_step(&mut net.params_mut(), &grad_refs, &mut self.adam)?;
        Ok(value)
    }
}

/// Perturbed points around each center with their `∇f` targets.
pub fn perturbation_targets(
    model: &impl LatentModel,
    centers: &Tensor,
    delta_frac: f64,
    n: usize,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    let d = centers.shape()[1];
    let mut rows = Vec::with_capacity(centers.shape()[0] * n);
    for (i, c) in centers.data().chunks(d).enumerate() {
        let radius = delta_frac * c.iter().map(|v| v * v).sum::<f64>().sqrt();
        let set = sample_perturbations(c, radius, n, rng::derive(seed, i as u64))?;
        rows.extend(set.points);
    }
    let points = rows_to_tensor(&rows)?;
    let mut targets = Vec::with_capacity(points.len());
    // Bounded batches keep the recurrent graph small.
    for chunk in rows.chunks(1024) {
        let (_, g) = model.probability_and_gradient(&rows_to_tensor(chunk)?)?;
        targets.extend_from_slice(g.data());
    }
    let shape = points.shape().to_vec();
    Ok((points, Tensor::new(shape, targets)?))
}

/// Post-hoc training of `net` on fixed perturbation sets around `centers`
/// (`[N, D_r]`). Returns the objective value at every step.
pub fn train_explainer(
    model: &impl LatentModel,
    net: &mut ThetaNetwork,
    centers: &Tensor,
    config: ExplainerConfig,
) -> Result<Vec<f64>> {
    let (points, targets) = perturbation_targets(model, centers, config.delta_frac, config.perturbations, config.seed)?;
    train_explainer_on(net, &points, &targets, config)
}

/// Minibatch training on precomputed `(points, targets)`.
pub fn train_explainer_on(
    net: &mut ThetaNetwork,
    points: &Tensor,
    targets: &Tensor,
    config: ExplainerConfig,
) -> Result<Vec<f64>> {
    let (total, d) = (points.shape()[0], points.shape()[1]);
    let batch = config.batch_points.clamp(1, total);
    let mut trainer = ExplainerTrainer::new(net, config)?;
    let mut rng = rng::seeded(rng::derive(config.seed, 0xE8));
    let mut order: Vec<usize> = (0..total).collect();
    let mut cursor = total;
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        // Cosine decay to zero: explanations of a confident classifier are
        // small, and a constant step size leaves Adam jittering at that scale.
        let progress = step as f64 / config.steps as f64;
        trainer.set_learning_rate(config.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))?;
        if cursor + batch > total {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch];
        cursor += batch;
        let gather = |t: &Tensor| -> Result<Tensor> {
            let data: Vec<f64> = idx.iter().flat_map(|&i| t.data()[i * d..(i + 1) * d].iter().copied()).collect();
            Ok(Tensor::new(vec![batch, d], data)?)
        };
        history.push(trainer.step(net, &gather(points)?, &gather(targets)?)?);
    }
    Ok(history)
}

/// Identifies the (model, input) pair that produced a set of explanation
/// intermediates, so stale pieces cannot be combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PassFingerprint(pub u64);

impl PassFingerprint {
    pub fn of(model: &SehmModel, input: &Tensor) -> Self {
        let mut h = DefaultHasher::new();
        for t in model.params() {
            t.shape().hash(&mut h);
            for v in t.data() {
                v.to_bits().hash(&mut h);
            }
        }
        if let Some(f) = &model.features {
            for v in f.omega.data() {
                v.to_bits().hash(&mut h);
            }
        }
        input.shape().hash(&mut h);
        for v in input.data() {
            v.to_bits().hash(&mut h);
        }
        PassFingerprint(h.finish())
    }
}

/// Normalized per-step weights of one head, stamped with their pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionWeights {
    pub head: usize,
    /// `[L, C]`
    pub weights: Tensor,
    pub pass: PassFingerprint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub values: Vec<f64>,
    pub pass: PassFingerprint,
}

/// Maps `θ` (over `z`, `L × D_o`) to one contribution per raw `(t, d)`:
/// `β[l·C + j, d] = Σ_h weights_h[l, j] · (W^O θ_lᵀ)[h·D + d]`.
///
/// Returns `T × D` (padding steps dropped).
pub fn beta_decompose(
    raw: &LocalizedSeries,
    weights: &[ContributionWeights],
    theta: &Theta,
    cfg: &MultiHeadConfig,
) -> Result<Tensor> {
    if weights.iter().any(|w| w.pass != theta.pass) {
        return Err(SehmError::StalePass);
    }
    check_len("contribution weight heads", cfg.heads, weights.len())?;
    let (l, c, d) = (raw.windows, raw.neighbor, raw.vars);
    let d_o = cfg.out_dim();
    check_len("theta length", l * d_o, theta.values.len())?;
    check_len("output projection rows", cfg.heads * d, cfg.w_out.shape()[0])?;
    let hd = cfg.heads * d;
    let mut proj = vec![0.0; l * hd];
    // (W^O θ_lᵀ) for every window: [L, D_o] × [D_o, H·D]
    for li in 0..l {
        let th = &theta.values[li * d_o..(li + 1) * d_o];
        for r in 0..hd {
            let row = &cfg.w_out.data()[r * d_o..(r + 1) * d_o];
            proj[li * hd + r] = row.iter().zip(th).map(|(a, b)| a * b).sum();
        }
    }
    let t = raw.original_len;
    let mut beta = vec![0.0; t * d];
    for w in weights {
        check_len("contribution weights", l * c, w.weights.len())?;
        for li in 0..l {
            for j in 0..c {
                let step = li * c + j;
                if step >= t {
                    break;
                }
                let wt = w.weights.data()[li * c + j];
                for dd in 0..d {
                    beta[step * d + dd] += wt * proj[li * hd + w.head * d + dd];
                }
            }
        }
    }
    Ok(Tensor::new(vec![t, d], beta)?)
}

/// A complete explanation of one series.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    /// Flattened latent `z`.
    pub z: Vec<f64>,
    pub theta: Vec<f64>,
    pub g: f64,
    pub f: f64,
    /// `T × D` contributions aligned with the model input.
    pub beta: Tensor,
    /// `T × D` model input (standardized, encoded).
    pub input: Tensor,
    pub pass: PassFingerprint,
}

impl Explanation {
    /// `Σ β_td x_td`, which equals `g` up to rounding.
    pub fn reconstruction(&self) -> f64 {
        self.beta.data().iter().zip(self.input.data()).map(|(b, x)| b * x).sum()
    }
}

impl SehmModel {
    /// Contribution weights of every head for one localized series.
    pub fn contribution_weights(&self, xl: &LocalizedSeries, pass: PassFingerprint) -> Result<Vec<ContributionWeights>> {
        self.heads
            .iter()
            .enumerate()
            .map(|(h, head)| {
                Ok(ContributionWeights {
                    head: h,
                    weights: crate::attention::attention_contribution_weights(xl, head)?,
                    pass,
                })
            })
            .collect()
    }
}

/// Explains the model's prediction on one encoded `T × D` series.
pub fn explain(model: &SehmModel, net: &ThetaNetwork, x: &Tensor) -> Result<Explanation> {
    let cfg = &model.config;
    if x.ndim() != 2 || x.shape()[1] != cfg.vars {
        return config_err(format!("explain expects a T x {} series, got {:?}", cfg.vars, x.shape()));
    }
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let tp = cfg.padded_len(t);
    let mut padded = x.data().to_vec();
    padded.resize(tp * d, 0.0);
    let batch = Tensor::new(vec![1, tp, d], padded)?;
    let pass = PassFingerprint::of(model, &batch);
    let zt = model.encode(&batch)?;
    let z = zt.data().to_vec();
    let theta = Theta {
        values: theta_forward(&z, net)?,
        pass,
    };
    let g = g_approx(&z, &theta.values)?;
    let f = model.proba_from_latent(&zt)?[0];
    let beta = match cfg.architecture {
        Architecture::Recurrent => Tensor::new(vec![t, d], theta.values.clone())?,
        Architecture::Sehm => {
            let proj = model.projection.as_ref().expect("attention model has a projection");
            if cfg.locality {
                let xl = localize(x, &vec![true; t * d], cfg.neighbor)?;
                let weights = model.contribution_weights(&xl, pass)?;
                beta_decompose(&xl, &weights, &theta, proj)?
            } else {
                global_beta(model, x, &theta.values, proj)?
            }
        }
    };
    Ok(Explanation {
        z,
        theta: theta.values,
        g,
        f,
        beta,
        input: x.clone(),
        pass,
    })
}

/// Contributions for global attention, where every position has its own
/// output row: `β[j, d] = Σ_h Σ_i (W^O θ_iᵀ)[h·D + d] · P_h[i, j]`.
fn global_beta(model: &SehmModel, x: &Tensor, theta: &[f64], proj: &MultiHeadConfig) -> Result<Tensor> {
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let d_o = proj.out_dim();
    let hd = proj.heads * d;
    let mut beta = vec![0.0; t * d];
    for (h, head) in model.heads.iter().enumerate() {
        let mut coef = vec![0.0; t * d];
        for i in 0..t {
            let th = &theta[i * d_o..(i + 1) * d_o];
            for dd in 0..d {
                let row = &proj.w_out.data()[(h * d + dd) * d_o..(h * d + dd + 1) * d_o];
                coef[i * d + dd] = row.iter().zip(th).map(|(a, b)| a * b).sum();
            }
        }
        debug_assert_eq!(proj.w_out.shape()[0], hd);
        let out = back_project(x.data(), &coef, head, d)?;
        for (b, o) in beta.iter_mut().zip(out) {
            *b += o;
        }
    }
    Ok(Tensor::new(vec![t, d], beta)?)
}
