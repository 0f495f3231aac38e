//! Invariant suite run by `sehm selfcheck`.

use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sehm_autodiff::{finite_difference_check, Graph, NodeId, Tensor};
use sehm_core::attention::{exact_local_attention, kernel_local_attention, localize, AttentionHead};
use sehm_core::data::{encode_sample, generate_synthetic, Standardizer, SyntheticSpec};
use sehm_core::explainer::{
    exact_explanation_loss_with_gradient, explain, lipschitz_certificate, surrogate_loss_with_gradient,
    theta_forward, Activation, JacobianReading, ThetaNetwork,
};
use sehm_core::io::Manifest;
use sehm_core::model::{Architecture, ModelConfig, SehmModel};
use sehm_core::recurrent::CellKind;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

const EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const ACTIVATIONS: [Activation; 4] = [Activation::Relu, Activation::Tanh, Activation::Sigmoid, Activation::Softplus];

#[derive(Debug, Serialize)]
struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches data")
}

fn small_model(cell: CellKind, architecture: Architecture, locality: bool, kernelization: bool) -> ModelConfig {
    ModelConfig {
        architecture,
        cell,
        vars: 3,
        neighbor: 4,
        heads: 2,
        features: 6,
        out_dim: 3,
        hidden: 4,
        locality,
        kernelization,
        zero_encoding: true,
        seed: 5,
    }
}

/// Central differences on every parameter of a small model.
fn model_gradients() -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    let configs = [
        small_model(CellKind::Gru, Architecture::Sehm, true, true),
        small_model(CellKind::Lstm, Architecture::Sehm, true, true),
        small_model(CellKind::Gru, Architecture::Sehm, true, false),
        small_model(CellKind::Lstm, Architecture::Sehm, false, true),
        small_model(CellKind::Gru, Architecture::Recurrent, true, true),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for cfg in configs {
        let mut model = SehmModel::new(cfg)?;
        let x = random(&mut rng, &[3, model.config.padded_len(12), 3], 0.8);
        let labels = [1.0, 0.0, 1.0];
        let (_, grads) = model.loss_and_gradients(&x, &labels)?;
        for p in 0..grads.len() {
            for i in 0..grads[p].len() {
                let orig = model.params()[p].data()[i];
                model.params_mut()[p].data_mut()[i] = orig + EPS;
                let (up, _) = model.loss_and_gradients(&x, &labels)?;
                model.params_mut()[p].data_mut()[i] = orig - EPS;
                let (down, _) = model.loss_and_gradients(&x, &labels)?;
                model.params_mut()[p].data_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * EPS);
                let analytic = grads[p].data()[i];
                worst = worst.max((numeric - analytic).abs() / (numeric.abs() + analytic.abs() + 1e-6));
            }
        }
    }
    Ok(Outcome {
        name: "model gradients",
        passed: worst < GRAD_TOL,
        detail: format!("5 architectures, max relative error {worst:.2e}"),
    })
}

fn autodiff_err(e: sehm_core::SehmError) -> sehm_autodiff::Error {
    match e {
        sehm_core::SehmError::Autodiff(a) => a,
        other => sehm_autodiff::Error::Invalid {
            op: "theta network",
            msg: other.to_string(),
        },
    }
}

/// Central differences of a weighted sum of θ with respect to the input
/// and to every layer tensor.
fn theta_gradients() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for (k, act) in ACTIVATIONS.into_iter().enumerate() {
        let net = ThetaNetwork::new(5, 3, 6, act, k as u64)?;
        let mut tensors: Vec<Tensor> = net.params().into_iter().cloned().collect();
        tensors.push(random(&mut rng, &[3, 5], 1.0));
        let weights = random(&mut rng, &[3, 5], 1.0);
        let last = tensors.len() - 1;
        for slot in 0..tensors.len() {
            let err = finite_difference_check(
                |g: &mut Graph, leaf: NodeId| {
                    let ids: Vec<NodeId> = (0..tensors.len())
                        .map(|i| if i == slot { leaf } else { g.constant(tensors[i].clone()) })
                        .collect();
                    let theta = net.forward_graph(g, &ids[..last], ids[last]).map_err(autodiff_err)?;
                    let w = g.constant(weights.clone());
                    let weighted = g.mul(theta, w)?;
                    g.sum_all(weighted)
                },
                &tensors[slot],
                EPS,
            )?;
            worst = worst.max(err);
        }
    }
    Ok(Outcome {
        name: "theta-network gradients",
        passed: worst < GRAD_TOL,
        detail: format!("4 activations, max relative error {worst:.2e}"),
    })
}

/// Attention output over windows lying inside a long gap is exactly zero.
fn gap_exactness() -> Result<Outcome> {
    let c = 10;
    let spec = SyntheticSpec {
        samples: 20,
        length: 200,
        vars: 4,
        region: [20, 120],
        gap_count: [1, 2],
        gap_length: [2 * c - 1, 60],
        motifs: vec![
            sehm_core::data::Motif::plateau("plateau", [0, 1], 8, 5.0),
            sehm_core::data::Motif::ramp("ramp", [2, 3], 8, 5.0),
        ],
        seed: 3,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let st = Standardizer::fit(&data, &all)?;
    let (mut checked, mut nonzero) = (0usize, 0usize);
    for draw in 0..3 {
        let model = SehmModel::new(ModelConfig {
            vars: 4,
            neighbor: c,
            seed: 100 + draw,
            ..ModelConfig::default()
        })?;
        for s in &data.samples {
            let obs = s.observed();
            let x = Tensor::new(vec![s.length, s.vars], encode_sample(s, &st, true))?;
            let xl = localize(&x, &obs, c)?;
            for head in &model.heads {
                let exact = AttentionHead {
                    features: None,
                    ..head.clone()
                };
                for out in [kernel_local_attention(&xl, head)?, exact_local_attention(&xl, &exact)?] {
                    for l in 0..xl.windows {
                        for d in 0..s.vars {
                            let empty = (l * c..(l + 1) * c).all(|t| t >= s.length || !obs[t * s.vars + d]);
                            if empty {
                                checked += 1;
                                if out.data()[l * s.vars + d] != 0.0 {
                                    nonzero += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Outcome {
        name: "gap windows give exact zeros",
        passed: checked > 0 && nonzero == 0,
        detail: format!("{checked} all-missing window entries, {nonzero} nonzero"),
    })
}

fn surrogate_bound() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut min_slack = f64::INFINITY;
    for i in 0..100u64 {
        let d = rng.random_range(1..=8);
        let net = ThetaNetwork::new(d, rng.random_range(1..=3), rng.random_range(1..=8), ACTIVATIONS[i as usize % 4], i)?;
        let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let grad: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lambda = rng.random_range(0.0..1.0);
        for reading in [JacobianReading::Identity, JacobianReading::AllOnes] {
            let exact = exact_explanation_loss_with_gradient(&z, &net, &grad, lambda, reading)?;
            let bound = surrogate_loss_with_gradient(&z, &net, &grad, lambda, reading)?;
            min_slack = min_slack.min(bound - exact);
        }
    }
    Ok(Outcome {
        name: "surrogate bounds exact loss",
        passed: min_slack >= -1e-8,
        detail: format!("100 instances, min slack {min_slack:.3e}"),
    })
}

fn certificate_bound() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for (k, act) in ACTIVATIONS.into_iter().enumerate() {
        let d = 6;
        let net = ThetaNetwork::new(d, 1 + k % 3, 10, act, 50 + k as u64)?;
        let cert = lipschitz_certificate(&net)?;
        for _ in 0..1000 {
            let a: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let scale = 10f64.powf(rng.random_range(-4.0..0.5));
            let b: Vec<f64> = a.iter().map(|v| v + scale * rng.random_range(-1.0..1.0)).collect();
            let dz = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            if dz == 0.0 {
                continue;
            }
            let (ta, tb) = (theta_forward(&a, &net)?, theta_forward(&b, &net)?);
            let dt = ta.iter().zip(&tb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(dt / (cert * dz));
        }
    }
    Ok(Outcome {
        name: "certificate bounds theta",
        passed: worst <= 1.0 + 1e-9,
        detail: format!("4000 pairs, max observed / certificate {worst:.4}"),
    })
}

/// `g = θ·z` and `Σ β x = g` on an untrained model.
fn additivity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cfg = small_model(CellKind::Gru, Architecture::Sehm, true, true);
    let t = 24;
    let dr = cfg.latent_dim(t);
    let model = SehmModel::new(cfg)?;
    let net = ThetaNetwork::new(dr, 2, dr, Activation::Relu, 7)?;
    let (mut g_err, mut beta_err): (f64, f64) = (0.0, 0.0);
    for _ in 0..10 {
        let ex = explain(&model, &net, &random(&mut rng, &[t, 3], 1.5))?;
        let direct: f64 = ex.theta.iter().zip(&ex.z).map(|(a, b)| a * b).sum();
        g_err = g_err.max((direct - ex.g).abs());
        beta_err = beta_err.max((ex.reconstruction() - ex.g).abs());
    }
    Ok(Outcome {
        name: "additive explanations",
        passed: g_err < 1e-10 && beta_err < 1e-8,
        detail: format!("|g - theta.z| {g_err:.1e}, |sum beta x - g| {beta_err:.1e}"),
    })
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<()> {
    let checks: [fn() -> Result<Outcome>; 6] = [
        model_gradients,
        theta_gradients,
        gap_exactness,
        surrogate_bound,
        certificate_bound,
        additivity,
    ];
    let mut outcomes = Vec::with_capacity(checks.len());
    for check in checks {
        let o = check()?;
        info!("{}: {}", o.name, o.detail);
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        outcomes.push(o);
    }
    let mut m = Manifest::new("selfcheck", cfg.to_json());
    let path = out.join("selfcheck.json");
    std::fs::write(&path, serde_json::to_string_pretty(&outcomes)? + "\n").map_err(crate::error::io_err(&path))?;
    m.outputs.push(path.display().to_string());
    let manifest_path = out.join("selfcheck.manifest.json");
    m.outputs.push(manifest_path.display().to_string());
    m.save(&manifest_path)?;
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(failed.join(", ")))
    }
}
