use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sehm_autodiff::Tensor;
use sehm_core::attention::localize;
use sehm_core::explainer::*;
use sehm_core::model::{Architecture, ModelConfig, SehmModel};
use sehm_core::SehmError;

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn activation(i: usize) -> Activation {
    [Activation::Relu, Activation::Tanh, Activation::Sigmoid, Activation::Softplus][i % 4]
}

/// `f(z) = σ(a·z + b)`, a latent model with a closed-form gradient.
struct Logistic {
    a: Vec<f64>,
    b: f64,
}

impl LatentModel for Logistic {
    fn probability_and_gradient(&self, z: &Tensor) -> sehm_core::Result<(Vec<f64>, Tensor)> {
        let d = self.a.len();
        let mut probs = Vec::new();
        let mut grads = Vec::new();
        for row in z.data().chunks(d) {
            let s: f64 = row.iter().zip(&self.a).map(|(x, a)| x * a).sum::<f64>() + self.b;
            let p = 1.0 / (1.0 + (-s).exp());
            probs.push(p);
            grads.extend(self.a.iter().map(|a| p * (1.0 - p) * a));
        }
        Ok((probs, Tensor::new(z.shape().to_vec(), grads)?))
    }
}

#[test]
fn surrogate_bounds_exact_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..100 {
        let d = rng.random_range(1..=8);
        let depth = rng.random_range(1..=3);
        let hidden = rng.random_range(1..=8);
        let net = ThetaNetwork::new(d, depth, hidden, activation(i), i as u64).unwrap();
        let z = random_vec(&mut rng, d, 2.0);
        let grad = random_vec(&mut rng, d, 1.0);
        let lambda = rng.random_range(0.0..1.0);
        for reading in [JacobianReading::Identity, JacobianReading::AllOnes] {
            let exact = exact_explanation_loss_with_gradient(&z, &net, &grad, lambda, reading).unwrap();
            let bound = surrogate_loss_with_gradient(&z, &net, &grad, lambda, reading).unwrap();
            assert!(bound - exact >= -1e-8, "instance {i}: {bound} < {exact}");
        }
    }
}

#[test]
fn spectral_norm_matches_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let (r, c) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let data = random_vec(&mut rng, r * c, 1.0);
        let oracle = DMatrix::from_row_slice(r, c, &data).singular_values().max();
        let est = spectral_norm(&Tensor::new(vec![r, c], data).unwrap(), SPECTRAL_MAX_ITERS, SPECTRAL_TOL).unwrap();
        assert!((est.value - oracle).abs() < 1e-6, "{} vs {oracle}", est.value);
    }
}

#[test]
fn spectral_norm_edge_cases() {
    let zero = spectral_norm(&Tensor::zeros(&[3, 4]), 100, 1e-12).unwrap();
    assert_eq!(zero.value, 0.0);
    let diag = Tensor::new(vec![2, 2], vec![-3.0, 0.0, 0.0, 2.0]).unwrap();
    assert!((spectral_norm(&diag, 10_000, 1e-14).unwrap().value - 3.0).abs() < 1e-9);
    assert!(spectral_norm(&Tensor::zeros(&[3]), 10, 1e-12).is_err());
}

#[test]
fn jacobian_matches_finite_differences() {
    let net = ThetaNetwork::new(4, 3, 5, Activation::Tanh, 3).unwrap();
    let z = [0.3, -0.7, 1.1, 0.2];
    let jac = theta_jacobian(&z, &net).unwrap();
    let eps = 1e-6;
    for j in 0..4 {
        let mut up = z;
        let mut down = z;
        up[j] += eps;
        down[j] -= eps;
        let (tu, td) = (theta_forward(&up, &net).unwrap(), theta_forward(&down, &net).unwrap());
        for i in 0..4 {
            let num = (tu[i] - td[i]) / (2.0 * eps);
            assert!((num - jac.data()[i * 4 + j]).abs() < 1e-7);
        }
    }
}

#[test]
fn induced_norm_is_max_column_sum() {
    let m = Tensor::new(vec![2, 3], vec![1.0, -4.0, 0.5, -2.0, 1.0, 0.5]).unwrap();
    assert_eq!(induced_one_norm(&m), 5.0);
}

#[test]
fn perturbations_stay_in_ball() {
    let z = [1.0, 2.0, -1.0];
    let set = sample_perturbations(&z, 0.3, 500, 4).unwrap();
    assert_eq!(set.points.len(), 500);
    for p in &set.points {
        let r: f64 = p.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(r <= 0.3 + 1e-12);
    }
    assert_eq!(set, sample_perturbations(&z, 0.3, 500, 4).unwrap());
    assert!(sample_perturbations(&z, -1.0, 5, 4).is_err());
}

#[test]
fn objective_sums_point_losses_and_l1() {
    let net = ThetaNetwork::new(2, 1, 2, Activation::Relu, 1).unwrap();
    let pts = vec![vec![0.5, -0.5], vec![1.0, 2.0]];
    let grads = vec![vec![0.1, 0.2], vec![-0.3, 0.0]];
    let manual: f64 = pts
        .iter()
        .zip(&grads)
        .map(|(p, g)| surrogate_loss_with_gradient(p, &net, g, 0.2, JacobianReading::Identity).unwrap())
        .sum::<f64>()
        + 0.01 * net.params().iter().flat_map(|t| t.data()).map(|v| v.abs()).sum::<f64>();
    let obj = explanation_objective_with_gradients(&pts, &grads, &net, 0.2, 0.01, JacobianReading::Identity).unwrap();
    assert!((obj - manual).abs() < 1e-12);
}

#[test]
fn explainer_learns_a_logistic_gradient() {
    let model = Logistic {
        a: vec![1.5, -2.0, 0.0, 0.5],
        b: 0.1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let centers = Tensor::new(vec![20, 4], random_vec(&mut rng, 80, 1.0)).unwrap();
    let cfg = ExplainerConfig {
        lambda: 1e-3,
        lambda_r: 0.0,
        steps: 800,
        learning_rate: 1e-2,
        hidden: 16,
        activation: Activation::Tanh,
        ..ExplainerConfig::default()
    };
    let mut net = cfg.build_network(4).unwrap();
    let history = train_explainer(&model, &mut net, &centers, cfg).unwrap();
    assert!(history.last().unwrap() < &(history[0] * 0.2));
    let z: Vec<f64> = centers.data()[..4].to_vec();
    let theta = theta_forward(&z, &net).unwrap();
    let grad = grad_f(&model, &z).unwrap();
    let err: f64 = theta.iter().zip(&grad).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(err / norm < 0.2, "relative error {}", err / norm);
}

fn small_model(architecture: Architecture, locality: bool, kernelization: bool) -> SehmModel {
    SehmModel::new(ModelConfig {
        architecture,
        vars: 3,
        neighbor: 5,
        heads: 2,
        features: 6,
        out_dim: 4,
        hidden: 6,
        locality,
        kernelization,
        seed: 9,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn series(t: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::new(vec![t, d], random_vec(&mut rng, t * d, 2.0)).unwrap()
}

#[test]
fn explanations_reconstruct_g() {
    let t = 23;
    for (arch, locality, kernel) in [
        (Architecture::Sehm, true, true),
        (Architecture::Sehm, true, false),
        (Architecture::Sehm, false, true),
        (Architecture::Sehm, false, false),
        (Architecture::Recurrent, true, true),
    ] {
        let model = small_model(arch, locality, kernel);
        let dr = model.config.latent_dim(t);
        let net = ThetaNetwork::new(dr, 2, 8, Activation::Tanh, 1).unwrap();
        let x = series(t, 3, 3);
        let e = explain(&model, &net, &x).unwrap();
        assert_eq!(e.beta.shape(), [t, 3]);
        let g = g_approx(&e.z, &e.theta).unwrap();
        assert!((g - e.g).abs() < 1e-10);
        assert!(
            (e.reconstruction() - e.g).abs() < 1e-8,
            "{arch:?} locality {locality} kernel {kernel}: {} vs {}",
            e.reconstruction(),
            e.g
        );
        assert!(e.f > 0.0 && e.f < 1.0);
    }
}

#[test]
fn stale_intermediates_are_rejected() {
    let model = small_model(Architecture::Sehm, true, true);
    let t = 20;
    let x = series(t, 3, 4);
    let y = series(t, 3, 5);
    let xl = localize(&x, &vec![true; t * 3], 5).unwrap();
    let px = PassFingerprint::of(&model, &x);
    let py = PassFingerprint::of(&model, &y);
    assert_ne!(px, py);
    let weights = model.contribution_weights(&xl, px).unwrap();
    let theta = Theta {
        values: vec![0.1; model.config.latent_dim(t)],
        pass: py,
    };
    let proj = model.projection.as_ref().unwrap();
    assert!(matches!(beta_decompose(&xl, &weights, &theta, proj), Err(SehmError::StalePass)));
    let fresh = Theta { pass: px, ..theta };
    assert!(beta_decompose(&xl, &weights, &fresh, proj).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn certificate_bounds_theta_differences(
        seed in 0u64..100_000,
        d in 1usize..8,
        depth in 1usize..4,
        act in 0usize..4,
    ) {
        let net = ThetaNetwork::new(d, depth, 6, activation(act), seed).unwrap();
        let cert = lipschitz_certificate(&net).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let a = random_vec(&mut rng, d, 3.0);
            let b = random_vec(&mut rng, d, 3.0);
            let (ta, tb) = (theta_forward(&a, &net).unwrap(), theta_forward(&b, &net).unwrap());
            let num: f64 = ta.iter().zip(&tb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let den: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            prop_assert!(num <= cert * den * (1.0 + 1e-9) + 1e-12);
        }
    }

    #[test]
    fn g_is_linear_in_z_for_fixed_theta(z in prop::collection::vec(-5.0f64..5.0, 1..12), k in -3.0f64..3.0) {
        let theta: Vec<f64> = z.iter().map(|v| v.sin()).collect();
        let scaled: Vec<f64> = z.iter().map(|v| v * k).collect();
        let a = g_approx(&scaled, &theta).unwrap();
        let b = k * g_approx(&z, &theta).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
    }
}
