use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sehm_autodiff::Tensor;
use sehm_core::explainer::*;
use sehm_core::metrics::*;

fn pair_count(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut wins, mut total) = (0.0, 0.0);
    for (s, y) in scores.iter().zip(labels) {
        for (t, z) in scores.iter().zip(labels) {
            if *y > 0.5 && *z < 0.5 {
                total += 1.0;
                wins += if s > t { 1.0 } else if s == t { 0.5 } else { 0.0 };
            }
        }
    }
    wins / total
}

/// Mean precision at the rank of each positive; valid for distinct scores.
fn average_precision(scores: &[f64], labels: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut sum) = (0.0, 0.0);
    for (rank, &i) in idx.iter().enumerate() {
        if labels[i] > 0.5 {
            tp += 1.0;
            sum += tp / (rank + 1) as f64;
        }
    }
    sum / tp
}

#[test]
fn six_point_case_matches_pair_counting() {
    let scores = [0.9, 0.3, 0.3, 0.6, 0.1, 0.6];
    let labels = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    assert_eq!(auroc(&scores, &labels).unwrap(), pair_count(&scores, &labels));
}

#[test]
fn shuffled_labels_are_near_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 5000;
    let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let mut labels: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
    labels.shuffle(&mut rng);
    assert!((auroc(&scores, &labels).unwrap() - 0.5).abs() < 0.05);
}

#[test]
fn mismatched_lengths_are_rejected() {
    assert!(auroc(&[0.1, 0.2, 0.3], &[0.0, 1.0]).is_err());
    assert!(auprc(&[0.1, f64::NAN], &[0.0, 1.0]).is_err());
}

/// `f` reads only position 2 of a 4-position input.
fn single_position(batch: &[Vec<f64>]) -> sehm_core::Result<Vec<f64>> {
    Ok(batch.iter().map(|x| 1.0 / (1.0 + (-x[2]).exp())).collect())
}

fn permutations(items: Vec<usize>) -> Vec<Vec<usize>> {
    if items.len() <= 1 {
        return vec![items];
    }
    let mut out = Vec::new();
    for i in 0..items.len() {
        let mut rest = items.clone();
        let head = rest.remove(i);
        for mut p in permutations(rest) {
            p.insert(0, head);
            out.push(p);
        }
    }
    out
}

#[test]
fn relevant_position_first_maximizes_aopc() {
    let inputs = vec![vec![0.5, -1.0, 3.0, 2.0]];
    let scores: Vec<(Vec<usize>, f64)> = permutations(vec![0, 1, 2, 3])
        .into_iter()
        .map(|r| {
            let v = aopc(single_position, &inputs, &[r.clone()], &[1]).unwrap()[0].value;
            (r, v)
        })
        .collect();
    let best = scores.iter().map(|(_, v)| *v).fold(f64::MIN, f64::max);
    for (r, v) in &scores {
        if r[0] == 2 {
            assert_eq!(*v, best);
        } else {
            assert!(*v < best);
        }
    }
}

#[test]
fn aopc_matches_hand_computation() {
    let f = |b: &[Vec<f64>]| -> sehm_core::Result<Vec<f64>> { Ok(b.iter().map(|x| x.iter().sum::<f64>() / 10.0).collect()) };
    let inputs = vec![vec![1.0, 2.0, 3.0], vec![4.0, 0.0, 1.0]];
    let rankings = vec![vec![2, 1, 0], vec![0, 2, 1]];
    let curve = aopc(f, &inputs, &rankings, &[0, 1, 3]).unwrap();
    // sample 1 drops: 0, .3, .5, .6; sample 2 drops: 0, .4, .5, .5
    let expect = [0.0, (0.3 / 2.0 + 0.4 / 2.0) / 2.0, (1.4 / 4.0 + 1.4 / 4.0) / 2.0];
    for (p, e) in curve.iter().zip(expect) {
        assert!((p.value - e).abs() < 1e-12, "{} vs {e}", p.value);
    }
    assert!(aopc(f, &inputs, &rankings, &[3, 1]).is_err());
}

/// A model with a constant prediction, so no perturbation changes the label.
struct Flat;

impl LatentModel for Flat {
    fn probability_and_gradient(&self, z: &Tensor) -> sehm_core::Result<(Vec<f64>, Tensor)> {
        Ok((vec![0.7; z.shape()[0]], Tensor::zeros(z.shape())))
    }
}

/// Flips the label on the sign of the first coordinate.
struct Sign;

impl LatentModel for Sign {
    fn probability_and_gradient(&self, z: &Tensor) -> sehm_core::Result<(Vec<f64>, Tensor)> {
        let d = z.shape()[1];
        let p = z.data().chunks(d).map(|r| if r[0] >= 0.0 { 0.9 } else { 0.1 }).collect();
        Ok((p, Tensor::zeros(z.shape())))
    }
}

fn linear(w: Tensor) -> ThetaNetwork {
    let out = w.shape()[1];
    ThetaNetwork::from_layers(
        vec![DenseLayer {
            weight: w,
            bias: Tensor::zeros(&[out]),
        }],
        Activation::Tanh,
    )
    .unwrap()
}

#[test]
fn constant_theta_has_zero_estimate() {
    let net = linear(Tensor::zeros(&[3, 3]));
    let centers = Tensor::new(vec![2, 3], vec![0.1, 0.2, 0.3, -1.0, 0.0, 1.0]).unwrap();
    assert_eq!(estimated_lipschitz(&net, &Flat, &centers, 0.5, 100, 1).unwrap(), 0.0);
    assert!(estimated_lipschitz(&net, &Flat, &centers, 0.0, 100, 1).is_err());
}

#[test]
fn linear_theta_estimate_approaches_spectral_norm() {
    let w = Tensor::new(vec![3, 3], vec![2.0, 0.5, 0.0, -0.3, 1.0, 0.2, 0.1, 0.0, 0.7]).unwrap();
    let sigma = spectral_norm(&w, SPECTRAL_MAX_ITERS, SPECTRAL_TOL).unwrap().value;
    let net = linear(w);
    let centers = Tensor::new(vec![1, 3], vec![0.2, -0.1, 0.4]).unwrap();
    let coarse = estimated_lipschitz(&net, &Flat, &centers, 0.3, 10, 2).unwrap();
    let fine = estimated_lipschitz(&net, &Flat, &centers, 0.3, 20_000, 2).unwrap();
    assert!(coarse <= sigma * (1.0 + 1e-12));
    assert!(fine <= sigma * (1.0 + 1e-12));
    assert!(fine >= coarse);
    assert!(fine > 0.99 * sigma, "{fine} vs {sigma}");
}

#[test]
fn label_filter_only_removes_pairs() {
    let net = ThetaNetwork::new(2, 2, 8, Activation::Tanh, 4).unwrap();
    let centers = Tensor::new(vec![2, 2], vec![0.0, 0.1, 0.05, -0.2]).unwrap();
    let all = estimated_lipschitz(&net, &Flat, &centers, 0.5, 400, 3).unwrap();
    let kept = estimated_lipschitz(&net, &Sign, &centers, 0.5, 400, 3).unwrap();
    assert!(kept > 0.0 && kept <= all);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn auroc_equals_pair_counting_with_ties(
        raw in prop::collection::vec((0u8..6, any::<bool>()), 2..40),
    ) {
        let scores: Vec<f64> = raw.iter().map(|(s, _)| f64::from(*s) / 5.0).collect();
        let labels: Vec<f64> = raw.iter().map(|(_, y)| f64::from(u8::from(*y))).collect();
        let both = labels.iter().any(|&y| y > 0.5) && labels.iter().any(|&y| y < 0.5);
        prop_assume!(both);
        let got = auroc(&scores, &labels).unwrap();
        prop_assert!((got - pair_count(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auprc_equals_average_precision(seed in 0u64..10_000, n in 2usize..60) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let mut labels: Vec<f64> = (0..n).map(|_| f64::from(u8::from(rng.random_bool(0.4)))).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        let got = auprc(&scores, &labels).unwrap();
        prop_assert!((got - average_precision(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auroc_is_invariant_to_monotone_maps(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scores: Vec<f64> = (0..50).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<f64> = (0..50).map(|i| (i % 3 == 0) as u8 as f64).collect();
        let mapped: Vec<f64> = scores.iter().map(|s| s.exp() * 2.0 + 1.0).collect();
        prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&mapped, &labels).unwrap());
    }

    #[test]
    fn estimate_never_exceeds_certificate(seed in 0u64..10_000, depth in 1usize..4) {
        let net = ThetaNetwork::new(4, depth, 6, Activation::Tanh, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = Tensor::new(vec![3, 4], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let est = estimated_lipschitz(&net, &Flat, &centers, 0.5, 50, seed).unwrap();
        prop_assert!(est <= lipschitz_certificate(&net).unwrap() * (1.0 + 1e-9));
    }
}
