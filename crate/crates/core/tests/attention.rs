use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sehm_autodiff::Tensor;
use sehm_core::attention::*;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn head(rng: &mut ChaCha8Rng, d: usize, c: usize, features: Option<Arc<RandomFeatureMatrix>>, scale: f64) -> AttentionHead {
    AttentionHead {
        query: random_tensor(rng, &[d, d], scale),
        key: random_tensor(rng, &[d, d], scale),
        aggregation: Some(random_tensor(rng, &[c], 1.0)),
        features,
    }
}

/// Straightforward double loop: softmax over keys, weighted values, then
/// the aggregation vector over query positions.
fn naive_exact(xl: &LocalizedSeries, h: &AttentionHead) -> Vec<f64> {
    let (c, d) = (xl.neighbor, xl.vars);
    let (wq, wk, w) = (h.query.data(), h.key.data(), h.aggregation.as_ref().unwrap().data());
    let mut out = Vec::new();
    for l in 0..xl.windows {
        let x = xl.window(l);
        let proj = |m: &[f64], i: usize| -> Vec<f64> {
            (0..d).map(|col| (0..d).map(|k| x[i * d + k] * m[k * d + col]).sum()).collect()
        };
        let mut row = vec![0.0; d];
        for i in 0..c {
            let q = proj(wq, i);
            let logits: Vec<f64> = (0..c)
                .map(|j| q.iter().zip(proj(wk, j)).map(|(a, b)| a * b).sum())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..c {
                for k in 0..d {
                    row[k] += w[i] * e[j] / s * x[j * d + k];
                }
            }
        }
        out.extend(row);
    }
    out
}

#[test]
fn exact_path_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (t, c, d) in [(9, 3, 2), (17, 5, 3), (30, 10, 4)] {
        let x = random_tensor(&mut rng, &[t, d], 1.5);
        let xl = localize(&x, &vec![true; t * d], c).unwrap();
        let h = head(&mut rng, d, c, None, 0.8);
        let got = exact_local_attention(&xl, &h).unwrap();
        assert_eq!(got.shape(), [xl.windows, d]);
        for (a, b) in got.data().iter().zip(naive_exact(&xl, &h)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn kernel_approaches_exact_with_many_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (t, c, d) = (6, 3, 2);
    let x = random_tensor(&mut rng, &[t, d], 0.7);
    let xl = localize(&x, &vec![true; t * d], c).unwrap();
    let features = Arc::new(draw_orthogonal_features(d, 20_000, 3).unwrap());
    let mut h = head(&mut rng, d, c, Some(features), 0.7);
    h.aggregation = Some(Tensor::new(vec![c], vec![1.0; c]).unwrap());
    let approx = kernel_local_attention(&xl, &h).unwrap();
    let exact = exact_local_attention(&xl, &h).unwrap();
    for (a, e) in approx.data().iter().zip(exact.data()) {
        assert!((a - e).abs() / e.abs().max(1e-3) < 0.03, "{a} vs {e}");
    }
}

#[test]
fn orthogonal_blocks() {
    let f = draw_orthogonal_features(5, 12, 9).unwrap();
    assert_eq!(f.omega.shape(), [12, 5]);
    let rows: Vec<&[f64]> = f.omega.data().chunks(5).collect();
    for block in [0..5, 5..10, 10..12] {
        for i in block.clone() {
            for j in block.clone() {
                if i != j {
                    let dot: f64 = rows[i].iter().zip(rows[j]).map(|(a, b)| a * b).sum();
                    assert!(dot.abs() < 1e-10);
                }
            }
        }
    }
    assert_eq!(f, draw_orthogonal_features(5, 12, 9).unwrap());
}

#[test]
fn feature_map_is_positive_and_unbiased_in_expectation() {
    let d = 3;
    let q = [0.3, -0.2, 0.4];
    let k = [-0.1, 0.5, 0.2];
    let exact: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>().exp();
    let f = draw_orthogonal_features(d, 30_000, 4).unwrap();
    let (fq, fk) = (feature_map(&q, &f).unwrap(), feature_map(&k, &f).unwrap());
    assert!(fq.iter().chain(&fk).all(|&v| v > 0.0));
    let kappa: f64 = fq.iter().zip(&fk).map(|(a, b)| a * b).sum();
    assert!((kappa - exact).abs() / exact < 0.02);
}

#[test]
fn localize_pads_and_masks() {
    let x = Tensor::new(vec![5, 2], (0..10).map(f64::from).collect()).unwrap();
    let mut obs = vec![true; 10];
    obs[3] = false;
    let xl = localize(&x, &obs, 3).unwrap();
    assert_eq!(xl.windows, 2);
    assert_eq!(xl.values.shape(), [2, 3, 2]);
    assert_eq!(xl.values.data()[3], 0.0);
    assert_eq!(xl.mask.data()[3], 0.0);
    assert_eq!(&xl.values.data()[10..], &[0.0, 0.0]);
    assert_eq!(&xl.mask.data()[10..], &[0.0, 0.0]);
    assert!(localize(&x, &obs, 0).is_err());
    assert!(localize(&x, &obs[..9], 3).is_err());
}

#[test]
fn contribution_weights_reproduce_head_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (t, c, d) = (20, 5, 3);
    let x = random_tensor(&mut rng, &[t, d], 1.0);
    let xl = localize(&x, &vec![true; t * d], c).unwrap();
    let features = Arc::new(draw_orthogonal_features(d, 16, 6).unwrap());
    for h in [head(&mut rng, d, c, Some(features), 0.5), head(&mut rng, d, c, None, 0.5)] {
        let out = if h.features.is_some() {
            kernel_local_attention(&xl, &h).unwrap()
        } else {
            exact_local_attention(&xl, &h).unwrap()
        };
        let w = attention_contribution_weights(&xl, &h).unwrap();
        for l in 0..xl.windows {
            let win = xl.window(l);
            for k in 0..d {
                let r: f64 = (0..c).map(|j| w.data()[l * c + j] * win[j * d + k]).sum();
                assert!((r - out.data()[l * d + k]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn multi_head_concatenates_then_projects() {
    let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let b = Tensor::new(vec![2, 2], vec![0.5, 0.0, -1.0, 1.0]).unwrap();
    let w = Tensor::new(vec![4, 1], vec![1.0, 1.0, 2.0, -1.0]).unwrap();
    let cfg = MultiHeadConfig::new(2, w).unwrap();
    let out = aggregate_multi_head(&[a, b], &cfg).unwrap();
    assert_eq!(out.data(), &[4.0, 4.0]);
    assert!(MultiHeadConfig::new(3, Tensor::zeros(&[4, 1])).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// A window whose cells for one variable are all missing produces an
    /// exact zero in that variable's output, for either kernel.
    #[test]
    fn fully_missing_window_gives_exact_zero(
        seed in 0u64..10_000,
        c in 2usize..8,
        d in 1usize..4,
        windows in 2usize..5,
        gap_var in 0usize..4,
    ) {
        let gap_var = gap_var % d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = windows * c;
        let x = random_tensor(&mut rng, &[t, d], 3.0);
        let l = rng.random_range(0..windows);
        let mut obs = vec![true; t * d];
        for s in l * c..(l + 1) * c {
            obs[s * d + gap_var] = false;
        }
        let xl = localize(&x, &obs, c).unwrap();
        let features = Arc::new(draw_orthogonal_features(d, 8, seed).unwrap());
        let h = head(&mut rng, d, c, Some(features), 1.0);
        let k = kernel_local_attention(&xl, &h).unwrap();
        let e = exact_local_attention(&xl, &h).unwrap();
        prop_assert_eq!(k.data()[l * d + gap_var], 0.0);
        prop_assert_eq!(e.data()[l * d + gap_var], 0.0);
    }

    /// Each head output row depends only on its own window.
    #[test]
    fn windows_are_independent(seed in 0u64..10_000, c in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, windows) = (2, 3);
        let t = windows * c;
        let x = random_tensor(&mut rng, &[t, d], 1.0);
        let mut y = x.clone();
        for v in &mut y.data_mut()[c * d..] {
            *v += 1.0;
        }
        let features = Arc::new(draw_orthogonal_features(d, 8, seed).unwrap());
        let h = head(&mut rng, d, c, Some(features), 1.0);
        let a = kernel_local_attention(&localize(&x, &vec![true; t * d], c).unwrap(), &h).unwrap();
        let b = kernel_local_attention(&localize(&y, &vec![true; t * d], c).unwrap(), &h).unwrap();
        prop_assert_eq!(&a.data()[..d], &b.data()[..d]);
    }
}
