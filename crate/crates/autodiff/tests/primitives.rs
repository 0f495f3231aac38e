use std::time::Instant;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sehm_autodiff::{finite_difference_check, Graph, NodeId, PrimitiveKind, Result, Tensor};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for kinks and poles.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.2..1.5);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Contracts an arbitrary output with fixed random weights into a scalar.
fn weighted_sum(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let shape = g.value(y).shape().to_vec();
    let w = g.constant(random_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn concat_inputs(inputs: &[Tensor]) -> (Tensor, Vec<Vec<usize>>) {
    let shapes = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    (Tensor::vector(flat), shapes)
}

/// Gradient check of `kind` with respect to all of its inputs at once.
fn check_kind(kind: PrimitiveKind, inputs: Vec<Tensor>, seed: u64) -> f64 {
    let (flat, shapes) = concat_inputs(&inputs);
    let f = |g: &mut Graph, x: NodeId| {
        let parts = g.split_flat(x, &shapes)?;
        let y = g.apply(kind.clone(), &parts)?;
        weighted_sum(g, y, seed)
    };
    finite_difference_check(f, &flat, EPS).unwrap()
}

fn run_ten_seeds(name: &str, build: impl Fn(&mut ChaCha8Rng) -> (PrimitiveKind, Vec<Tensor>)) {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (kind, inputs) = build(&mut rng);
        let err = check_kind(kind, inputs, seed);
        assert!(err < TOL, "{name} seed {seed}: max relative error {err}");
    }
}

#[test]
fn matmul_gradients() {
    run_ten_seeds("matmul 2d", |r| {
        (PrimitiveKind::MatMul, vec![random_tensor(r, &[3, 4], -1.0, 1.0), random_tensor(r, &[4, 2], -1.0, 1.0)])
    });
    run_ten_seeds("matmul folded 3d", |r| {
        (PrimitiveKind::MatMul, vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0), random_tensor(r, &[4, 5], -1.0, 1.0)])
    });
    run_ten_seeds("matmul batched", |r| {
        (PrimitiveKind::MatMul, vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0), random_tensor(r, &[2, 4, 2], -1.0, 1.0)])
    });
}

#[test]
fn elementwise_binary_gradients() {
    for kind in [PrimitiveKind::Add, PrimitiveKind::Sub, PrimitiveKind::Mul] {
        run_ten_seeds(kind.name(), |r| {
            (kind.clone(), vec![random_tensor(r, &[3, 4], -1.0, 1.0), random_tensor(r, &[3, 4], -1.0, 1.0)])
        });
        run_ten_seeds("broadcast suffix", |r| {
            (kind.clone(), vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0), random_tensor(r, &[4], -1.0, 1.0)])
        });
        run_ten_seeds("broadcast middle", |r| {
            (kind.clone(), vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0), random_tensor(r, &[3, 1], -1.0, 1.0)])
        });
    }
    run_ten_seeds("div", |r| {
        (PrimitiveKind::Div, vec![random_tensor(r, &[3, 4], -1.0, 1.0), away_from_zero(r, &[3, 4])])
    });
    run_ten_seeds("div broadcast", |r| {
        (PrimitiveKind::Div, vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0), away_from_zero(r, &[2, 3, 1])])
    });
}

#[test]
fn elementwise_unary_gradients() {
    let smooth = [
        PrimitiveKind::Exp,
        PrimitiveKind::Sigmoid,
        PrimitiveKind::Tanh,
        PrimitiveKind::Softplus,
        PrimitiveKind::Scale(-1.7),
        PrimitiveKind::AddScalar(0.3),
    ];
    for kind in smooth {
        run_ten_seeds(kind.name(), |r| (kind.clone(), vec![random_tensor(r, &[2, 5], -2.0, 2.0)]));
    }
    for kind in [PrimitiveKind::Relu, PrimitiveKind::Abs] {
        run_ten_seeds(kind.name(), |r| (kind.clone(), vec![away_from_zero(r, &[2, 5])]));
    }
    for kind in [PrimitiveKind::Log, PrimitiveKind::Sqrt] {
        run_ten_seeds(kind.name(), |r| (kind.clone(), vec![random_tensor(r, &[2, 5], 0.2, 3.0)]));
    }
}

#[test]
fn axis_gradients() {
    for axis in 0..3 {
        for kind in [
            PrimitiveKind::Softmax { axis },
            PrimitiveKind::Sum { axis },
            PrimitiveKind::Mean { axis },
        ] {
            run_ten_seeds(kind.name(), |r| (kind.clone(), vec![random_tensor(r, &[2, 3, 4], -2.0, 2.0)]));
        }
    }
    run_ten_seeds("sum_all", |r| (PrimitiveKind::SumAll, vec![random_tensor(r, &[3, 2], -1.0, 1.0)]));
    run_ten_seeds("concat", |r| {
        (
            PrimitiveKind::Concat { axis: 1 },
            vec![random_tensor(r, &[2, 3, 2], -1.0, 1.0), random_tensor(r, &[2, 1, 2], -1.0, 1.0)],
        )
    });
    run_ten_seeds("reshape", |r| {
        (PrimitiveKind::Reshape { shape: vec![4, 3] }, vec![random_tensor(r, &[2, 6], -1.0, 1.0)])
    });
    run_ten_seeds("transpose", |r| {
        (PrimitiveKind::Transpose { a: 1, b: 2 }, vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0)])
    });
    run_ten_seeds("transpose outer", |r| {
        (PrimitiveKind::Transpose { a: 0, b: 2 }, vec![random_tensor(r, &[2, 3, 4], -1.0, 1.0)])
    });
    run_ten_seeds("slice", |r| {
        (PrimitiveKind::Slice { axis: 1, start: 1, len: 2 }, vec![random_tensor(r, &[2, 4, 3], -1.0, 1.0)])
    });
}

#[test]
fn forward_values() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let e = g.exp(z).unwrap();
    let s = g.sigmoid(z).unwrap();
    assert_eq!(g.value(e).data(), &[1.0]);
    assert_eq!(g.value(s).data(), &[0.5]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let mut g = Graph::new();
    let (na, nb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(na, nb).unwrap();
    assert_eq!(g.value(c).shape(), &[2, 4]);
    for i in 0..2 {
        for j in 0..4 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += a.at(&[i, k]) * b.at(&[k, j]);
            }
            assert!((g.value(c).at(&[i, j]) - acc).abs() < 1e-14);
        }
    }
}

#[test]
fn softmax_is_stable_for_large_logits() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1000.0, 1000.0, 950.0]));
    let p = g.softmax(x, 0).unwrap();
    let v = g.value(p).data();
    assert!((v[0] - 0.5).abs() < 1e-12 && (v[1] - 0.5).abs() < 1e-12);
    assert!(v[2] < 1e-20);
}

#[test]
fn identical_inputs_give_bitwise_identical_gradients() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.leaf(random_tensor(&mut rng, &[4, 5], -1.0, 1.0));
        let w = g.leaf(random_tensor(&mut rng, &[5, 3], -1.0, 1.0));
        let h = g.matmul(x, w).unwrap();
        let h = g.tanh(h).unwrap();
        let p = g.softmax(h, 1).unwrap();
        let l = weighted_sum(&mut g, p, 3).unwrap();
        let grads = g.backward(l).unwrap();
        (
            g.value(l).data().to_vec(),
            grads.get(x).unwrap().data().to_vec(),
            grads.get(w).unwrap().data().to_vec(),
        )
    };
    let (a, b) = (run(), run());
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.0), bits(&b.0));
    assert_eq!(bits(&a.1), bits(&b.1));
    assert_eq!(bits(&a.2), bits(&b.2));
}

fn chain(len: usize) -> (Graph, NodeId, NodeId) {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::full(&[64], 0.1));
    let mut y = x;
    for i in 0..len {
        y = if i % 2 == 0 { g.tanh(y).unwrap() } else { g.add_scalar(y, 0.01).unwrap() };
    }
    let l = g.sum_all(y).unwrap();
    (g, x, l)
}

fn time_backward(g: &Graph, x: NodeId, l: NodeId) -> f64 {
    let t = Instant::now();
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).is_some());
    t.elapsed().as_secs_f64()
}

#[test]
fn backward_is_linear_in_record_length() {
    // both records are well past the last-level cache, so the comparison is
    // not dominated by the cache-resident to memory-bound transition
    let (gs, xs, ls) = chain(80_000);
    let (gl, xl, ll) = chain(160_000);
    // interleaved so that load from concurrently running tests hits both
    let (mut short, mut long) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..5 {
        short = short.min(time_backward(&gs, xs, ls));
        long = long.min(time_backward(&gl, xl, ll));
    }
    assert!(long / short <= 2.5, "doubling the record took {:.2}x ({short} s vs {long} s)", long / short);
}

proptest! {
    #[test]
    fn broadcast_add_matches_explicit_expansion(
        rows in 1usize..5, cols in 1usize..5, seed in 0u64..1000
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[rows, cols], -1.0, 1.0);
        let b = random_tensor(&mut rng, &[cols], -1.0, 1.0);
        let mut g = Graph::new();
        let (na, nb) = (g.constant(a.clone()), g.constant(b.clone()));
        let c = g.add(na, nb).unwrap();
        for i in 0..rows {
            for j in 0..cols {
                prop_assert_eq!(g.value(c).at(&[i, j]), a.at(&[i, j]) + b.at(&[j]));
            }
        }
    }

    #[test]
    fn transpose_twice_is_identity(d0 in 1usize..4, d1 in 1usize..4, d2 in 1usize..4, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_tensor(&mut rng, &[d0, d1, d2], -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.constant(a.clone());
        let t = g.transpose(x, 0, 2).unwrap();
        let back = g.transpose(t, 0, 2).unwrap();
        prop_assert_eq!(g.value(back), &a);
    }
}
