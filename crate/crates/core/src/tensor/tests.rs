use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{self, check, weighted_readout, STEP, TOLERANCE};
use super::*;

fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.at(i, p) * b.at(p, j);
            }
            out[i * n + j] = acc;
        }
    }
    out
}

#[test]
fn matmul_identity() {
    let g = Graph::new();
    let i = g.constant(Tensor::eye(2));
    let m = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let out = g.value(g.matmul(i, m).unwrap());
    assert_eq!(out.data(), &[1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_zero_annihilates() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Graph::new();
    let z = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
    let out = g.value(g.matmul(z, b).unwrap());
    assert_eq!(out.shape(), &[2, 4]);
    assert!(out.data().iter().all(|&x| x == 0.0));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let a = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let g = Graph::new();
        let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
        let out = g.value(g.matmul(va, vb).unwrap());
        for (x, y) in out.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
}

#[test]
fn matmul_backward_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
    let b = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let g = Graph::new();
    let (va, vb) = (g.leaf(a.clone(), true), g.leaf(b.clone(), true));
    let c = g.matmul(va, vb).unwrap();
    let loss = g.sum(c);
    g.backward(loss).unwrap();
    // with upstream all-ones: grad_a[i][p] = Σ_j b[p][j], grad_b[p][j] = Σ_i a[i][p]
    let ga = g.grad(va).unwrap();
    let gb = g.grad(vb).unwrap();
    for i in 0..2 {
        for p in 0..3 {
            let want: f64 = (0..4).map(|j| b.at(p, j)).sum();
            assert!((ga.at(i, p) - want).abs() < 1e-12);
        }
    }
    for p in 0..3 {
        for j in 0..4 {
            let want: f64 = (0..2).map(|i| a.at(i, p)).sum();
            assert!((gb.at(p, j) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn softmax_uniform_logits() {
    let g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3]));
    let y = g.value(g.softmax(x, 0).unwrap());
    for &p in y.data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_shift_invariant() {
    let g = Graph::new();
    let a = g.constant(Tensor::vector(vec![0.0, 0.25, -1.5]).unwrap());
    let b = g.constant(Tensor::vector(vec![100.0, 100.25, 98.5]).unwrap());
    let ya = g.value(g.softmax(a, 0).unwrap());
    let yb = g.value(g.softmax(b, 0).unwrap());
    assert!(ya.max_abs_diff(&yb) < 1e-15);
}

#[test]
fn softmax_matches_extended_precision() {
    // 50-digit reference values
    let want = [
        0.090_030_573_170_380_457_998,
        0.244_728_471_054_797_652_473,
        0.665_240_955_774_821_889_529,
    ];
    let g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.value(g.softmax(x, 0).unwrap());
    for (p, w) in y.data().iter().zip(want) {
        assert!((p - w).abs() < 1e-15, "{p} vs {w}");
    }
}

#[test]
fn softmax_rejects_non_finite() {
    let g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, f64::NAN]).unwrap());
    assert!(matches!(g.softmax(x, 0), Err(crate::Error::Numeric(_))));
}

#[test]
fn backward_of_sum_is_ones() {
    let g = Graph::new();
    let w = g.leaf(Tensor::vector(vec![0.3, -2.0, 5.0]).unwrap(), true);
    let loss = g.sum(w);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square() {
    let g = Graph::new();
    let w = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
    let sq = g.mul(w, w).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(w).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn backward_rejects_non_scalar_seed() {
    let g = Graph::new();
    let w = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
    let y = g.tanh(w);
    assert!(matches!(g.backward(y), Err(crate::Error::Contract(_))));
}

#[test]
fn fan_out_accumulates_per_path() {
    // loss = sum(tanh(w)) + sum(3w) + sum(w ⊙ w): gradient = sum of per-path terms
    let w0 = Tensor::vector(vec![0.4, -1.1, 0.9]).unwrap();
    let g = Graph::new();
    let w = g.leaf(w0.clone(), true);
    let t = g.sum(g.tanh(w));
    let s = g.sum(g.scale(w, 3.0));
    let q = g.sum(g.mul(w, w).unwrap());
    let loss = g.add(g.add(t, s).unwrap(), q).unwrap();
    g.backward(loss).unwrap();
    let got = g.grad(w).unwrap();
    for (i, &x) in w0.data().iter().enumerate() {
        let want = (1.0 - x.tanh().powi(2)) + 3.0 + 2.0 * x;
        assert!((got.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn constants_never_accumulate_gradient() {
    let g = Graph::new();
    let w = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
    let c = g.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
    let loss = g.sum(g.mul(w, c).unwrap());
    g.backward(loss).unwrap();
    assert!(g.grad(c).is_none());
    assert_eq!(g.grad(w).unwrap().data(), &[3.0, 4.0]);
}

#[test]
fn params_bind_once_and_accumulate() {
    let p = Tensor::vector(vec![1.0, -1.0]).unwrap();
    let g = Graph::new();
    let a = g.param("w", &p);
    let b = g.param("w", &p);
    assert_eq!(a, b);
    let loss = g.sum(g.add(a, b).unwrap());
    g.backward(loss).unwrap();
    let grads = g.param_grads();
    assert_eq!(grads.len(), 1);
    assert_eq!(grads[0].1.data(), &[2.0, 2.0]);
}

#[test]
fn relu_values() {
    let g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 2.0]).unwrap());
    assert_eq!(g.value(g.relu(x)).data(), &[0.0, 2.0]);
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let g = Graph::new();
    let x = g.constant(Tensor::full(&[5], 3.25));
    let y = g.value(g.layer_norm(x, 1e-5));
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn dropout_is_identity_in_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let g = Graph::new();
    let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
    let y = g.dropout(x, 0.9, false, &mut rng);
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0]);
}

#[test]
fn broadcast_incompatible_is_dimension_error() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.add(a, b), Err(crate::Error::Shape { .. })));
}

#[test]
fn embedding_rejects_out_of_range() {
    let g = Graph::new();
    let t = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.embedding(t, &[3]).is_err());
}

#[test]
fn every_op_passes_finite_differences() {
    let reports = gradcheck::run_op_suite(17, 100).unwrap();
    for (name, r) in reports {
        assert!(r.passed(TOLERANCE), "{name}: {:?}", r);
        assert!(r.entries >= 100);
    }
}

#[test]
fn composite_graph_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let w = Tensor::randn(&[4, 4], 0.5, &mut rng);
        let b = Tensor::randn(&[4], 0.5, &mut rng);
        let r = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let report = check(
            &[x, w, b],
            |g, v| {
                let h = g.add(g.matmul(v[0], v[1])?, v[2])?;
                let h = g.layer_norm(g.tanh(h), 1e-5);
                let p = g.softmax(h, 1)?;
                let lp = g.clamped_log(p, 1e-12);
                weighted_readout(g, lp, &r)
            },
            STEP,
        )
        .unwrap();
        assert!(report.passed(TOLERANCE), "{report:?}");
    }
}

#[test]
fn identical_inputs_are_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Graph::new();
        let x = g.leaf(Tensor::randn(&[4, 4], 1.0, &mut rng), true);
        let y = g.dropout(g.tanh(g.matmul(x, x).unwrap()), 0.3, true, &mut rng);
        let s = g.softmax(y, 1).unwrap();
        let loss = g.sum(g.clamped_log(s, 1e-12));
        g.backward(loss).unwrap();
        (g.value(s), g.grad(x).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bit_eq(&b));
    assert!(ga.bit_eq(&gb));
}

proptest! {
    #[test]
    fn softmax_rows_are_probability_vectors(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        scale in 0.1f64..30.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Graph::new();
        let x = g.constant(Tensor::randn(&[rows, cols], scale, &mut rng));
        let y = g.value(g.softmax(x, 1).unwrap());
        for r in 0..rows {
            let row = y.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn broadcast_add_matches_explicit_expansion(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4], 1.0, &mut rng);
        let g = Graph::new();
        let out = g.value(g.add(g.constant(a.clone()), g.constant(b.clone())).unwrap());
        for i in 0..3 {
            for j in 0..4 {
                prop_assert_eq!(out.at(i, j), a.at(i, j) + b.data()[j]);
            }
        }
    }
}
