use std::rc::Rc;

use proptest::prelude::*;

use super::*;
use crate::gradcheck::{check_gradients, random_projection};
use crate::rng::SeededRng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Vec<f64> {
    let mut r = SeededRng::new(seed);
    (0..numel(shape)).map(|_| r.normal()).collect()
}

fn param(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::param(shape, randn(shape, seed)).unwrap()
}

fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

// ── matmul ────────────────────────────────────────────────────────────────

#[test]
fn matmul_identity() {
    let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(i2.matmul(&x).unwrap().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn matmul_hand_arithmetic() {
    let a = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
    let b = t(&[2, 2], &[0.0, 1.0, 1.0, 0.0]);
    assert_eq!(a.matmul(&b).unwrap().to_vec(), vec![0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let (a, b) = (randn(&[5, 4], 1), randn(&[4, 3], 2));
    let got = t(&[5, 4], &a).matmul(&t(&[4, 3], &b)).unwrap().to_vec();
    let want = triple_loop(&a, &b, 5, 4, 3);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() < 1e-12, "{g} vs {w}");
    }
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = t(&[2, 3], &[0.0; 6]).matmul(&t(&[2, 3], &[0.0; 6])).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
    assert!(err.starts_with("dimension mismatch"), "{err}");
}

#[test]
fn batched_matmul_and_nt_agree_with_per_matrix_products() {
    let (a, b) = (randn(&[3, 2, 4], 3), randn(&[3, 4, 5], 4));
    let c = t(&[3, 2, 4], &a).matmul(&t(&[3, 4, 5], &b)).unwrap().to_vec();
    for i in 0..3 {
        let want = triple_loop(&a[i * 8..(i + 1) * 8], &b[i * 20..(i + 1) * 20], 2, 4, 5);
        assert_eq!(&c[i * 10..(i + 1) * 10], &want[..]);
    }
    // a · bᵀ via matmul_nt equals a · transpose(b)
    let bt = randn(&[3, 5, 4], 5);
    let nt = t(&[3, 2, 4], &a).matmul_nt(&t(&[3, 5, 4], &bt)).unwrap().to_vec();
    let tr = t(&[3, 5, 4], &bt).permute(&[0, 2, 1]).unwrap();
    let nn = t(&[3, 2, 4], &a).matmul(&tr).unwrap().to_vec();
    for (x, y) in nt.iter().zip(&nn) {
        assert!((x - y).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn matmul_exact_on_integers(
        m in 1usize..6, k in 1usize..6, n in 1usize..6,
        seed in any::<u64>(),
    ) {
        let mut r = SeededRng::new(seed);
        let a: Vec<f64> = (0..m * k).map(|_| r.below(0, 21) as f64 - 10.0).collect();
        let b: Vec<f64> = (0..k * n).map(|_| r.below(0, 21) as f64 - 10.0).collect();
        let got = t(&[m, k], &a).matmul(&t(&[k, n], &b)).unwrap().to_vec();
        prop_assert_eq!(got, triple_loop(&a, &b, m, k, n));
    }

    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..5, cols in 1usize..9, seed in any::<u64>()) {
        let mut r = SeededRng::new(seed);
        let x: Vec<f64> = (0..rows * cols).map(|_| r.uniform_range(-30.0, 30.0)).collect();
        let y = t(&[rows, cols], &x).softmax().unwrap().to_vec();
        for row in y.chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn permute_roundtrip(seed in any::<u64>()) {
        let x = t(&[2, 3, 4], &randn(&[2, 3, 4], seed));
        let back = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        prop_assert_eq!(back.to_vec(), x.to_vec());
    }
}

// ── softmax ───────────────────────────────────────────────────────────────

#[test]
fn softmax_uniform() {
    let y = t(&[1, 4], &[0.0; 4]).softmax().unwrap().to_vec();
    assert_eq!(y, vec![0.25; 4]);
}

#[test]
fn softmax_analytic() {
    let y = t(&[1, 2], &[1f64.ln(), 3f64.ln()]).softmax().unwrap().to_vec();
    assert!((y[0] - 0.25).abs() < 1e-15 && (y[1] - 0.75).abs() < 1e-15);
}

#[test]
fn softmax_large_inputs_do_not_overflow() {
    let y = t(&[1, 2], &[1000.0, 1000.0]).softmax().unwrap().to_vec();
    assert_eq!(y, vec![0.5, 0.5]);
}

#[test]
fn softmax_rejects_nan() {
    let err = t(&[1, 2], &[f64::NAN, 0.0]).softmax().unwrap_err();
    assert!(err.is_numeric());
}

// ── layer norm ────────────────────────────────────────────────────────────

fn ones(c: usize) -> Tensor<f64> {
    Tensor::full(&[c], 1.0)
}

#[test]
fn layer_norm_constant_token_is_zero() {
    let y = t(&[1, 4], &[3.0; 4]).layer_norm(&ones(4), &Tensor::zeros(&[4]), 1e-5).unwrap();
    assert!(y.to_vec().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_two_values() {
    let y = t(&[1, 2], &[1.0, -1.0]).layer_norm(&ones(2), &Tensor::zeros(&[2]), 1e-5).unwrap().to_vec();
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((y[0] - s).abs() < 1e-15 && (y[1] + s).abs() < 1e-15);
}

#[test]
fn layer_norm_matches_two_pass_oracle() {
    let c = 7;
    let x = randn(&[3, c], 11);
    let gamma = randn(&[c], 12);
    let beta = randn(&[c], 13);
    let y = t(&[3, c], &x).layer_norm(&t(&[c], &gamma), &t(&[c], &beta), 1e-5).unwrap().to_vec();
    for r in 0..3 {
        let row = &x[r * c..(r + 1) * c];
        let mean: f64 = row.iter().sum::<f64>() / c as f64;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for j in 0..c {
            let want = (row[j] - mean) / (var + 1e-5).sqrt() * gamma[j] + beta[j];
            assert!((y[r * c + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn layer_norm_rejects_wrong_gamma() {
    assert!(t(&[1, 3], &[0.0; 3]).layer_norm(&ones(2), &Tensor::zeros(&[3]), 1e-5).is_err());
}

// ── backward ──────────────────────────────────────────────────────────────

#[test]
fn backward_linear_sum() {
    let w = param(&[3, 2], 7);
    let x = t(&[2, 1], &[0.5, -2.0]);
    w.matmul(&x).unwrap().sum().backward().unwrap();
    let g = w.grad().unwrap();
    for i in 0..3 {
        assert_eq!(g[i * 2], 0.5);
        assert_eq!(g[i * 2 + 1], -2.0);
    }
}

#[test]
fn backward_cross_entropy_uniform_logits() {
    let logits = Tensor::<f64>::param(&[1, 4], vec![0.0; 4]).unwrap();
    let loss = logits.cross_entropy(&[2], None).unwrap();
    assert!((loss.item() - 4f64.ln()).abs() < 1e-15);
    loss.backward().unwrap();
    assert_eq!(logits.grad().unwrap(), vec![0.25, 0.25, -0.75, 0.25]);
}

#[test]
fn backward_requires_scalar() {
    let x = param(&[2], 1);
    let err = x.scale(2.0).backward().unwrap_err();
    assert!(matches!(err, crate::GlamError::Contract(_)));
}

#[test]
fn shared_subexpressions_are_visited_once() {
    // y = (2x) + (2x) reuses one node twice; dy/dx = 4
    let x = param(&[3], 2);
    let a = x.scale(2.0);
    let y = a.add(&a).unwrap();
    assert_eq!(y.graph_size(), 3);
    y.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![4.0; 3]);
}

#[test]
fn leaf_gradients_accumulate_until_cleared() {
    let x = param(&[2], 3);
    x.sum().backward().unwrap();
    x.sum().backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn no_grad_records_nothing() {
    let x = param(&[2], 3);
    let y = no_grad(|| x.scale(3.0));
    assert!(!y.requires_grad());
    assert!(y.is_leaf());
}

#[test]
fn cross_entropy_all_ignored_is_zero_with_zero_grad() {
    let logits = param(&[3, 4], 9);
    let loss = logits.cross_entropy(&[7, 7, 7], Some(7)).unwrap();
    assert_eq!(loss.item(), 0.0);
    loss.backward().unwrap();
    assert!(logits.grad().unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn finite_differences_every_op() {
    let a = param(&[2, 3, 4], 21);
    let b = param(&[4, 5], 22);
    let c = param(&[2, 3, 4], 23);
    let gamma = param(&[5], 24);
    let beta = param(&[5], 25);
    let bias = param(&[5], 26);
    let params = vec![
        ("a".to_string(), a.clone()),
        ("b".to_string(), b.clone()),
        ("c".to_string(), c.clone()),
        ("gamma".to_string(), gamma.clone()),
        ("beta".to_string(), beta.clone()),
        ("bias".to_string(), bias.clone()),
    ];
    let loss = || {
        let x = a.mul(&c)?.sub(&c)?.matmul(&b)?.add_broadcast(&bias)?; // [2,3,5]
        let n = x.layer_norm(&gamma, &beta, 1e-5)?.gelu();
        let s = n.matmul_nt(&x)?.scale(0.3).softmax()?; // [2,3,3]
        let p = s.permute(&[0, 2, 1])?.reshape(&[2, 9])?;
        let q = Tensor::cat(&[p.narrow(1, 2, 4)?, x.reshape(&[2, 15])?], 1)?;
        let idx = Rc::new(vec![0, 3, 3, 7, 18, 20]);
        let gsum = q.gather(idx, &[2, 3])?.cross_entropy(&[1, 2], None)?;
        Ok(random_projection(&q, 5)?.add(&gsum)?)
    };
    for r in check_gradients(&params, loss, 40, 0).unwrap() {
        assert!(r.passed(), "{}: rel err {} at {:?}", r.name, r.max_rel_error, r.worst);
    }
}

#[test]
fn precision_modes() {
    assert_eq!(<f64 as Scalar>::PRECISION, Precision::Checking);
    assert_eq!(<f32 as Scalar>::PRECISION, Precision::Training);
}
