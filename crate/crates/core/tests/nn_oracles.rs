mod common;

use common::*;
use fedgmm::nn::{forward, grad_params, hvp, init_params, InitScheme, ParamVector};
use fedgmm::Activation;
use rand::Rng;

#[test]
fn forward_matches_matrix_chain() {
    let mut r = rng(11);
    for seed in 0..30 {
        let widths: &[usize] = [&[1, 7, 1][..], &[2, 5, 4, 1], &[3, 2, 2, 2, 1]][seed as usize % 3];
        for act in [TANH, LEAKY, Activation::Identity] {
            let p = random_params(widths, act, seed, 1.5);
            let input: Vec<f64> = (0..widths[0]).map(|_| r.random_range(-3.0..3.0)).collect();
            let got = forward(&p, &input).unwrap();
            let want = oracle_forward(&p, &input);
            assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
        }
    }
}

#[test]
fn grad_params_matches_finite_differences() {
    let mut r = rng(5);
    let mut checked = 0;
    for seed in 0..20 {
        // 2 hidden layers, 61 params
        let p = random_params(&[2, 6, 4, 1], TANH, seed, 1.0);
        let input = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
        let upstream = r.random_range(-2.0..2.0);
        let g = grad_params(&p, &input, upstream).unwrap();
        let fd = fd_grad(p.values(), 1e-5, |v| {
            upstream * forward(&p.with_values(v.to_vec()).unwrap(), &input).unwrap()
        });
        let err = max_rel_err(g.values(), &fd, FD_FLOOR);
        assert!(err <= 1e-5, "seed {seed}: rel err {err}");
        checked += 1;
    }
    assert!(checked >= 10);
}

#[test]
fn grad_params_leaky_away_from_kinks() {
    let mut r = rng(8);
    for seed in 0..20 {
        let p = random_params(&[1, 20, 3, 1], LEAKY, seed, 1.0);
        let x = [r.random_range(-2.0..2.0)];
        let g = grad_params(&p, &x, 1.0).unwrap();
        let fd = fd_grad(p.values(), 1e-6, |v| {
            forward(&p.with_values(v.to_vec()).unwrap(), &x).unwrap()
        });
        assert!(max_rel_err(g.values(), &fd, FD_FLOOR) <= 1e-5, "seed {seed}");
    }
}

#[test]
fn grad_params_is_bitwise_deterministic() {
    let p = random_params(&[2, 5, 1], LEAKY, 3, 1.0);
    let a = grad_params(&p, &[0.3, -1.2], 0.7).unwrap();
    let b = grad_params(&p, &[0.3, -1.2], 0.7).unwrap();
    assert_eq!(a, b);
    let zero = grad_params(&p, &[0.3, -1.2], 0.0).unwrap();
    assert!(zero.values().iter().all(|&v| v == 0.0));
}

#[test]
fn kaiming_bound_independent_check() {
    let s = spec(&[2, 3, 1], LEAKY);
    let p = init_params(&s, 1, InitScheme::Kaiming);
    // layer 1: 6 weights then 3 biases; layer 2: 3 weights then 1 bias
    let v = p.values();
    let b1 = (6.0f64 / 2.0).sqrt();
    let b2 = (6.0f64 / 3.0).sqrt();
    assert!(v[0..6].iter().all(|w| w.abs() <= b1));
    assert!(v[6..9].iter().all(|&b| b == 0.0));
    assert!(v[9..12].iter().all(|w| w.abs() <= b2));
    assert_eq!(v[12], 0.0);
    assert!(v[0..6].iter().any(|w| w.abs() > 0.0));
}

/// Hessian of the scalar output by second differences of the output
/// itself, independent of any gradient code.
fn dense_hessian_oracle(p: &ParamVector, input: &[f64], h: f64) -> Vec<Vec<f64>> {
    let n = p.len();
    let f = |v: &[f64]| forward(&p.with_values(v.to_vec()).unwrap(), input).unwrap();
    let base = p.values().to_vec();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let mut q = base.clone();
            let mut eval = |si: f64, sj: f64| {
                q.copy_from_slice(&base);
                q[i] += si * h;
                q[j] += sj * h;
                f(&q)
            };
            out[i][j] = (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                / (4.0 * h * h);
        }
    }
    out
}

#[test]
fn hvp_matches_dense_hessian_on_tiny_net() {
    let mut r = rng(21);
    for seed in 0..5 {
        let p = random_params(&[2, 4, 1], TANH, seed, 1.0); // 17 params
        let input = [r.random_range(-1.5..1.5), r.random_range(-1.5..1.5)];
        let v: Vec<f64> = (0..p.len()).map(|_| r.random_range(-1.0..1.0)).collect();
        let grad = |w: &[f64]| grad_params(&p.with_values(w.to_vec())?, &input, 1.0).map(|g| g.into_values());
        let hv = hvp(p.values(), grad, &v).unwrap();
        let hd = dense_hessian_oracle(&p, &input, 1e-3);
        let want: Vec<f64> = hd
            .iter()
            .map(|row| row.iter().zip(&v).map(|(a, b)| a * b).sum())
            .collect();
        let scale = want.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in hv.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-4 * scale, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn hvp_zero_vector_gives_zero() {
    let p = random_params(&[1, 3, 1], TANH, 2, 1.0);
    let grad = |w: &[f64]| grad_params(&p.with_values(w.to_vec())?, &[0.4], 1.0).map(|g| g.into_values());
    let out = hvp(p.values(), grad, &vec![0.0; p.len()]).unwrap();
    assert!(out.iter().all(|&v| v.abs() < 1e-12));
}
