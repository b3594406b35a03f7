mod common;

use common::*;
use fedgmm::objective::{
    client_grads, client_objective, federated_eval, federated_objective, minibatch_view, residuals,
};
use fedgmm::ParamVector;

#[test]
fn objective_matches_brute_force_on_50_instances() {
    for seed in 0..50 {
        let act = if seed % 2 == 0 { TANH } else { LEAKY };
        let (theta, tau, tilde) = random_triple(seed, act);
        let shard = random_shard(0, 20, seed + 77);
        let m = client_objective(&theta, &tau, &tilde, &shard).unwrap();
        let (psi, c, u) = brute_objective(&theta, &tau, &tilde, &shard);
        assert!((m.u_value - u).abs() <= 1e-10, "seed {seed}");
        assert!((m.psi - psi).abs() <= 1e-10);
        assert!((m.c_quad - c).abs() <= 1e-10);
        assert!(m.c_quad >= 0.0);
        assert_eq!(m.u_value, m.psi - 0.25 * m.c_quad);
    }
}

#[test]
fn single_sample_hand_value() {
    let g0 = ParamVector::zeros(spec(&[1, 1], fedgmm::Activation::Identity));
    // f(z) = 1 through the bias
    let f1 = ParamVector::new(spec(&[2, 1], fedgmm::Activation::Identity), vec![0.0, 0.0, 1.0]).unwrap();
    let shard = fedgmm::ClientShard {
        client_id: 0,
        x: vec![0.5],
        y: vec![2.0],
        z: vec![[0.1, 0.2]],
        indices: vec![0],
    };
    let m = client_objective(&g0, &f1, &g0, &shard).unwrap();
    assert_eq!((m.psi, m.c_quad, m.u_value), (2.0, 4.0, 1.0));
}

/// Scales the f-network output by `c` through the last layer.
fn scale_output(tau: &ParamVector, c: f64) -> ParamVector {
    let widths = tau.spec().layer_widths();
    let last = widths[widths.len() - 2] * widths[widths.len() - 1] + widths[widths.len() - 1];
    let mut v = tau.values().to_vec();
    let n = v.len();
    v[n - last..].iter_mut().for_each(|w| *w *= c);
    tau.with_values(v).unwrap()
}

#[test]
fn one_dimensional_span_maximizer() {
    let mut checked = 0;
    for seed in 0..40 {
        let (theta, tau, tilde) = random_triple(seed, TANH);
        let shard = random_shard(0, 30, seed + 5);
        let m = client_objective(&theta, &tau, &tilde, &shard).unwrap();
        if m.c_quad <= 1e-12 {
            continue;
        }
        let c_star = 2.0 * m.psi / m.c_quad;
        let at = client_objective(&theta, &scale_output(&tau, c_star), &tilde, &shard).unwrap();
        let want = m.psi * m.psi / m.c_quad;
        assert!((at.u_value - want).abs() <= 1e-8, "seed {seed}: {} vs {want}", at.u_value);
        // scaling acts as c on psi and c^2 on c_quad
        let two = client_objective(&theta, &scale_output(&tau, 2.0), &tilde, &shard).unwrap();
        assert!((two.psi - 2.0 * m.psi).abs() <= 1e-12 * m.psi.abs().max(1.0));
        assert!((two.c_quad - 4.0 * m.c_quad).abs() <= 1e-12 * m.c_quad.max(1.0));
        for d in [-0.1, 0.1] {
            let near = client_objective(&theta, &scale_output(&tau, c_star + d), &tilde, &shard)
                .unwrap();
            assert!(near.u_value <= at.u_value + 1e-12);
        }
        checked += 1;
    }
    assert!(checked >= 10);
}

#[test]
fn client_grads_match_finite_differences() {
    for seed in 0..12 {
        let (theta, tau, tilde) = random_triple(seed, TANH);
        let shard = random_shard(0, 15, seed + 300);
        let (gt, ga) = client_grads(&theta, &tau, &tilde, &shard).unwrap();
        let fd_t = fd_grad(theta.values(), 1e-5, |v| {
            client_objective(&theta.with_values(v.to_vec()).unwrap(), &tau, &tilde, &shard)
                .unwrap()
                .u_value
        });
        let fd_a = fd_grad(tau.values(), 1e-5, |v| {
            client_objective(&theta, &tau.with_values(v.to_vec()).unwrap(), &tilde, &shard)
                .unwrap()
                .u_value
        });
        let et = max_rel_err(gt.values(), &fd_t, FD_FLOOR);
        let ea = max_rel_err(ga.values(), &fd_a, FD_FLOOR);
        assert!(et <= 1e-5 && ea <= 1e-5, "seed {seed}: {et} {ea}");
    }
}

#[test]
fn zero_residual_and_zero_instrument_gradients() {
    let (theta, tau, _) = random_triple(1, TANH);
    let mut shard = random_shard(0, 8, 2);
    shard.y = shard.x.iter().map(|&x| oracle_forward(&theta, &[x])).collect();
    assert!(residuals(&theta, &shard).unwrap().iter().all(|r| r.abs() < 1e-14));
    let (_, ga) = client_grads(&theta, &tau, &theta, &shard).unwrap();
    assert!(ga.values().iter().all(|v| v.abs() < 1e-13));

    let f0 = ParamVector::zeros(tau.spec().clone());
    let (gt, _) = client_grads(&theta, &f0, &theta, &random_shard(0, 8, 3)).unwrap();
    assert!(gt.values().iter().all(|&v| v == 0.0));

    let g0 = ParamVector::zeros(theta.spec().clone());
    let mut s = random_shard(0, 2, 4);
    s.y = vec![1.0, -2.0];
    assert_eq!(residuals(&g0, &s).unwrap(), vec![1.0, -2.0]);
}

#[test]
fn federated_mean_oracle_and_permutation() {
    let (theta, tau, tilde) = random_triple(9, LEAKY);
    let shards: Vec<_> = (0..5).map(|i| random_shard(i, 10 + 3 * i, 40 + i as u64)).collect();
    let want: f64 = shards
        .iter()
        .map(|s| brute_objective(&theta, &tau, &tilde, s).2)
        .sum::<f64>()
        / 5.0;
    let got = federated_objective(&theta, &tau, &tilde, &shards).unwrap();
    assert!((got - want).abs() <= 1e-12);
    let mut rev = shards.clone();
    rev.reverse();
    let got_rev = federated_objective(&theta, &tau, &tilde, &rev).unwrap();
    assert!((got - got_rev).abs() <= 1e-12);
    assert_eq!(got, federated_objective(&theta, &tau, &tilde, &shards).unwrap());
    let (u, _, _) = federated_eval(&theta, &tau, &tilde, &shards).unwrap();
    assert!((u - got).abs() <= 1e-14);
    let one = federated_objective(&theta, &tau, &tilde, &shards[..1]).unwrap();
    assert_eq!(one, client_objective(&theta, &tau, &tilde, &shards[0]).unwrap().u_value);
}

#[test]
fn minibatch_inclusion_is_uniform() {
    let shard = random_shard(0, 50, 1);
    let draws = 10_000;
    let batch = 10;
    let mut counts = vec![0usize; 50];
    let mut r = rng(2024);
    for _ in 0..draws {
        let b = minibatch_view(&shard, batch, &mut r);
        assert_eq!(b.n(), batch);
        let mut seen = b.indices.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), batch, "sampled with replacement");
        for &i in &b.indices {
            counts[i] += 1;
        }
    }
    let p = batch as f64 / 50.0;
    let mean = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    // 50 simultaneous 3-sigma checks would fail ~13% of the time by
    // chance, so each index gets a Bonferroni-style 4 sigma and the whole
    // vector a chi-square test (49 dof, 99.9% quantile 85.35).
    for (i, &c) in counts.iter().enumerate() {
        assert!((c as f64 - mean).abs() <= 4.0 * sigma, "index {i}: {c} vs {mean}");
    }
    let chi2: f64 = counts
        .iter()
        .map(|&c| (c as f64 - mean).powi(2) / (sigma * sigma))
        .sum();
    assert!(chi2 < 85.35, "chi2 {chi2}");
}

#[test]
fn minibatch_degenerate_cases() {
    let shard = random_shard(0, 6, 1);
    let mut r = rng(3);
    let all = minibatch_view(&shard, 100, &mut r);
    let mut idx = all.indices.clone();
    idx.sort();
    assert_eq!(idx, (0..6).collect::<Vec<_>>());
    let one = random_shard(0, 1, 2);
    assert_eq!(minibatch_view(&one, 1, &mut r).x, one.x);
}
