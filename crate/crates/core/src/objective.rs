//! Client-local and federated DeepGMM objectives.
//!
//! For a client with `n` samples,
//!
//! ```text
//! psi    = 1/n sum_k f(z_k; tau) (y_k - g(x_k; theta))
//! c_quad = 1/n sum_k f(z_k; tau)^2 (y_k - g(x_k; theta_tilde))^2
//! U      = psi - c_quad / 4
//! ```
//!
//! and the federated objective is the unweighted mean of `U` over clients.
//! `theta_tilde` only sets the weighting and is held constant in every
//! gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{backward_raw, forward_raw, ParamVector, Workspace};
use crate::scenario::ClientShard;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MomentEval {
    pub psi: f64,
    pub c_quad: f64,
    pub u_value: f64,
    pub n: usize,
}

/// When the weighting anchor `theta_tilde` is refreshed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TildeSchedule {
    /// Global `theta` broadcast at the start of the current round.
    #[default]
    PrevRound,
    /// The initial `theta`, never refreshed.
    Frozen,
    /// Refreshed at the start of rounds `1, k+1, 2k+1, ...`.
    EveryK(usize),
}

impl TildeSchedule {
    /// Whether the anchor is refreshed at the start of 1-based `round`.
    pub fn refresh_at(self, round: usize) -> bool {
        match self {
            TildeSchedule::PrevRound => true,
            TildeSchedule::Frozen => false,
            TildeSchedule::EveryK(k) => (round.saturating_sub(1)) % k.max(1) == 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TildeAnchor {
    pub theta_tilde: ParamVector,
    pub schedule: TildeSchedule,
}

impl TildeAnchor {
    pub fn new(theta_tilde: ParamVector, schedule: TildeSchedule) -> Self {
        Self {
            theta_tilde,
            schedule,
        }
    }

    /// Applies the schedule at the start of `round` with the broadcast
    /// `theta`.
    pub fn advance(&mut self, round: usize, theta: &ParamVector) {
        if self.schedule.refresh_at(round) {
            self.theta_tilde = theta.clone();
        }
    }
}

fn check_shard(shard: &ClientShard, theta: &ParamVector, tau: &ParamVector) -> Result<()> {
    if shard.is_empty() {
        return Err(Error::EmptyShard);
    }
    if theta.spec().input_width() != 1 {
        return Err(Error::DimensionMismatch {
            what: "g-network input",
            expected: 1,
            got: theta.spec().input_width(),
        });
    }
    if tau.spec().input_width() != 2 {
        return Err(Error::DimensionMismatch {
            what: "f-network input",
            expected: 2,
            got: tau.spec().input_width(),
        });
    }
    for (what, p) in [("g-network output", theta), ("f-network output", tau)] {
        if p.spec().output_width() != 1 {
            return Err(Error::DimensionMismatch {
                what,
                expected: 1,
                got: p.spec().output_width(),
            });
        }
    }
    Ok(())
}

fn finite(v: f64, what: &'static str, index: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what, index })
    }
}

/// `y_k - g(x_k; theta)` for every sample.
pub fn residuals(theta: &ParamVector, shard: &ClientShard) -> Result<Vec<f64>> {
    if shard.is_empty() {
        return Err(Error::EmptyShard);
    }
    if theta.spec().input_width() != 1 || theta.spec().output_width() != 1 {
        return Err(Error::DimensionMismatch {
            what: "g-network shape",
            expected: 1,
            got: theta.spec().input_width().max(theta.spec().output_width()),
        });
    }
    let spec = theta.spec();
    let mut ws = Workspace::new(spec);
    shard
        .x
        .iter()
        .zip(&shard.y)
        .enumerate()
        .map(|(k, (&x, &y))| {
            let g = finite(forward_raw(spec, theta.values(), &[x], &mut ws), "g-network output", k)?;
            Ok(y - g)
        })
        .collect()
}

/// Squared anchor residuals `(y_k - g(x_k; theta_tilde))^2`, the only place
/// `theta_tilde` enters. Fixed for a whole round, so callers cache it.
pub fn tilde_weights(theta_tilde: &ParamVector, shard: &ClientShard) -> Result<Vec<f64>> {
    Ok(residuals(theta_tilde, shard)?
        .into_iter()
        .map(|r| r * r)
        .collect())
}

/// Objective and gradients of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientEval {
    pub moments: MomentEval,
    pub grad_theta: Vec<f64>,
    pub grad_tau: Vec<f64>,
}

/// Single pass over the shard with precomputed anchor weights.
pub(crate) fn eval_with_weights(
    theta: &ParamVector,
    tau: &ParamVector,
    shard: &ClientShard,
    weights: &[f64],
    with_grads: bool,
) -> Result<ClientEval> {
    check_shard(shard, theta, tau)?;
    if weights.len() != shard.n() {
        return Err(Error::DimensionMismatch {
            what: "anchor weights",
            expected: shard.n(),
            got: weights.len(),
        });
    }
    let g_spec = theta.spec();
    let f_spec = tau.spec();
    let mut g_ws = Workspace::new(g_spec);
    let mut f_ws = Workspace::new(f_spec);
    let n = shard.n();
    let inv_n = 1.0 / n as f64;
    let mut psi = 0.0;
    let mut c_quad = 0.0;
    let (mut grad_theta, mut grad_tau) = if with_grads {
        (vec![0.0; theta.len()], vec![0.0; tau.len()])
    } else {
        (Vec::new(), Vec::new())
    };
    for k in 0..n {
        let g = finite(
            forward_raw(g_spec, theta.values(), &[shard.x[k]], &mut g_ws),
            "g-network output",
            k,
        )?;
        let f = finite(
            forward_raw(f_spec, tau.values(), &shard.z[k], &mut f_ws),
            "f-network output",
            k,
        )?;
        let r = shard.y[k] - g;
        let w = weights[k];
        psi += f * r;
        c_quad += f * f * w;
        if with_grads {
            backward_raw(g_spec, theta.values(), &mut g_ws, -f * inv_n, &mut grad_theta);
            backward_raw(
                f_spec,
                tau.values(),
                &mut f_ws,
                (r - 0.5 * f * w) * inv_n,
                &mut grad_tau,
            );
        }
    }
    psi *= inv_n;
    c_quad *= inv_n;
    Ok(ClientEval {
        moments: MomentEval {
            psi,
            c_quad,
            u_value: psi - 0.25 * c_quad,
            n,
        },
        grad_theta,
        grad_tau,
    })
}

pub fn client_objective(
    theta: &ParamVector,
    tau: &ParamVector,
    theta_tilde: &ParamVector,
    shard: &ClientShard,
) -> Result<MomentEval> {
    let w = tilde_weights(theta_tilde, shard)?;
    Ok(eval_with_weights(theta, tau, shard, &w, false)?.moments)
}

/// Exact `(dU/dtheta, dU/dtau)` for one client.
pub fn client_grads(
    theta: &ParamVector,
    tau: &ParamVector,
    theta_tilde: &ParamVector,
    shard: &ClientShard,
) -> Result<(ParamVector, ParamVector)> {
    let w = tilde_weights(theta_tilde, shard)?;
    let eval = eval_with_weights(theta, tau, shard, &w, true)?;
    Ok((
        theta.with_values(eval.grad_theta)?,
        tau.with_values(eval.grad_tau)?,
    ))
}

/// Objective and gradients of one client in one pass.
pub fn client_eval(
    theta: &ParamVector,
    tau: &ParamVector,
    theta_tilde: &ParamVector,
    shard: &ClientShard,
) -> Result<ClientEval> {
    let w = tilde_weights(theta_tilde, shard)?;
    eval_with_weights(theta, tau, shard, &w, true)
}

/// Mean of the client objectives, summed in slice order.
pub fn federated_objective(
    theta: &ParamVector,
    tau: &ParamVector,
    theta_tilde: &ParamVector,
    shards: &[ClientShard],
) -> Result<f64> {
    if shards.is_empty() {
        return Err(Error::NoShards);
    }
    let mut total = 0.0;
    for shard in shards {
        total += client_objective(theta, tau, theta_tilde, shard)?.u_value;
    }
    Ok(total / shards.len() as f64)
}

/// Federated value and gradients (means over clients, slice order).
pub fn federated_eval(
    theta: &ParamVector,
    tau: &ParamVector,
    theta_tilde: &ParamVector,
    shards: &[ClientShard],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if shards.is_empty() {
        return Err(Error::NoShards);
    }
    let mut u = 0.0;
    let mut gt = vec![0.0; theta.len()];
    let mut ga = vec![0.0; tau.len()];
    for shard in shards {
        let e = client_eval(theta, tau, theta_tilde, shard)?;
        u += e.moments.u_value;
        for (a, b) in gt.iter_mut().zip(&e.grad_theta) {
            *a += b;
        }
        for (a, b) in ga.iter_mut().zip(&e.grad_tau) {
            *a += b;
        }
    }
    let inv = 1.0 / shards.len() as f64;
    gt.iter_mut().for_each(|v| *v *= inv);
    ga.iter_mut().for_each(|v| *v *= inv);
    Ok((u * inv, gt, ga))
}

/// Shard-local positions of a uniform sample without replacement of
/// `min(batch_size, n)` rows, in random order.
pub fn minibatch_positions<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<usize> {
    let m = batch_size.max(1).min(n);
    rand::seq::index::sample(rng, n, m).into_vec()
}

pub fn minibatch_view<R: Rng + ?Sized>(
    shard: &ClientShard,
    batch_size: usize,
    rng: &mut R,
) -> ClientShard {
    shard.select(&minibatch_positions(shard.n(), batch_size, rng))
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::{init_params, Activation, InitScheme, MlpSpec};

    fn linear_g(w: f64, b: f64) -> ParamVector {
        let s = Arc::new(MlpSpec::new(vec![1, 1], Activation::Identity).unwrap());
        ParamVector::new(s, vec![w, b]).unwrap()
    }

    fn linear_f(w1: f64, w2: f64, b: f64) -> ParamVector {
        let s = Arc::new(MlpSpec::new(vec![2, 1], Activation::Identity).unwrap());
        ParamVector::new(s, vec![w1, w2, b]).unwrap()
    }

    fn shard(x: Vec<f64>, y: Vec<f64>) -> ClientShard {
        let n = x.len();
        ClientShard {
            client_id: 0,
            z: (0..n).map(|i| [i as f64 * 0.3 - 1.0, 0.5 - i as f64 * 0.1]).collect(),
            x,
            y,
            indices: (0..n).collect(),
        }
    }

    #[test]
    fn zero_network_residuals_are_outcomes() {
        let s = shard(vec![0.4, -1.0], vec![1.0, -2.0]);
        assert_eq!(residuals(&linear_g(0.0, 0.0), &s).unwrap(), vec![1.0, -2.0]);
        assert!(matches!(
            residuals(&linear_g(0.0, 0.0), &shard(vec![], vec![])),
            Err(Error::EmptyShard)
        ));
    }

    #[test]
    fn interpolating_g_has_zero_residuals() {
        let s = shard(vec![0.5, 1.0, -2.0], vec![2.0, 3.0, -3.0]);
        let r = residuals(&linear_g(2.0, 1.0), &s).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_instrument_function_gives_zero_objective() {
        let s = shard(vec![0.5, 1.0], vec![2.0, -1.0]);
        let m = client_objective(&linear_g(0.3, 0.1), &linear_f(0.0, 0.0, 0.0), &linear_g(1.0, 0.0), &s)
            .unwrap();
        assert_eq!((m.psi, m.c_quad, m.u_value), (0.0, 0.0, 0.0));
    }

    #[test]
    fn single_sample_hand_value() {
        let mut s = shard(vec![0.7], vec![2.0]);
        s.z = vec![[0.0, 0.0]];
        // f(z) = bias 1, g = 0 for both theta and theta_tilde
        let m = client_objective(&linear_g(0.0, 0.0), &linear_f(0.0, 0.0, 1.0), &linear_g(0.0, 0.0), &s)
            .unwrap();
        assert_eq!((m.psi, m.c_quad, m.u_value), (2.0, 4.0, 1.0));
    }

    #[test]
    fn grad_theta_vanishes_when_f_is_zero() {
        let s = shard(vec![0.5, 1.0, 3.0], vec![2.0, -1.0, 0.3]);
        let (gt, _) = client_grads(&linear_g(0.3, 0.1), &linear_f(0.0, 0.0, 0.0), &linear_g(1.0, 0.0), &s)
            .unwrap();
        assert!(gt.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grad_tau_vanishes_without_residuals() {
        let s = shard(vec![0.5, 1.0, -2.0], vec![2.0, 3.0, -3.0]);
        let g = linear_g(2.0, 1.0);
        let (_, ga) = client_grads(&g, &linear_f(0.4, -0.7, 0.2), &g, &s).unwrap();
        assert!(ga.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nonfinite_output_names_sample() {
        let mut s = shard(vec![0.5, 1.0, 2.0], vec![2.0, 3.0, -3.0]);
        s.x[2] = f64::INFINITY;
        let err = client_objective(&linear_g(1.0, 0.0), &linear_f(1.0, 1.0, 0.0), &linear_g(0.0, 0.0), &s)
            .unwrap_err();
        // theta_tilde is zero-weighted: inf * 0 is NaN, flagged before the main pass
        assert!(matches!(err, Error::NonFinite { index: 2, .. }));
    }

    #[test]
    fn federated_objective_cases() {
        let g = linear_g(0.5, -0.1);
        let f = linear_f(0.3, 0.2, 0.1);
        let s1 = shard(vec![0.5, 1.0], vec![2.0, -1.0]);
        let one = federated_objective(&g, &f, &g, std::slice::from_ref(&s1)).unwrap();
        assert_eq!(one, client_objective(&g, &f, &g, &s1).unwrap().u_value);
        assert!(matches!(federated_objective(&g, &f, &g, &[]), Err(Error::NoShards)));
    }

    #[test]
    fn minibatch_edge_cases() {
        let s = shard(vec![1.0, 2.0, 3.0, 4.0], vec![0.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let full = minibatch_view(&s, 10, &mut rng);
        let mut idx = full.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);

        let one = shard(vec![5.0], vec![1.0]);
        let b = minibatch_view(&one, 1, &mut rng);
        assert_eq!(b, one);

        let a = minibatch_view(&s, 2, &mut ChaCha8Rng::seed_from_u64(9));
        let c = minibatch_view(&s, 2, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, c);
        assert_eq!(a.n(), 2);
    }

    #[test]
    fn tilde_schedules() {
        assert!(TildeSchedule::PrevRound.refresh_at(7));
        assert!(!TildeSchedule::Frozen.refresh_at(1));
        let k = TildeSchedule::EveryK(3);
        let hits: Vec<usize> = (1..=7).filter(|&r| k.refresh_at(r)).collect();
        assert_eq!(hits, vec![1, 4, 7]);

        let spec = Arc::new(MlpSpec::new(vec![1, 3, 1], Activation::Tanh).unwrap());
        let t0 = init_params(&spec, 1, InitScheme::Kaiming);
        let t1 = init_params(&spec, 2, InitScheme::Kaiming);
        let mut frozen = TildeAnchor::new(t0.clone(), TildeSchedule::Frozen);
        frozen.advance(2, &t1);
        assert_eq!(frozen.theta_tilde, t0);
        let mut prev = TildeAnchor::new(t0, TildeSchedule::PrevRound);
        prev.advance(2, &t1);
        assert_eq!(prev.theta_tilde, t1);
    }
}
