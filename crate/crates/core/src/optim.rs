//! Local update rules: simultaneous GDA, minibatch SGDA and Optimistic Adam.
//!
//! `theta` always descends and `tau` always ascends.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::objective::{eval_with_weights, minibatch_positions, tilde_weights};
use crate::scenario::ClientShard;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Gda,
    Sgda { batch_size: usize },
    #[serde(rename = "oadam")]
    OAdam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const OADAM_DEFAULT: OptimizerKind = OptimizerKind::OAdam {
        beta1: 0.5,
        beta2: 0.9,
        eps: 1e-8,
    };

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Gda => "gda",
            OptimizerKind::Sgda { .. } => "sgda",
            OptimizerKind::OAdam { .. } => "oadam",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr_theta: f64,
    pub lr_tau: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, lr_theta: f64, lr_tau: f64) -> Result<Self> {
        let cfg = Self {
            kind,
            lr_theta,
            lr_tau,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Learning rates `(eta / gamma, eta)`.
    pub fn with_ratio(kind: OptimizerKind, eta: f64, gamma: f64) -> Result<Self> {
        if !(gamma >= 1.0) {
            return Err(Error::config("optimizer.gamma", format!("must be >= 1, got {gamma}")));
        }
        Self::new(kind, eta / gamma, eta)
    }

    pub fn validate(&self) -> Result<()> {
        for (path, lr) in [
            ("optimizer.lr_theta", self.lr_theta),
            ("optimizer.lr_tau", self.lr_tau),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::config(path, format!("must be positive, got {lr}")));
            }
        }
        match self.kind {
            OptimizerKind::Sgda { batch_size: 0 } => {
                Err(Error::config("optimizer.batch_size", "must be at least 1"))
            }
            OptimizerKind::OAdam { beta1, beta2, eps } => {
                if !(0.0..1.0).contains(&beta1) {
                    return Err(Error::config("optimizer.beta1", "must lie in [0, 1)"));
                }
                if !(0.0..1.0).contains(&beta2) {
                    return Err(Error::config("optimizer.beta2", "must lie in [0, 1)"));
                }
                if !(eps >= 0.0) {
                    return Err(Error::config("optimizer.eps", "must be non-negative"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn check_aligned(p: &ParamVector, g: &[f64], what: &'static str) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::DimensionMismatch {
            what,
            expected: p.len(),
            got: g.len(),
        });
    }
    Ok(())
}

fn check_finite(v: &[f64], what: &'static str) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

pub(crate) fn gda_in_place(
    theta: &mut ParamVector,
    tau: &mut ParamVector,
    grad_theta: &[f64],
    grad_tau: &[f64],
    cfg: &OptimizerConfig,
) -> Result<()> {
    check_aligned(theta, grad_theta, "theta gradient")?;
    check_aligned(tau, grad_tau, "tau gradient")?;
    for (w, g) in theta.values_mut().iter_mut().zip(grad_theta) {
        *w -= cfg.lr_theta * g;
    }
    for (w, g) in tau.values_mut().iter_mut().zip(grad_tau) {
        *w += cfg.lr_tau * g;
    }
    check_finite(theta.values(), "theta after update")?;
    check_finite(tau.values(), "tau after update")
}

/// One simultaneous descent/ascent step from pre-update gradients.
pub fn gda_step(
    theta: &ParamVector,
    tau: &ParamVector,
    grad_theta: &ParamVector,
    grad_tau: &ParamVector,
    cfg: &OptimizerConfig,
) -> Result<(ParamVector, ParamVector)> {
    let mut theta = theta.clone();
    let mut tau = tau.clone();
    gda_in_place(&mut theta, &mut tau, grad_theta.values(), grad_tau.values(), cfg)?;
    Ok((theta, tau))
}

/// GDA on one minibatch drawn from `rng`. Anchor residuals are taken on the
/// same minibatch.
pub fn sgda_step<R: Rng + ?Sized>(
    theta: &ParamVector,
    tau: &ParamVector,
    shard: &ClientShard,
    theta_tilde: &ParamVector,
    cfg: &OptimizerConfig,
    rng: &mut R,
) -> Result<(ParamVector, ParamVector)> {
    let OptimizerKind::Sgda { batch_size } = cfg.kind else {
        return Err(Error::Precondition("sgda_step needs an SGDA config".into()));
    };
    let batch = shard.select(&minibatch_positions(shard.n(), batch_size, rng));
    let weights = tilde_weights(theta_tilde, &batch)?;
    let eval = eval_with_weights(theta, tau, &batch, &weights, true)?;
    let mut theta = theta.clone();
    let mut tau = tau.clone();
    gda_in_place(&mut theta, &mut tau, &eval.grad_theta, &eval.grad_tau, cfg)?;
    Ok((theta, tau))
}

#[derive(Debug, Clone, PartialEq)]
struct AdamBlock {
    m: Vec<f64>,
    v: Vec<f64>,
    prev_step: Vec<f64>,
}

impl AdamBlock {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            prev_step: vec![0.0; n],
        }
    }

    /// Moves `w` by `-lr * (2 s_t - s_{t-1})` for the descent gradient `g`.
    fn apply(&mut self, w: &mut [f64], g: &[f64], t: i32, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for i in 0..w.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let denom = v_hat.sqrt() + eps;
            let s = if denom > 0.0 { m_hat / denom } else { 0.0 };
            w[i] -= lr * (2.0 * s - self.prev_step[i]);
            self.prev_step[i] = s;
        }
    }
}

/// Optimistic Adam moments for one client.
#[derive(Debug, Clone, PartialEq)]
pub struct OAdamState {
    theta: AdamBlock,
    tau: AdamBlock,
    pub t: u64,
}

impl OAdamState {
    pub fn new(n_theta: usize, n_tau: usize) -> Self {
        Self {
            theta: AdamBlock::new(n_theta),
            tau: AdamBlock::new(n_tau),
            t: 0,
        }
    }

    pub fn m_theta(&self) -> &[f64] {
        &self.theta.m
    }
    pub fn v_theta(&self) -> &[f64] {
        &self.theta.v
    }
    pub fn m_tau(&self) -> &[f64] {
        &self.tau.m
    }
    pub fn v_tau(&self) -> &[f64] {
        &self.tau.v
    }
    pub fn prev_step_theta(&self) -> &[f64] {
        &self.theta.prev_step
    }
    pub fn prev_step_tau(&self) -> &[f64] {
        &self.tau.prev_step
    }
}

pub(crate) fn oadam_in_place(
    theta: &mut ParamVector,
    tau: &mut ParamVector,
    grad_theta: &[f64],
    grad_tau: &[f64],
    state: &mut OAdamState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let OptimizerKind::OAdam { beta1, beta2, eps } = cfg.kind else {
        return Err(Error::Precondition("oadam_step needs an OAdam config".into()));
    };
    check_aligned(theta, grad_theta, "theta gradient")?;
    check_aligned(tau, grad_tau, "tau gradient")?;
    if state.theta.m.len() != theta.len() || state.tau.m.len() != tau.len() {
        return Err(Error::DimensionMismatch {
            what: "oadam state",
            expected: theta.len() + tau.len(),
            got: state.theta.m.len() + state.tau.m.len(),
        });
    }
    state.t += 1;
    let t = i32::try_from(state.t).unwrap_or(i32::MAX);
    state
        .theta
        .apply(theta.values_mut(), grad_theta, t, cfg.lr_theta, beta1, beta2, eps);
    // ascent on tau is descent on -grad
    let neg: Vec<f64> = grad_tau.iter().map(|g| -g).collect();
    state
        .tau
        .apply(tau.values_mut(), &neg, t, cfg.lr_tau, beta1, beta2, eps);
    check_finite(&state.theta.m, "oadam first moment")?;
    check_finite(&state.tau.v, "oadam second moment")?;
    check_finite(theta.values(), "theta after update")?;
    check_finite(tau.values(), "tau after update")
}

pub fn oadam_step(
    theta: &ParamVector,
    tau: &ParamVector,
    grad_theta: &ParamVector,
    grad_tau: &ParamVector,
    state: &OAdamState,
    cfg: &OptimizerConfig,
) -> Result<(ParamVector, ParamVector, OAdamState)> {
    let mut theta = theta.clone();
    let mut tau = tau.clone();
    let mut state = state.clone();
    oadam_in_place(
        &mut theta,
        &mut tau,
        grad_theta.values(),
        grad_tau.values(),
        &mut state,
        cfg,
    )?;
    Ok((theta, tau, state))
}
