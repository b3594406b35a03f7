//! In-process federated gradient descent ascent.
//!
//! Each round the server broadcasts `(theta_t, tau_t)`, every client runs
//! `R` local optimizer steps from it, and the server moves the global model
//! by the mean client displacement. All clients participate in every round.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate_mse, MetricsRecord};
use crate::nn::{norm2, ParamVector};
use crate::objective::{
    eval_with_weights, federated_eval, minibatch_positions, tilde_weights, TildeAnchor,
    TildeSchedule,
};
use crate::optim::{gda_in_place, oadam_in_place, OAdamState, OptimizerConfig, OptimizerKind};
use crate::scenario::{ClientShard, IvDataset, ResponseKind};
use crate::seeds::client_round_seed;

/// Local iterates beyond this sup-norm abort the round.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    pub n_clients: usize,
    pub local_steps: usize,
    pub rounds: usize,
    pub optimizer: OptimizerConfig,
    pub tilde_schedule: TildeSchedule,
    pub seed: u64,
    pub eval_every: usize,
    /// Keep OAdam moments across rounds instead of resetting them.
    pub persist_opt_state: bool,
    /// Run clients of a round on the rayon pool.
    pub parallel: bool,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        for (path, v) in [
            ("data.n_clients", self.n_clients),
            ("fed.local_steps", self.local_steps),
            ("fed.rounds", self.rounds),
            ("fed.eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::config(path, "must be at least 1"));
            }
        }
        if let TildeSchedule::EveryK(0) = self.tilde_schedule {
            return Err(Error::config("fed.tilde_every", "must be at least 1"));
        }
        self.optimizer.validate()
    }
}

/// Parameters at the end of some round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub round: usize,
    pub theta: ParamVector,
    pub tau: ParamVector,
    pub theta_tilde: ParamVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FedState {
    pub theta_global: ParamVector,
    pub tau_global: ParamVector,
    pub anchor: TildeAnchor,
    pub round: usize,
    pub trajectory: Vec<MetricsRecord>,
    pub best: Option<Checkpoint>,
}

impl FedState {
    pub fn new(theta: ParamVector, tau: ParamVector, schedule: TildeSchedule) -> Self {
        Self {
            anchor: TildeAnchor::new(theta.clone(), schedule),
            theta_global: theta,
            tau_global: tau,
            round: 0,
            trajectory: Vec::new(),
            best: None,
        }
    }

    pub fn theta_tilde(&self) -> &ParamVector {
        &self.anchor.theta_tilde
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            round: self.round,
            theta: self.theta_global.clone(),
            tau: self.tau_global.clone(),
            theta_tilde: self.anchor.theta_tilde.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDelta {
    pub client_id: usize,
    pub delta_theta: Vec<f64>,
    pub delta_tau: Vec<f64>,
}

/// `R` local steps from the broadcast state; returns the displacement.
///
/// `opt_state` carries OAdam moments. It is reset to fresh moments on entry
/// unless `cfg.persist_opt_state` is set. The RNG stream for minibatches is
/// derived from `(cfg.seed, client_id, round)`.
pub fn client_local_phase(
    theta_t: &ParamVector,
    tau_t: &ParamVector,
    shard: &ClientShard,
    theta_tilde: &ParamVector,
    cfg: &FedConfig,
    round: usize,
    opt_state: &mut Option<OAdamState>,
) -> Result<ClientDelta> {
    if cfg.local_steps == 0 {
        return Err(Error::config("fed.local_steps", "must be at least 1"));
    }
    let weights = tilde_weights(theta_tilde, shard)?;
    let mut rng = ChaCha8Rng::seed_from_u64(client_round_seed(cfg.seed, shard.client_id, round));
    if matches!(cfg.optimizer.kind, OptimizerKind::OAdam { .. })
        && (!cfg.persist_opt_state || opt_state.is_none())
    {
        *opt_state = Some(OAdamState::new(theta_t.len(), tau_t.len()));
    }

    let mut theta = theta_t.clone();
    let mut tau = tau_t.clone();
    for step in 0..cfg.local_steps {
        let eval = match cfg.optimizer.kind {
            OptimizerKind::Sgda { batch_size } => {
                let pos = minibatch_positions(shard.n(), batch_size, &mut rng);
                let batch = shard.select(&pos);
                let w: Vec<f64> = pos.iter().map(|&p| weights[p]).collect();
                eval_with_weights(&theta, &tau, &batch, &w, true)?
            }
            _ => eval_with_weights(&theta, &tau, shard, &weights, true)?,
        };
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Divergence {
                client: shard.client_id,
                round,
                step: step + 1,
                norm: f64::INFINITY,
            },
            other => other,
        };
        match cfg.optimizer.kind {
            OptimizerKind::OAdam { .. } => {
                let state = opt_state.as_mut().expect("initialized above");
                oadam_in_place(
                    &mut theta,
                    &mut tau,
                    &eval.grad_theta,
                    &eval.grad_tau,
                    state,
                    &cfg.optimizer,
                )
                .map_err(diverged)?;
            }
            _ => gda_in_place(
                &mut theta,
                &mut tau,
                &eval.grad_theta,
                &eval.grad_tau,
                &cfg.optimizer,
            )
            .map_err(diverged)?,
        }
        let norm = theta.norm_inf().max(tau.norm_inf());
        if norm > DIVERGENCE_THRESHOLD {
            return Err(Error::Divergence {
                client: shard.client_id,
                round,
                step: step + 1,
                norm,
            });
        }
    }
    Ok(ClientDelta {
        client_id: shard.client_id,
        delta_theta: theta
            .values()
            .iter()
            .zip(theta_t.values())
            .map(|(a, b)| a - b)
            .collect(),
        delta_tau: tau
            .values()
            .iter()
            .zip(tau_t.values())
            .map(|(a, b)| a - b)
            .collect(),
    })
}

/// Moves the global model by the mean client delta, reduced in ascending
/// client-id order, and advances the round counter.
pub fn sync_round(state: &mut FedState, deltas: &[ClientDelta], n_clients: usize) -> Result<()> {
    if deltas.len() != n_clients {
        return Err(Error::MissingClientDelta {
            expected: n_clients,
            got: deltas.len(),
        });
    }
    let mut order: Vec<&ClientDelta> = deltas.iter().collect();
    order.sort_by_key(|d| d.client_id);
    let mut sum_theta = vec![0.0; state.theta_global.len()];
    let mut sum_tau = vec![0.0; state.tau_global.len()];
    for d in &order {
        if d.delta_theta.len() != sum_theta.len() || d.delta_tau.len() != sum_tau.len() {
            return Err(Error::DimensionMismatch {
                what: "client delta",
                expected: sum_theta.len() + sum_tau.len(),
                got: d.delta_theta.len() + d.delta_tau.len(),
            });
        }
        for (s, v) in sum_theta.iter_mut().zip(&d.delta_theta) {
            *s += v;
        }
        for (s, v) in sum_tau.iter_mut().zip(&d.delta_tau) {
            *s += v;
        }
    }
    let n = n_clients as f64;
    let theta: Vec<f64> = state
        .theta_global
        .values()
        .iter()
        .zip(&sum_theta)
        .map(|(w, s)| w + s / n)
        .collect();
    let tau: Vec<f64> = state
        .tau_global
        .values()
        .iter()
        .zip(&sum_tau)
        .map(|(w, s)| w + s / n)
        .collect();
    state.theta_global = state.theta_global.with_values(theta)?;
    state.tau_global = state.tau_global.with_values(tau)?;
    state.round += 1;
    Ok(())
}

/// Splits evaluated against `g0` when recording metrics.
#[derive(Debug, Clone, Copy)]
pub struct EvalSets<'a> {
    pub train: &'a IvDataset,
    pub val: &'a IvDataset,
    pub test: &'a IvDataset,
    pub response: ResponseKind,
}

fn record(
    state: &FedState,
    shards: &[ClientShard],
    eval: Option<&EvalSets<'_>>,
    run_id: usize,
    seed: u64,
) -> Result<MetricsRecord> {
    let (u, gt, ga) = federated_eval(
        &state.theta_global,
        &state.tau_global,
        state.theta_tilde(),
        shards,
    )?;
    let (train_mse, val_mse, test_mse) = match eval {
        Some(e) => (
            evaluate_mse(&state.theta_global, e.train, e.response)?,
            evaluate_mse(&state.theta_global, e.val, e.response)?,
            evaluate_mse(&state.theta_global, e.test, e.response)?,
        ),
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(MetricsRecord {
        run_id,
        seed,
        round: state.round,
        u_value: u,
        grad_norm_theta: norm2(&gt),
        grad_norm_tau: norm2(&ga),
        train_mse,
        val_mse,
        test_mse,
    })
}

fn log_metrics(
    state: &mut FedState,
    shards: &[ClientShard],
    eval: Option<&EvalSets<'_>>,
    run_id: usize,
    seed: u64,
) -> Result<()> {
    let rec = record(state, shards, eval, run_id, seed)?;
    let improved = match state.trajectory.iter().map(|r| r.val_mse).reduce(f64::min) {
        _ if rec.val_mse.is_nan() => false,
        Some(best) => rec.val_mse < best || best.is_nan(),
        None => true,
    };
    if improved {
        state.best = Some(state.checkpoint());
    }
    state.trajectory.push(rec);
    Ok(())
}

/// Runs `cfg.rounds` synchronization rounds from `(theta, tau)`.
///
/// Metrics are logged before the first round and after every
/// `cfg.eval_every` rounds (always after the last one). With `eval` set the
/// returned state carries the checkpoint with the lowest validation MSE.
pub fn run_federation(
    cfg: &FedConfig,
    theta: ParamVector,
    tau: ParamVector,
    shards: &[ClientShard],
    eval: Option<&EvalSets<'_>>,
    run_id: usize,
) -> Result<FedState> {
    cfg.validate()?;
    if shards.len() != cfg.n_clients {
        return Err(Error::MissingClientDelta {
            expected: cfg.n_clients,
            got: shards.len(),
        });
    }
    if let Some(bad) = shards.iter().position(ClientShard::is_empty) {
        return Err(Error::Precondition(format!("client {bad} has no samples")));
    }
    let mut state = FedState::new(theta, tau, cfg.tilde_schedule);
    let mut opt_states: Vec<Option<OAdamState>> = vec![None; shards.len()];
    log_metrics(&mut state, shards, eval, run_id, cfg.seed)?;

    for t in 1..=cfg.rounds {
        let theta_b = state.theta_global.clone();
        state.anchor.advance(t, &theta_b);
        let tau_b = state.tau_global.clone();
        let tilde = state.anchor.theta_tilde.clone();
        let run_client = |(shard, os): (&ClientShard, &mut Option<OAdamState>)| {
            client_local_phase(&theta_b, &tau_b, shard, &tilde, cfg, t, os)
        };
        let results: Vec<Result<ClientDelta>> = if cfg.parallel {
            shards
                .par_iter()
                .zip(opt_states.par_iter_mut())
                .map(run_client)
                .collect()
        } else {
            shards.iter().zip(opt_states.iter_mut()).map(run_client).collect()
        };
        let deltas = results.into_iter().collect::<Result<Vec<_>>>()?;
        sync_round(&mut state, &deltas, cfg.n_clients)?;
        if t % cfg.eval_every == 0 || t == cfg.rounds {
            log_metrics(&mut state, shards, eval, run_id, cfg.seed)?;
        }
    }
    Ok(state)
}
