#![allow(dead_code)]

use std::sync::Arc;

use fedgmm::nn::{init_params, Activation, InitScheme, MlpSpec, ParamVector};
use fedgmm::ClientShard;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn spec(widths: &[usize], act: Activation) -> Arc<MlpSpec> {
    Arc::new(MlpSpec::new(widths.to_vec(), act).unwrap())
}

pub fn random_params(widths: &[usize], act: Activation, seed: u64, scale: f64) -> ParamVector {
    init_params(&spec(widths, act), seed, InitScheme::Uniform(scale))
}

fn act_value(act: Activation, x: f64) -> f64 {
    match act {
        Activation::LeakyRelu { slope } => {
            if x >= 0.0 {
                x
            } else {
                slope * x
            }
        }
        Activation::Tanh => x.tanh(),
        Activation::Identity => x,
    }
}

/// Matrix-chain evaluation straight from the documented layout.
pub fn oracle_forward(p: &ParamVector, input: &[f64]) -> f64 {
    let widths = p.spec().layer_widths();
    let act = p.spec().hidden_activation();
    let v = p.values();
    let mut h = DVector::from_column_slice(input);
    let mut off = 0;
    for l in 0..widths.len() - 1 {
        let (i, o) = (widths[l], widths[l + 1]);
        let w = DMatrix::from_row_slice(o, i, &v[off..off + i * o]);
        let b = DVector::from_column_slice(&v[off + i * o..off + i * o + o]);
        off += i * o + o;
        h = w * h + b;
        if l + 2 < widths.len() {
            h.apply(|x| *x = act_value(act, *x));
        }
    }
    h[0]
}

pub fn random_shard(id: usize, n: usize, seed: u64) -> ClientShard {
    let mut r = rng(seed);
    let x: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
    let y: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
    let z: Vec<[f64; 2]> = (0..n)
        .map(|_| [r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)])
        .collect();
    ClientShard {
        client_id: id,
        x,
        y,
        z,
        indices: (0..n).collect(),
    }
}

pub const TANH: Activation = Activation::Tanh;
pub const LEAKY: Activation = Activation::LeakyRelu { slope: 0.1 };

/// Random `(theta, tau, theta_tilde)` on small nets.
pub fn random_triple(seed: u64, act: Activation) -> (ParamVector, ParamVector, ParamVector) {
    (
        random_params(&[1, 5, 3, 1], act, seed, 0.8),
        random_params(&[2, 4, 1], act, seed + 1000, 0.8),
        random_params(&[1, 5, 3, 1], act, seed + 2000, 0.8),
    )
}

/// Central finite-difference gradient of `f` at `x`.
pub fn fd_grad(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let dn = f(&p);
            p[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// Denominator floor for relative errors against step-1e-5 central
/// differences. Their rounding noise is about `eps |f| / h`, roughly 1e-11,
/// so coordinates below this size are held to about 1e-10 absolute.
pub const FD_FLOOR: f64 = 1e-5;

/// Largest per-coordinate relative error, with `floor` guarding
/// coordinates that are (near) zero in both vectors.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `U^i` by plain per-sample loops over the oracle forward pass.
pub fn brute_objective(
    theta: &ParamVector,
    tau: &ParamVector,
    tilde: &ParamVector,
    shard: &ClientShard,
) -> (f64, f64, f64) {
    let n = shard.x.len() as f64;
    let mut psi = 0.0;
    for k in 0..shard.x.len() {
        let f = oracle_forward(tau, &shard.z[k]);
        psi += f * (shard.y[k] - oracle_forward(theta, &[shard.x[k]]));
    }
    let mut c = 0.0;
    for k in 0..shard.x.len() {
        let f = oracle_forward(tau, &shard.z[k]);
        let r = shard.y[k] - oracle_forward(tilde, &[shard.x[k]]);
        c += f * f * r * r;
    }
    (psi / n, c / n, psi / n - 0.25 * c / n)
}
