//! Pointwise equilibrium and heterogeneity diagnostics for small models.
//!
//! Everything here works on a [`FederatedGame`]: per-client objectives
//! `U^i(theta, tau)` whose exact gradients are available, and whose mean is
//! the federated objective. Hessians are assembled densely, column by
//! column, from finite differences of those gradients.
//!
//! Dissimilarities are evaluated at the supplied point only ("pointwise
//! dissimilarity"), not as suprema over the parameter space.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{hvp, norm2, ParamVector};
use crate::objective::{eval_with_weights, tilde_weights};
use crate::scenario::ClientShard;

/// Largest joint parameter count for which dense Hessians are assembled.
pub const DENSE_PARAM_LIMIT: usize = 200;

/// Condition number beyond which `d2U/dtau2` counts as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

pub const DEFAULT_TOL: f64 = 1e-4;

/// A zero-sum game split across clients. Points are joint vectors
/// `[theta; tau]`.
pub trait FederatedGame: Sync {
    fn dim_theta(&self) -> usize;
    fn dim_tau(&self) -> usize;
    fn n_clients(&self) -> usize;

    /// `[dU^i/dtheta; dU^i/dtau]` at `point`.
    fn client_gradient(&self, client: usize, point: &[f64]) -> Result<Vec<f64>>;

    fn dim(&self) -> usize {
        self.dim_theta() + self.dim_tau()
    }

    /// Gradient of the federated objective (client mean, index order).
    fn gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim()];
        for i in 0..self.n_clients() {
            for (a, g) in acc.iter_mut().zip(self.client_gradient(i, point)?) {
                *a += g;
            }
        }
        let inv = 1.0 / self.n_clients() as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(acc)
    }
}

/// The DeepGMM game over client shards with a fixed anchor.
pub struct GmmGame<'a> {
    theta: &'a ParamVector,
    tau: &'a ParamVector,
    shards: &'a [ClientShard],
    weights: Vec<Vec<f64>>,
}

impl<'a> GmmGame<'a> {
    /// `theta` and `tau` fix the architectures; their values are ignored
    /// in favour of the point passed to each evaluation.
    pub fn new(
        theta: &'a ParamVector,
        tau: &'a ParamVector,
        theta_tilde: &ParamVector,
        shards: &'a [ClientShard],
    ) -> Result<Self> {
        if shards.is_empty() {
            return Err(Error::NoShards);
        }
        let weights = shards
            .iter()
            .map(|s| tilde_weights(theta_tilde, s))
            .collect::<Result<_>>()?;
        Ok(Self {
            theta,
            tau,
            shards,
            weights,
        })
    }

    /// `[theta; tau]` of the reference parameters.
    pub fn point(&self) -> Vec<f64> {
        let mut p = self.theta.values().to_vec();
        p.extend_from_slice(self.tau.values());
        p
    }
}

impl FederatedGame for GmmGame<'_> {
    fn dim_theta(&self) -> usize {
        self.theta.len()
    }

    fn dim_tau(&self) -> usize {
        self.tau.len()
    }

    fn n_clients(&self) -> usize {
        self.shards.len()
    }

    fn client_gradient(&self, client: usize, point: &[f64]) -> Result<Vec<f64>> {
        check_point(self, point)?;
        let (pt, pa) = point.split_at(self.dim_theta());
        let theta = self.theta.with_values(pt.to_vec())?;
        let tau = self.tau.with_values(pa.to_vec())?;
        let e = eval_with_weights(&theta, &tau, &self.shards[client], &self.weights[client], true)?;
        let mut g = e.grad_theta;
        g.extend(e.grad_tau);
        Ok(g)
    }
}

/// One client of a quadratic game
/// `U = 1/2 th'A th + th'C ta + 1/2 ta'B ta + p'th + q'ta`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticClient {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub p: DVector<f64>,
    pub q: DVector<f64>,
}

impl QuadraticClient {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>) -> Self {
        let (p, q) = (DVector::zeros(a.nrows()), DVector::zeros(b.nrows()));
        Self { a, b, c, p, q }
    }

    pub fn with_linear(mut self, p: DVector<f64>, q: DVector<f64>) -> Self {
        self.p = p;
        self.q = q;
        self
    }

    pub fn scalar(a: f64, b: f64, c: f64) -> Self {
        Self::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, c),
        )
    }
}

/// Closed-form game used for analytic checks.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticGame {
    pub clients: Vec<QuadraticClient>,
}

impl QuadraticGame {
    pub fn new(clients: Vec<QuadraticClient>) -> Result<Self> {
        let first = clients.first().ok_or(Error::NoShards)?;
        let (dt, da) = (first.a.nrows(), first.b.nrows());
        for c in &clients {
            if c.a.shape() != (dt, dt)
                || c.b.shape() != (da, da)
                || c.c.shape() != (dt, da)
                || c.p.len() != dt
                || c.q.len() != da
            {
                return Err(Error::DimensionMismatch {
                    what: "quadratic client blocks",
                    expected: dt + da,
                    got: c.a.nrows() + c.b.nrows(),
                });
            }
        }
        Ok(Self { clients })
    }
}

impl FederatedGame for QuadraticGame {
    fn dim_theta(&self) -> usize {
        self.clients[0].a.nrows()
    }

    fn dim_tau(&self) -> usize {
        self.clients[0].b.nrows()
    }

    fn n_clients(&self) -> usize {
        self.clients.len()
    }

    fn client_gradient(&self, client: usize, point: &[f64]) -> Result<Vec<f64>> {
        check_point(self, point)?;
        let q = &self.clients[client];
        let th = DVector::from_column_slice(&point[..self.dim_theta()]);
        let ta = DVector::from_column_slice(&point[self.dim_theta()..]);
        let gt = &q.a * &th + &q.c * &ta + &q.p;
        let ga = q.c.transpose() * &th + &q.b * &ta + &q.q;
        Ok(gt.iter().chain(ga.iter()).copied().collect())
    }
}

fn check_point<G: FederatedGame + ?Sized>(game: &G, point: &[f64]) -> Result<()> {
    if point.len() != game.dim() {
        return Err(Error::DimensionMismatch {
            what: "joint point",
            expected: game.dim(),
            got: point.len(),
        });
    }
    Ok(())
}

fn check_dense<G: FederatedGame + ?Sized>(game: &G) -> Result<()> {
    if game.dim() > DENSE_PARAM_LIMIT {
        return Err(Error::SizeLimit {
            params: game.dim(),
            limit: DENSE_PARAM_LIMIT,
        });
    }
    Ok(())
}

/// Dense, symmetrized Hessian of a scalar function from its gradient.
pub fn dense_hessian<F>(point: &[f64], grad: F) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = point.len();
    let mut h = DMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        let col = hvp(point, &grad, &e)?;
        e[j] = 0.0;
        for (i, v) in col.into_iter().enumerate() {
            h[(i, j)] = v;
        }
    }
    Ok((&h + h.transpose()) * 0.5)
}

/// Hessian of a game objective split into its four blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct HessianBlocks {
    pub theta_theta: DMatrix<f64>,
    pub theta_tau: DMatrix<f64>,
    pub tau_theta: DMatrix<f64>,
    pub tau_tau: DMatrix<f64>,
}

impl HessianBlocks {
    pub fn from_full(h: &DMatrix<f64>, dim_theta: usize) -> Self {
        let n = h.nrows();
        let da = n - dim_theta;
        Self {
            theta_theta: h.view((0, 0), (dim_theta, dim_theta)).into_owned(),
            theta_tau: h.view((0, dim_theta), (dim_theta, da)).into_owned(),
            tau_theta: h.view((dim_theta, 0), (da, dim_theta)).into_owned(),
            tau_tau: h.view((dim_theta, dim_theta), (da, da)).into_owned(),
        }
    }
}

pub fn client_hessian<G: FederatedGame + ?Sized>(
    game: &G,
    client: usize,
    point: &[f64],
) -> Result<DMatrix<f64>> {
    check_dense(game)?;
    dense_hessian(point, |p| game.client_gradient(client, p))
}

pub fn federated_hessian<G: FederatedGame + ?Sized>(game: &G, point: &[f64]) -> Result<DMatrix<f64>> {
    check_dense(game)?;
    dense_hessian(point, |p| game.gradient(p))
}

fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if m.nrows() == 0 {
        return Ok(DVector::zeros(0));
    }
    SymmetricEigen::try_new(m.clone(), 1e-14, 10_000)
        .map(|e| e.eigenvalues)
        .ok_or_else(|| Error::Eigensolver("symmetric eigendecomposition did not converge".into()))
}

/// Spectral norm of a symmetric matrix: largest absolute eigenvalue.
pub fn spectral_norm_symmetric(m: &DMatrix<f64>) -> Result<f64> {
    Ok(symmetric_eigenvalues(m)?.iter().fold(0.0f64, |a, v| a.max(v.abs())))
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> Result<f64> {
    if m.is_empty() {
        return Ok(0.0);
    }
    let sv = m
        .clone()
        .try_svd(false, false, 1e-14, 10_000)
        .ok_or_else(|| Error::Eigensolver("svd did not converge".into()))?
        .singular_values;
    Ok(sv.iter().fold(0.0f64, |a, &v| a.max(v)))
}

fn lambda_max(m: &DMatrix<f64>) -> Result<f64> {
    Ok(symmetric_eigenvalues(m)?
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Hessian-block dissimilarity of one client, plus the composite bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessianDissimilarity {
    pub rho_theta: f64,
    pub rho_tau: f64,
    pub rho_thetatau: f64,
    pub rho_tautheta: f64,
    /// `lambda_max` of this client's `d2U^i/dtau2`.
    pub lambda_max_tt_client: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientHeterogeneity {
    pub client_id: usize,
    pub zeta_theta: f64,
    pub zeta_tau: f64,
    pub hessian: Option<HessianDissimilarity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityProfile {
    pub kind: String,
    pub clients: Vec<ClientHeterogeneity>,
    /// Max full-Hessian spectral norm over clients, standing in for the
    /// smoothness constant `L`.
    pub lipschitz_estimate: Option<f64>,
    pub lambda_max_tt_global: Option<f64>,
}

/// `num / den`, with a zero numerator winning over a zero denominator.
fn ratio(num: f64, den: f64) -> f64 {
    if num == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// `B^i = rho_th + L rho_tha / |l_i| + L rho_tath / |l_i| + L^2 rho_ta / |l_i l|`
/// where `l_i`, `l` are the largest eigenvalues of the client and global
/// `d2U/dtau2`.
pub fn composite_bound(
    rho_theta: f64,
    rho_tau: f64,
    rho_thetatau: f64,
    rho_tautheta: f64,
    lipschitz: f64,
    lambda_client: f64,
    lambda_global: f64,
) -> f64 {
    let li = lambda_client.abs();
    rho_theta
        + ratio(lipschitz * rho_thetatau, li)
        + ratio(lipschitz * rho_tautheta, li)
        + ratio(lipschitz * lipschitz * rho_tau, (lambda_client * lambda_global).abs())
}

pub fn heterogeneity_profile<G: FederatedGame + ?Sized>(
    game: &G,
    point: &[f64],
    with_hessians: bool,
) -> Result<HeterogeneityProfile> {
    check_point(game, point)?;
    let dt = game.dim_theta();
    let client_grads: Vec<Vec<f64>> = (0..game.n_clients())
        .map(|i| game.client_gradient(i, point))
        .collect::<Result<_>>()?;
    let mut global = vec![0.0; game.dim()];
    for g in &client_grads {
        for (a, v) in global.iter_mut().zip(g) {
            *a += v;
        }
    }
    let inv = 1.0 / game.n_clients() as f64;
    global.iter_mut().for_each(|a| *a *= inv);

    let zetas: Vec<(f64, f64)> = client_grads
        .iter()
        .map(|g| {
            let d: Vec<f64> = g.iter().zip(&global).map(|(a, b)| a - b).collect();
            (norm2(&d[..dt]), norm2(&d[dt..]))
        })
        .collect();

    if !with_hessians {
        return Ok(HeterogeneityProfile {
            kind: "pointwise dissimilarity".into(),
            clients: zetas
                .into_iter()
                .enumerate()
                .map(|(i, (zt, za))| ClientHeterogeneity {
                    client_id: i,
                    zeta_theta: zt,
                    zeta_tau: za,
                    hessian: None,
                })
                .collect(),
            lipschitz_estimate: None,
            lambda_max_tt_global: None,
        });
    }

    check_dense(game)?;
    let client_h: Vec<DMatrix<f64>> = (0..game.n_clients())
        .map(|i| client_hessian(game, i, point))
        .collect::<Result<_>>()?;
    let mut global_h = DMatrix::zeros(game.dim(), game.dim());
    for h in &client_h {
        global_h += h;
    }
    global_h *= inv;
    let gb = HessianBlocks::from_full(&global_h, dt);
    let lambda_global = lambda_max(&gb.tau_tau)?;
    let mut lipschitz = 0.0f64;
    for h in &client_h {
        lipschitz = lipschitz.max(spectral_norm_symmetric(h)?);
    }

    let mut clients = Vec::with_capacity(client_h.len());
    for (i, (h, (zt, za))) in client_h.iter().zip(zetas).enumerate() {
        let cb = HessianBlocks::from_full(h, dt);
        let rho_theta = spectral_norm_symmetric(&(&cb.theta_theta - &gb.theta_theta))?;
        let rho_tau = spectral_norm_symmetric(&(&cb.tau_tau - &gb.tau_tau))?;
        let rho_thetatau = spectral_norm(&(&cb.theta_tau - &gb.theta_tau))?;
        let rho_tautheta = spectral_norm(&(&cb.tau_theta - &gb.tau_theta))?;
        let lambda_client = lambda_max(&cb.tau_tau)?;
        let b = composite_bound(
            rho_theta,
            rho_tau,
            rho_thetatau,
            rho_tautheta,
            lipschitz,
            lambda_client,
            lambda_global,
        );
        clients.push(ClientHeterogeneity {
            client_id: i,
            zeta_theta: zt,
            zeta_tau: za,
            hessian: Some(HessianDissimilarity {
                rho_theta,
                rho_tau,
                rho_thetatau,
                rho_tautheta,
                lambda_max_tt_client: lambda_client,
                b,
            }),
        });
    }
    Ok(HeterogeneityProfile {
        kind: "pointwise dissimilarity".into(),
        clients,
        lipschitz_estimate: Some(lipschitz),
        lambda_max_tt_global: Some(lambda_global),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    StrictLocalMinimax,
    FailsFirstOrder,
    FailsSecondOrder,
    #[serde(rename = "degenerate_tt")]
    DegenerateTT,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumCertificate {
    pub grad_norm_theta: f64,
    pub grad_norm_tau: f64,
    pub lambda_max_tt: f64,
    /// Smallest eigenvalue of the Schur complement
    /// `H_thth - H_thta H_tata^-1 H_tath`; NaN when `H_tata` is singular.
    pub schur_min_eig: f64,
    pub condition_tt: f64,
    pub tol: f64,
    pub verdict: Verdict,
}

pub fn certificate_from_parts(
    grad: &[f64],
    blocks: &HessianBlocks,
    tol: f64,
) -> Result<EquilibriumCertificate> {
    let dt = blocks.theta_theta.nrows();
    let grad_norm_theta = norm2(&grad[..dt]);
    let grad_norm_tau = norm2(&grad[dt..]);
    let eig_tt = symmetric_eigenvalues(&blocks.tau_tau)?;
    let lambda_max_tt = eig_tt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let abs_max = eig_tt.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let abs_min = eig_tt.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    let condition_tt = if abs_min > 0.0 { abs_max / abs_min } else { f64::INFINITY };
    let singular = !(condition_tt <= SINGULAR_CONDITION);

    let schur_min_eig = if singular {
        f64::NAN
    } else {
        let solved = blocks
            .tau_tau
            .clone()
            .lu()
            .solve(&blocks.tau_theta)
            .ok_or_else(|| Error::Eigensolver("tau-tau block not invertible".into()))?;
        let schur = &blocks.theta_theta - &blocks.theta_tau * solved;
        let schur = (&schur + schur.transpose()) * 0.5;
        symmetric_eigenvalues(&schur)?
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    };

    let verdict = if grad_norm_theta > tol || grad_norm_tau > tol {
        Verdict::FailsFirstOrder
    } else if lambda_max_tt.abs() <= tol || singular {
        Verdict::DegenerateTT
    } else if lambda_max_tt >= -tol || !(schur_min_eig > tol) {
        Verdict::FailsSecondOrder
    } else {
        Verdict::StrictLocalMinimax
    };
    Ok(EquilibriumCertificate {
        grad_norm_theta,
        grad_norm_tau,
        lambda_max_tt,
        schur_min_eig,
        condition_tt,
        tol,
        verdict,
    })
}

/// First- and second-order local minimax check of the federated objective.
pub fn equilibrium_certificate<G: FederatedGame + ?Sized>(
    game: &G,
    point: &[f64],
    tol: f64,
) -> Result<EquilibriumCertificate> {
    check_point(game, point)?;
    check_dense(game)?;
    let grad = game.gradient(point)?;
    let h = federated_hessian(game, point)?;
    certificate_from_parts(&grad, &HessianBlocks::from_full(&h, game.dim_theta()), tol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonInterval {
    pub client_id: usize,
    pub lower: f64,
    pub upper: f64,
    pub feasible: bool,
}

/// Per-client interval `[max(z_th, z_ta), min(alpha - rho_ta, beta - B)]`
/// with `alpha = |lambda_max(H_tata)|` and `beta` the Schur minimum
/// eigenvalue.
pub fn epsilon_interval(
    profile: &HeterogeneityProfile,
    cert: &EquilibriumCertificate,
) -> Result<Vec<EpsilonInterval>> {
    if cert.verdict != Verdict::StrictLocalMinimax {
        return Err(Error::Precondition(format!(
            "epsilon interval needs a strict local minimax, certificate says {:?}",
            cert.verdict
        )));
    }
    let alpha = cert.lambda_max_tt.abs();
    let beta = cert.schur_min_eig;
    profile
        .clients
        .iter()
        .map(|c| {
            let h = c.hessian.ok_or_else(|| {
                Error::Precondition("epsilon interval needs Hessian dissimilarities".into())
            })?;
            let lower = c.zeta_theta.max(c.zeta_tau);
            let upper = (alpha - h.rho_tau).min(beta - h.b);
            Ok(EpsilonInterval {
                client_id: c.client_id,
                lower,
                upper,
                feasible: lower <= upper && h.rho_tau < alpha && h.b < beta,
            })
        })
        .collect()
}

/// Jacobian of the gamma-FedGDA flow,
/// `[[-(R/g) H_thth, -(R/g) H_thta], [R H_tath, R H_tata]]`.
pub fn flow_jacobian(blocks: &HessianBlocks, gamma: f64, local_steps: usize) -> DMatrix<f64> {
    let dt = blocks.theta_theta.nrows();
    let da = blocks.tau_tau.nrows();
    let r = local_steps as f64;
    let mut j = DMatrix::zeros(dt + da, dt + da);
    j.view_mut((0, 0), (dt, dt))
        .copy_from(&(&blocks.theta_theta * (-r / gamma)));
    j.view_mut((0, dt), (dt, da))
        .copy_from(&(&blocks.theta_tau * (-r / gamma)));
    j.view_mut((dt, 0), (da, dt))
        .copy_from(&(&blocks.tau_theta * r));
    j.view_mut((dt, dt), (da, da)).copy_from(&(&blocks.tau_tau * r));
    j
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpectrum {
    pub gamma: f64,
    pub local_steps: usize,
    /// Real parts, descending.
    pub eigen_real_parts: Vec<f64>,
    /// `(re, im)` pairs in the same order.
    pub eigenvalues: Vec<(f64, f64)>,
    pub strictly_stable: bool,
}

pub fn spectrum_of(j: &DMatrix<f64>) -> Result<Vec<(f64, f64)>> {
    if j.nrows() == 0 {
        return Ok(Vec::new());
    }
    let schur = nalgebra::linalg::Schur::try_new(j.clone(), 1e-15, 100_000)
        .ok_or_else(|| Error::Eigensolver("real Schur decomposition did not converge".into()))?;
    let mut eig: Vec<(f64, f64)> = schur
        .complex_eigenvalues()
        .iter()
        .map(|c| (c.re, c.im))
        .collect();
    if eig.iter().any(|(re, im)| !re.is_finite() || !im.is_finite()) {
        return Err(Error::Eigensolver("non-finite eigenvalue".into()));
    }
    eig.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    Ok(eig)
}

pub fn flow_spectrum_from_blocks(
    blocks: &HessianBlocks,
    gamma: f64,
    local_steps: usize,
) -> Result<FlowSpectrum> {
    if !(gamma > 0.0) || local_steps == 0 {
        return Err(Error::Precondition("gamma > 0 and R >= 1 required".into()));
    }
    let eigenvalues = spectrum_of(&flow_jacobian(blocks, gamma, local_steps))?;
    let eigen_real_parts: Vec<f64> = eigenvalues.iter().map(|e| e.0).collect();
    let strictly_stable = eigen_real_parts.first().is_none_or(|&m| m < 0.0);
    Ok(FlowSpectrum {
        gamma,
        local_steps,
        eigen_real_parts,
        eigenvalues,
        strictly_stable,
    })
}

pub fn flow_jacobian_spectrum<G: FederatedGame + ?Sized>(
    game: &G,
    point: &[f64],
    gamma: f64,
    local_steps: usize,
) -> Result<FlowSpectrum> {
    check_point(game, point)?;
    let h = federated_hessian(game, point)?;
    flow_spectrum_from_blocks(&HessianBlocks::from_full(&h, game.dim_theta()), gamma, local_steps)
}

/// `lambda_max(d2U/dtau2)` by shifted power iteration on Hessian-vector
/// products, for models too large for dense assembly.
pub fn lambda_max_tt_power<G: FederatedGame + ?Sized>(
    game: &G,
    point: &[f64],
    iters: usize,
) -> Result<f64> {
    check_point(game, point)?;
    let dt = game.dim_theta();
    let da = game.dim_tau();
    if da == 0 {
        return Err(Error::Precondition("empty tau block".into()));
    }
    let apply = |v: &[f64]| -> Result<Vec<f64>> {
        let mut joint = vec![0.0; dt + da];
        joint[dt..].copy_from_slice(v);
        let out = hvp(point, |p| game.gradient(p), &joint)?;
        Ok(out[dt..].to_vec())
    };
    let power = |shift: f64| -> Result<f64> {
        let mut v: Vec<f64> = (0..da).map(|i| 1.0 + 0.01 * i as f64).collect();
        let n = norm2(&v);
        v.iter_mut().for_each(|x| *x /= n);
        let mut est = 0.0;
        for _ in 0..iters.max(1) {
            let mut w = apply(&v)?;
            for (wi, vi) in w.iter_mut().zip(&v) {
                *wi += shift * vi;
            }
            est = w.iter().zip(&v).map(|(a, b)| a * b).sum();
            let n = norm2(&w);
            if n == 0.0 {
                return Ok(0.0);
            }
            v = w.into_iter().map(|x| x / n).collect();
        }
        Ok(est)
    };
    // Rayleigh quotient of the dominant eigenvector gives the eigenvalue of
    // largest magnitude; shifting by its size makes the spectrum
    // non-negative so the top becomes lambda_max.
    let dominant = power(0.0)?;
    let shift = dominant.abs();
    Ok(power(shift)? - shift)
}

/// Everything the diagnostics produce for one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub n_params_theta: usize,
    pub n_params_tau: usize,
    pub n_clients: usize,
    pub heterogeneity: HeterogeneityProfile,
    pub certificate: EquilibriumCertificate,
    /// Present when the certificate is a strict local minimax.
    pub epsilon_intervals: Option<Vec<EpsilonInterval>>,
    pub epsilon_note: Option<String>,
    pub flow: FlowSpectrum,
}

pub fn diagnostics_report<G: FederatedGame + ?Sized>(
    game: &G,
    point: &[f64],
    gamma: f64,
    local_steps: usize,
    tol: f64,
) -> Result<DiagnosticsReport> {
    check_point(game, point)?;
    check_dense(game)?;
    let heterogeneity = heterogeneity_profile(game, point, true)?;
    let grad = game.gradient(point)?;
    let h = federated_hessian(game, point)?;
    let blocks = HessianBlocks::from_full(&h, game.dim_theta());
    let certificate = certificate_from_parts(&grad, &blocks, tol)?;
    let (epsilon_intervals, epsilon_note) = match epsilon_interval(&heterogeneity, &certificate) {
        Ok(v) => (Some(v), None),
        Err(Error::Precondition(msg)) => (None, Some(msg)),
        Err(e) => return Err(e),
    };
    let flow = flow_spectrum_from_blocks(&blocks, gamma, local_steps)?;
    Ok(DiagnosticsReport {
        n_params_theta: game.dim_theta(),
        n_params_tau: game.dim_tau(),
        n_clients: game.n_clients(),
        heterogeneity,
        certificate,
        epsilon_intervals,
        epsilon_note,
        flow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_saddle() -> QuadraticGame {
        // U = theta^2 - tau^2
        QuadraticGame::new(vec![QuadraticClient::scalar(2.0, -2.0, 0.0)]).unwrap()
    }

    #[test]
    fn saddle_toy_is_strict_minimax() {
        let cert = equilibrium_certificate(&toy_saddle(), &[0.0, 0.0], DEFAULT_TOL).unwrap();
        assert_eq!(cert.verdict, Verdict::StrictLocalMinimax);
        assert!((cert.lambda_max_tt + 2.0).abs() < 1e-6);
        assert!((cert.schur_min_eig - 2.0).abs() < 1e-6);
        assert_eq!(cert.grad_norm_theta, 0.0);
    }

    #[test]
    fn saddle_toy_off_center_fails_first_order() {
        let cert = equilibrium_certificate(&toy_saddle(), &[1.0, 0.0], DEFAULT_TOL).unwrap();
        assert!((cert.grad_norm_theta - 2.0).abs() < 1e-12);
        assert_eq!(cert.verdict, Verdict::FailsFirstOrder);
    }

    #[test]
    fn convex_in_tau_fails_second_order_and_flat_is_degenerate() {
        let up = QuadraticGame::new(vec![QuadraticClient::scalar(2.0, 2.0, 0.0)]).unwrap();
        let c = equilibrium_certificate(&up, &[0.0, 0.0], DEFAULT_TOL).unwrap();
        assert_eq!(c.verdict, Verdict::FailsSecondOrder);
        let flat = QuadraticGame::new(vec![QuadraticClient::scalar(2.0, 0.0, 1.0)]).unwrap();
        let c = equilibrium_certificate(&flat, &[0.0, 0.0], DEFAULT_TOL).unwrap();
        assert_eq!(c.verdict, Verdict::DegenerateTT);
    }

    #[test]
    fn bilinear_flow_is_a_center() {
        let g = QuadraticGame::new(vec![QuadraticClient::scalar(0.0, 0.0, 1.0)]).unwrap();
        for gamma in [1.0, 4.0] {
            let s = flow_jacobian_spectrum(&g, &[0.0, 0.0], gamma, 3).unwrap();
            assert!(!s.strictly_stable);
            for (re, im) in &s.eigenvalues {
                assert!(re.abs() < 1e-8);
                assert!((im.abs() - 3.0 / gamma.sqrt()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn diagonal_flow() {
        // U = theta^2/2 - tau^2/2
        let g = QuadraticGame::new(vec![QuadraticClient::scalar(1.0, -1.0, 0.0)]).unwrap();
        let s = flow_jacobian_spectrum(&g, &[0.0, 0.0], 4.0, 2).unwrap();
        assert!(s.strictly_stable);
        assert!((s.eigen_real_parts[0] + 0.5).abs() < 1e-8);
        assert!((s.eigen_real_parts[1] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn homogeneous_interval() {
        let g = QuadraticGame::new(vec![QuadraticClient::scalar(2.0, -2.0, 0.5); 3]).unwrap();
        let p = heterogeneity_profile(&g, &[0.0, 0.0], true).unwrap();
        let c = equilibrium_certificate(&g, &[0.0, 0.0], DEFAULT_TOL).unwrap();
        let iv = epsilon_interval(&p, &c).unwrap();
        let alpha = 2.0;
        let beta = 2.0 + 0.25 / 2.0;
        for e in iv {
            assert!(e.lower < 1e-12);
            assert!((e.upper - f64::min(alpha, beta)).abs() < 1e-6);
            assert!(e.feasible);
        }
    }

    #[test]
    fn interval_needs_strict_certificate() {
        let g = toy_saddle();
        let p = heterogeneity_profile(&g, &[1.0, 0.0], true).unwrap();
        let c = equilibrium_certificate(&g, &[1.0, 0.0], DEFAULT_TOL).unwrap();
        assert!(matches!(epsilon_interval(&p, &c), Err(Error::Precondition(_))));
        let p = heterogeneity_profile(&g, &[0.0, 0.0], false).unwrap();
        let c = equilibrium_certificate(&g, &[0.0, 0.0], DEFAULT_TOL).unwrap();
        assert!(epsilon_interval(&p, &c).is_err());
    }

    #[test]
    fn size_limit_enforced() {
        let n = 150;
        let g = QuadraticGame::new(vec![QuadraticClient::new(
            DMatrix::identity(n, n),
            -DMatrix::identity(n, n),
            DMatrix::zeros(n, n),
        )])
        .unwrap();
        let point = vec![0.0; 2 * n];
        assert!(matches!(
            equilibrium_certificate(&g, &point, DEFAULT_TOL),
            Err(Error::SizeLimit { params: 300, .. })
        ));
        // gradient dissimilarities have no size limit
        assert!(heterogeneity_profile(&g, &point, false).is_ok());
        assert!(heterogeneity_profile(&g, &point, true).is_err());
    }

    #[test]
    fn power_iteration_matches_dense() {
        let b = DMatrix::from_row_slice(3, 3, &[-3.0, 0.5, 0.0, 0.5, -1.0, 0.2, 0.0, 0.2, 0.5]);
        let g = QuadraticGame::new(vec![QuadraticClient::new(
            DMatrix::identity(1, 1),
            b.clone(),
            DMatrix::zeros(1, 3),
        )])
        .unwrap();
        let dense = lambda_max(&b).unwrap();
        let est = lambda_max_tt_power(&g, &[0.0; 4], 500).unwrap();
        assert!((dense - est).abs() < 1e-6, "{dense} vs {est}");
    }

    #[test]
    fn composite_bound_zero_rho() {
        assert_eq!(composite_bound(0.0, 0.0, 0.0, 0.0, 5.0, 0.0, -1.0), 0.0);
        let b = composite_bound(0.1, 0.2, 0.3, 0.4, 2.0, -0.5, -1.0);
        let want = 0.1 + 2.0 * 0.3 / 0.5 + 2.0 * 0.4 / 0.5 + 4.0 * 0.2 / 0.5;
        assert!((b - want).abs() < 1e-14);
    }
}
