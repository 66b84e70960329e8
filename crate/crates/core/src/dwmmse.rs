//! Jacobi-parallel weighted-MMSE ascent for the weighted sum rate.
//!
//! At a base point every `xi_i` is replaced by a lower bound `zeta_i` that is
//! a ratio of affine functions of the interference powers; the resulting
//! sum rate is the rate of an ordinary interference channel with effective
//! covariances `Qbar`, and the MMSE trick makes it separable over users.

use std::f64::consts::LN_2;
use std::time::Instant;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::dbsum::repair_degenerate;
use crate::error::{CobfError, Result};
use crate::implicit_rate::CertifiedRates;
use crate::linalg::{self, CMat, CVec};
use crate::model::{cross_powers, BeamformerSet, ChannelStats, CrossPowers, NetworkConfig};

#[derive(Debug, Clone)]
pub struct UserState {
    pub xi: f64,
    pub gamma: f64,
    /// `Qbar_ii^{1/2}`, Hermitian.
    pub qbar_sqrt: CMat,
    pub ybar: CVec,
    /// MMSE at the base point.
    pub mse: f64,
    pub eta: f64,
}

#[derive(Debug, Clone)]
pub struct WmmseState {
    pub users: Vec<UserState>,
    /// Cross powers `I_ki` at the base point.
    pub powers: CrossPowers,
    /// `theta[i][j]` for `j != i`, as sent by transmitter `j` to `i`.
    pub theta: Vec<Vec<f64>>,
}

impl WmmseState {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Scalar `s` with `Qbar_ji = s * Q_ji` for `j != i`, `gamma_i` for `j == i`.
    pub fn qbar_scale(&self, j: usize, i: usize) -> f64 {
        if j == i {
            self.users[i].gamma
        } else {
            1.0 / (1.0 + self.powers.get(j, i) * self.users[i].xi)
        }
    }

    pub fn qbar(&self, stats: &ChannelStats, j: usize, i: usize) -> CMat {
        stats.q(j, i) * Complex64::new(self.qbar_scale(j, i), 0.0)
    }

    /// Lower bound `zeta_i(w | base)` on `xi_i(w)`.
    pub fn zeta(&self, powers: &CrossPowers, noise: f64, i: usize) -> f64 {
        let denom: f64 = noise + (0..self.num_users()).filter(|&j| j != i).map(|j| self.qbar_scale(j, i) * powers.get(j, i)).sum::<f64>();
        self.users[i].gamma / denom
    }

    /// Weighted sum of `log2(1 + zeta_i I_ii)`: the intermediate bound.
    pub fn zeta_wsr(&self, powers: &CrossPowers, cfg: &NetworkConfig, alpha: &[f64]) -> f64 {
        (0..self.num_users()).map(|i| alpha[i] * (self.zeta(powers, cfg.noise_power[i], i) * powers.signal(i)).ln_1p() / LN_2).sum()
    }

    /// MSE of user `i`'s fixed receiver `ybar_i` when the beams are `beams`.
    pub fn mse_at(&self, beams: &BeamformerSet, powers: &CrossPowers, noise: f64, i: usize) -> f64 {
        let u = &self.users[i];
        let gain = u.ybar.dotc(&(&u.qbar_sqrt * &beams.beams[i]));
        let interf: f64 = (0..self.num_users()).filter(|&j| j != i).map(|j| self.qbar_scale(j, i) * powers.get(j, i)).sum();
        (Complex64::new(1.0, 0.0) - gain).norm_sqr() + (noise + interf) * linalg::norm_sqr(&u.ybar)
    }
}

pub fn compute_state(beams: &BeamformerSet, stats: &ChannelStats, cfg: &NetworkConfig, alpha: &[f64]) -> Result<WmmseState> {
    let powers = cross_powers(beams, stats)?;
    let k_users = cfg.num_users;
    for i in 0..k_users {
        if !(powers.signal(i) > 0.0) {
            return Err(CobfError::ZeroSignal { user: i });
        }
    }
    let cert = CertifiedRates::from_powers(powers.clone(), cfg);
    let mut users = Vec::with_capacity(k_users);
    for i in 0..k_users {
        let xi = cert.xi[i];
        let noise = cfg.noise_power[i];
        let mut interf = 0.0;
        let mut gamma = noise * xi;
        for j in (0..k_users).filter(|&j| j != i) {
            let p = powers.get(j, i);
            gamma += p * xi / (1.0 + p * xi);
            interf += p / (1.0 + p * xi);
        }
        let qbar_sqrt = linalg::psd_sqrt(&(stats.q(i, i) * Complex64::new(gamma, 0.0)));
        let total = noise + interf + gamma * powers.signal(i);
        let ybar = (&qbar_sqrt * &beams.beams[i]) / Complex64::new(total, 0.0);
        let gain = ybar.dotc(&(&qbar_sqrt * &beams.beams[i]));
        let mse = (Complex64::new(1.0, 0.0) - gain).norm_sqr() + (noise + interf) * linalg::norm_sqr(&ybar);
        let eta = alpha[i] / (LN_2 * mse);
        users.push(UserState { xi, gamma, qbar_sqrt, ybar, mse, eta });
    }
    let theta = (0..k_users)
        .map(|i| {
            (0..k_users)
                .map(|j| if j == i { 0.0 } else { users[j].eta * linalg::norm_sqr(&users[j].ybar) / (1.0 + powers.get(i, j) * users[j].xi) })
                .collect()
        })
        .collect();
    Ok(WmmseState { users, powers, theta })
}

/// Separable lower bound on the weighted sum rate around the state's base point.
pub fn wsr_lower_bound(state: &WmmseState, beams: &BeamformerSet, stats: &ChannelStats, cfg: &NetworkConfig, alpha: &[f64]) -> Result<f64> {
    let powers = cross_powers(beams, stats)?;
    Ok((0..state.num_users()).map(|i| user_bound_term(state, beams, &powers, cfg, alpha, i)).sum())
}

/// User `i`'s summand of [`wsr_lower_bound`].
pub fn user_bound_term(state: &WmmseState, beams: &BeamformerSet, powers: &CrossPowers, cfg: &NetworkConfig, alpha: &[f64], i: usize) -> f64 {
    let e = state.users[i].mse;
    let m = state.mse_at(beams, powers, cfg.noise_power[i], i);
    -alpha[i] * e.log2() + alpha[i] / LN_2 * (1.0 - m / e)
}

/// Quadratic `w^H A w - 2 Re(b^H w)` for transmitter `i`, assembled from
/// its own data and the received `theta_ij`.
pub fn subproblem_terms(state: &WmmseState, stats: &ChannelStats, i: usize) -> (CMat, CVec) {
    let u = &state.users[i];
    let a = &u.qbar_sqrt * &u.ybar;
    let mut mat = (&a * a.adjoint()) * Complex64::new(u.eta, 0.0);
    for j in (0..state.num_users()).filter(|&j| j != i) {
        mat += stats.q(i, j) * Complex64::new(state.theta[i][j], 0.0);
    }
    linalg::hermitize(&mut mat);
    (mat, a * Complex64::new(u.eta, 0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubproblemSolution {
    pub w: CVec,
    pub mu: f64,
}

/// Minimize `w^H A w - 2 Re(b^H w)` over `||w||^2 <= power` with `A` PSD.
/// The multiplier `mu` is bisected until the bracket is `rel_tol` narrow;
/// the returned point is the feasible end.
pub fn solve_quadratic_ball(a: &CMat, b: &CVec, power: f64, rel_tol: f64) -> Result<SubproblemSolution> {
    let n = b.len();
    let bnorm = linalg::norm_sqr(b).sqrt();
    if bnorm == 0.0 {
        return Ok(SubproblemSolution { w: CVec::zeros(n), mu: 0.0 });
    }
    let (vals, vecs) = linalg::hermitian_eigh(a);
    let c = vecs.adjoint() * b;
    let floor = 1e-14 * vals.last().copied().unwrap_or(0.0).max(0.0);
    let norm_at = |mu: f64| -> f64 {
        vals.iter()
            .zip(c.iter())
            .map(|(l, ck)| {
                let d = l.max(0.0) + mu;
                if d > floor {
                    ck.norm_sqr() / (d * d)
                } else if ck.norm_sqr() > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                }
            })
            .sum()
    };
    let point_at = |mu: f64| -> CVec {
        let scaled = CVec::from_iterator(
            n,
            vals.iter().zip(c.iter()).map(|(l, ck)| {
                let d = l.max(0.0) + mu;
                if d > floor {
                    ck / d
                } else {
                    Complex64::new(0.0, 0.0)
                }
            }),
        );
        &vecs * scaled
    };
    if norm_at(0.0) <= power {
        return Ok(SubproblemSolution { w: point_at(0.0), mu: 0.0 });
    }
    let mut hi = bnorm / power.sqrt();
    let mut doublings = 0;
    while norm_at(hi) > power {
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 || !hi.is_finite() {
            return Err(CobfError::BracketFailure("no feasible multiplier found".into()));
        }
    }
    let mut lo = 0.0;
    while hi - lo > rel_tol * hi {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if norm_at(mid) > power {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(SubproblemSolution { w: point_at(hi), mu: hi })
}

pub const MU_REL_TOL: f64 = 1e-10;

pub fn solve_user_subproblem(state: &WmmseState, stats: &ChannelStats, i: usize, power: f64, rel_tol: f64) -> Result<SubproblemSolution> {
    let (a, b) = subproblem_terms(state, stats, i);
    solve_quadratic_ball(&a, &b, power, rel_tol)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwmmseOptions {
    pub max_iters: usize,
    /// Stop when `|U[n] - U[n-1]| < rel_tol * |U[n-1]|`.
    pub rel_tol: f64,
    /// Thread count for the per-user solves; `None` uses the global pool.
    pub workers: Option<usize>,
    /// Order in which the user solves are issued; results are placed by user index.
    pub schedule: Option<Vec<usize>>,
}

impl Default for DwmmseOptions {
    fn default() -> Self {
        Self { max_iters: 1000, rel_tol: 1e-3, workers: None, schedule: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DwmmseTracePoint {
    pub iter: usize,
    pub utility: f64,
    pub elapsed_s: f64,
    pub messages: usize,
    pub parallel_width: usize,
}

#[derive(Debug, Clone)]
pub struct DwmmseOutput {
    pub beams: BeamformerSet,
    pub rates: CertifiedRates,
    pub utility: f64,
    pub trace: Vec<DwmmseTracePoint>,
    pub messages: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Scalars exchanged per iteration: every cross power and every `theta_ij`.
pub fn messages_per_iteration(k_users: usize) -> usize {
    2 * k_users * (k_users - 1)
}

fn solve_all(state: &WmmseState, stats: &ChannelStats, cfg: &NetworkConfig, order: &[usize]) -> Result<Vec<CVec>> {
    let solved: Vec<(usize, Result<SubproblemSolution>)> =
        order.par_iter().map(|&i| (i, solve_user_subproblem(state, stats, i, cfg.power_budget[i], MU_REL_TOL))).collect();
    let mut out = vec![None; cfg.num_users];
    for (i, sol) in solved {
        out[i] = Some(sol?.w);
    }
    Ok(out.into_iter().map(|w| w.expect("schedule covers every user")).collect())
}

pub fn run_dwmmse(stats: &ChannelStats, cfg: &NetworkConfig, alpha: &[f64], init: &BeamformerSet, opts: &DwmmseOptions) -> Result<DwmmseOutput> {
    let k_users = cfg.num_users;
    if alpha.len() != k_users {
        return Err(CobfError::DimensionMismatch { expected: k_users, got: alpha.len() });
    }
    if !init.is_feasible(cfg) {
        return Err(CobfError::InvalidConfig("initial beamformers violate the power budget".into()));
    }
    let order = match &opts.schedule {
        Some(s) => {
            let mut sorted = s.clone();
            sorted.sort_unstable();
            if sorted != (0..k_users).collect::<Vec<_>>() {
                return Err(CobfError::InvalidConfig("schedule must be a permutation of the users".into()));
            }
            s.clone()
        }
        None => (0..k_users).collect(),
    };
    let pool = match opts.workers {
        Some(n) => {
            Some(rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().map_err(|e| CobfError::InvalidConfig(format!("thread pool: {e}")))?)
        }
        None => None,
    };
    let width = opts.workers.unwrap_or_else(rayon::current_num_threads).min(k_users).max(1);

    let started = Instant::now();
    let mut beams = init.clone();
    repair_degenerate(&mut beams, stats, cfg)?;
    let wsr = |c: &CertifiedRates| c.rate.iter().zip(alpha).map(|(r, a)| r * a).sum::<f64>();
    let mut cert = CertifiedRates::from_powers(cross_powers(&beams, stats)?, cfg);
    let mut messages = messages_per_iteration(k_users);
    let mut utility = wsr(&cert);
    let mut trace = vec![DwmmseTracePoint { iter: 0, utility, elapsed_s: 0.0, messages, parallel_width: width }];
    let mut converged = false;
    let mut n = 0;
    while n < opts.max_iters {
        n += 1;
        let state = compute_state(&beams, stats, cfg, alpha)?;
        let new = match &pool {
            Some(p) => p.install(|| solve_all(&state, stats, cfg, &order))?,
            None => solve_all(&state, stats, cfg, &order)?,
        };
        beams = BeamformerSet::new(new);
        let powers = cross_powers(&beams, stats)?;
        if let Some(u) = (0..k_users).find(|&u| !(powers.signal(u) > 0.0)) {
            return Err(CobfError::DegenerateIterate { user: u, beams: Box::new(beams) });
        }
        cert = CertifiedRates::from_powers(powers, cfg);
        messages += messages_per_iteration(k_users);
        let prev = utility;
        utility = wsr(&cert);
        trace.push(DwmmseTracePoint { iter: n, utility, elapsed_s: started.elapsed().as_secs_f64(), messages, parallel_width: width });
        if (utility - prev).abs() < opts.rel_tol * prev.abs() {
            converged = true;
            break;
        }
    }
    Ok(DwmmseOutput { beams, rates: cert, utility, trace, messages, iterations: n, converged })
}
