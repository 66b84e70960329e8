//! Gauss-Seidel block successive lower-bound maximization.
//!
//! One transmitter updates per iteration, in round-robin order. It maximizes
//! a concave minorant of the utility built from its own covariances, its own
//! implicit level `xi_i`, and a `(R_j, dR_j/dI_ij)` report from every other
//! user; the minorant is tight at the current point, so the true utility
//! never decreases.

use std::f64::consts::LN_2;
use std::time::Instant;

use num_complex::Complex64;

use crate::error::{CobfError, Result};
use crate::implicit_rate::{rate_derivative, CertifiedRates};
use crate::linalg::{self, CMat, CVec};
use crate::model::{checked_quad, cross_powers, BeamformerSet, ChannelStats, CrossPowers, NetworkConfig};
use crate::utilities::UtilitySpec;

#[derive(Debug, Clone, PartialEq)]
pub struct InnerOptions {
    pub max_steps: usize,
    pub initial_step: f64,
    pub shrink: f64,
    pub armijo: f64,
    pub grad_tol: f64,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self { max_steps: 500, initial_step: 1.0, shrink: 0.5, armijo: 1e-4, grad_tol: 1e-7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbsumOptions {
    /// Proximal weight `c`; `None` selects [`default_penalty`].
    pub penalty: Option<f64>,
    /// Cap on block updates; `None` means `200 * K`.
    pub max_iters: Option<usize>,
    /// Stop when `|U[n] - U[n-K]| < rel_tol * |U[n-K]|`.
    pub rel_tol: f64,
    pub inner: InnerOptions,
}

impl Default for DbsumOptions {
    fn default() -> Self {
        Self { penalty: None, max_iters: None, rel_tol: 1e-3, inner: InnerOptions::default() }
    }
}

/// `c = 1e-2 / max_i P_i`: the penalty of a full-power move is 1e-2 utility units.
pub fn default_penalty(cfg: &NetworkConfig) -> f64 {
    1e-2 / cfg.power_budget.iter().cloned().fold(0.0, f64::max)
}

/// Message from transmitter `from` to the transmitter being updated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateReport {
    pub from: usize,
    pub rate: f64,
    pub derivative: f64,
}

/// The report receiver `j` sends to transmitter `i`, computed from the
/// powers `j` has been told about and its own `xi_j`.
pub fn rate_report(cert: &CertifiedRates, cfg: &NetworkConfig, j: usize, i: usize) -> Result<RateReport> {
    let derivative = rate_derivative(&cert.powers, cert.xi[j], cfg.noise_power[j], j, i)?;
    Ok(RateReport { from: j, rate: cert.rate[j], derivative })
}

/// Concave minorant of the utility in the block variable `w_i`.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub user: usize,
    pub base_beam: CVec,
    pub base_rates: Vec<f64>,
    pub xi: f64,
    /// `dR_j/dI_ij` for `j != user`; zero at `user`.
    pub derivs: Vec<f64>,
    /// `w̄_i^H Q_ij w̄_i` for every receiver `j`.
    pub base_cross: Vec<f64>,
    pub penalty: f64,
    cov: Vec<CMat>,
    signal_dir: CVec,
}

impl SurrogateModel {
    /// Assemble the block model from transmitter `user`'s local data and the
    /// reports it received.
    pub fn from_messages(
        user: usize,
        base_beam: CVec,
        own_cov: Vec<CMat>,
        xi: f64,
        own_rate: f64,
        reports: &[RateReport],
        penalty: f64,
    ) -> Result<Self> {
        let k_users = own_cov.len();
        if reports.len() + 1 != k_users {
            return Err(CobfError::DimensionMismatch { expected: k_users - 1, got: reports.len() });
        }
        let mut base_rates = vec![0.0; k_users];
        let mut derivs = vec![0.0; k_users];
        base_rates[user] = own_rate;
        for r in reports {
            base_rates[r.from] = r.rate;
            derivs[r.from] = r.derivative;
        }
        let base_cross = own_cov.iter().map(|q| checked_quad(q, &base_beam)).collect::<Result<Vec<_>>>()?;
        if !(base_cross[user] > 0.0) {
            return Err(CobfError::ZeroSignal { user });
        }
        let signal_dir = &own_cov[user] * &base_beam;
        Ok(Self { user, base_beam, base_rates, xi, derivs, base_cross, penalty, cov: own_cov, signal_dir })
    }

    pub fn num_users(&self) -> usize {
        self.cov.len()
    }

    /// Surrogate rates at `w`; `None` when the linearized signal term leaves
    /// the logarithm's domain.
    pub fn rates(&self, w: &CVec) -> Option<Vec<f64>> {
        let i = self.user;
        let lin = 2.0 * self.signal_dir.dotc(w).re - self.base_cross[i];
        let arg = self.xi * lin;
        if arg <= -1.0 {
            return None;
        }
        let mut rates = Vec::with_capacity(self.num_users());
        for j in 0..self.num_users() {
            if j == i {
                rates.push(arg.ln_1p() / LN_2);
            } else {
                let q = linalg::quad_form(&self.cov[j], w);
                rates.push(self.base_rates[j] + self.derivs[j] * (q - self.base_cross[j]));
            }
        }
        Some(rates)
    }

    pub fn value(&self, w: &CVec, utility: &UtilitySpec) -> f64 {
        match self.rates(w) {
            Some(r) => {
                let dev = linalg::norm_sqr(&(w - &self.base_beam));
                utility.evaluate(&r) - 0.5 * self.penalty * dev
            }
            None => f64::NEG_INFINITY,
        }
    }

    /// Complex gradient `g` with `f(w + d) ~ f(w) + Re(g^H d)`.
    pub fn gradient(&self, w: &CVec, utility: &UtilitySpec) -> Option<CVec> {
        let rates = self.rates(w)?;
        let du = utility.gradient(&rates);
        let i = self.user;
        let lin = 2.0 * self.signal_dir.dotc(w).re - self.base_cross[i];
        let own = du[i] * self.xi / (LN_2 * (1.0 + self.xi * lin));
        let mut g = &self.signal_dir * Complex64::new(2.0 * own, 0.0);
        for j in 0..self.num_users() {
            if j != i && self.derivs[j] != 0.0 {
                g += (&self.cov[j] * w) * Complex64::new(2.0 * du[j] * self.derivs[j], 0.0);
            }
        }
        g -= (w - &self.base_beam) * Complex64::new(self.penalty, 0.0);
        Some(g)
    }
}

/// Build the block model for `user` at `beams` using full information.
pub fn build_surrogate(user: usize, beams: &BeamformerSet, stats: &ChannelStats, cfg: &NetworkConfig, penalty: f64) -> Result<SurrogateModel> {
    let powers = cross_powers(beams, stats)?;
    for j in 0..cfg.num_users {
        if !(powers.signal(j) > 0.0) {
            return Err(CobfError::ZeroSignal { user: j });
        }
    }
    let cert = CertifiedRates::from_powers(powers, cfg);
    surrogate_from_cert(user, beams, stats, cfg, &cert, penalty)
}

fn surrogate_from_cert(
    user: usize,
    beams: &BeamformerSet,
    stats: &ChannelStats,
    cfg: &NetworkConfig,
    cert: &CertifiedRates,
    penalty: f64,
) -> Result<SurrogateModel> {
    let reports = (0..cfg.num_users).filter(|&j| j != user).map(|j| rate_report(cert, cfg, j, user)).collect::<Result<Vec<_>>>()?;
    let own_cov = (0..cfg.num_users).map(|j| stats.q(user, j).clone()).collect();
    SurrogateModel::from_messages(user, beams.beams[user].clone(), own_cov, cert.xi[user], cert.rate[user], &reports, penalty)
}

pub fn surrogate_value(model: &SurrogateModel, w: &CVec, utility: &UtilitySpec) -> f64 {
    model.value(w, utility)
}

fn projected(w: &CVec, power: f64) -> CVec {
    let mut out = w.clone();
    linalg::project_ball(&mut out, power);
    out
}

/// Norm of `P(w + g) - w`, the projected-gradient stationarity measure.
pub fn projected_gradient_norm(w: &CVec, g: &CVec, power: f64) -> f64 {
    linalg::norm_sqr(&(projected(&(w + g), power) - w)).sqrt()
}

/// Projected gradient ascent with Armijo backtracking along the projection
/// arc, started at the model's base point.
pub fn solve_block_subproblem(model: &SurrogateModel, utility: &UtilitySpec, power: f64, opts: &InnerOptions) -> Result<CVec> {
    ascend_from(model, &model.base_beam, utility, power, opts)
}

/// Projected gradient ascent on the model started at `start`.
pub fn ascend_from(model: &SurrogateModel, start: &CVec, utility: &UtilitySpec, power: f64, opts: &InnerOptions) -> Result<CVec> {
    let mut x = projected(start, power);
    let mut fx = model.value(&x, utility);
    let mut step = opts.initial_step;
    for _ in 0..opts.max_steps {
        let g = model.gradient(&x, utility).ok_or(CobfError::NonFiniteGradient { user: model.user })?;
        if g.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(CobfError::NonFiniteGradient { user: model.user });
        }
        if projected_gradient_norm(&x, &g, power) <= opts.grad_tol {
            break;
        }
        let mut s = step;
        let mut accepted = None;
        while s > 1e-30 {
            let y = projected(&(&x + &g * Complex64::new(s, 0.0)), power);
            let fy = model.value(&y, utility);
            let slope = g.dotc(&(&y - &x)).re;
            if fy.is_finite() && fy >= fx + opts.armijo * slope {
                accepted = Some((y, fy));
                break;
            }
            s *= opts.shrink;
        }
        match accepted {
            Some((y, fy)) => {
                x = y;
                fx = fy;
                step = (s / opts.shrink).min(1e12);
            }
            // no representable ascent step remains
            None => break,
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracePoint {
    pub iter: usize,
    /// Updated user, `None` for the initial point.
    pub user: Option<usize>,
    pub utility: f64,
    pub elapsed_s: f64,
    /// Cumulative scalars exchanged between transmitters.
    pub messages: usize,
}

#[derive(Debug, Clone)]
pub struct DbsumOutput {
    pub beams: BeamformerSet,
    pub rates: CertifiedRates,
    pub utility: f64,
    pub trace: Vec<TracePoint>,
    pub messages: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Scalars exchanged by one block update: `K-1` reports of two scalars each
/// plus `K-1` fresh cross powers.
pub fn messages_per_block_update(k_users: usize) -> usize {
    3 * (k_users - 1)
}

/// Replace beams with no received signal by the scaled principal eigenvector.
pub fn repair_degenerate(beams: &mut BeamformerSet, stats: &ChannelStats, cfg: &NetworkConfig) -> Result<()> {
    for u in 0..cfg.num_users {
        if !(checked_quad(stats.q(u, u), &beams.beams[u])? > 0.0) {
            beams.beams[u] = linalg::principal_eigvec(stats.q(u, u)) * Complex64::new(cfg.power_budget[u].sqrt(), 0.0);
        }
    }
    Ok(())
}

pub fn run_dbsum(stats: &ChannelStats, cfg: &NetworkConfig, utility: &UtilitySpec, init: &BeamformerSet, opts: &DbsumOptions) -> Result<DbsumOutput> {
    let k_users = cfg.num_users;
    if !init.is_feasible(cfg) {
        return Err(CobfError::InvalidConfig("initial beamformers violate the power budget".into()));
    }
    let started = Instant::now();
    let penalty = opts.penalty.unwrap_or_else(|| default_penalty(cfg));
    let max_iters = opts.max_iters.unwrap_or(200 * k_users);

    let mut beams = init.clone();
    repair_degenerate(&mut beams, stats, cfg)?;
    let mut powers: CrossPowers = cross_powers(&beams, stats)?;
    // initial broadcast of every cross power
    let mut messages = k_users * (k_users - 1);
    let mut cert = CertifiedRates::from_powers(powers.clone(), cfg);
    let mut history = vec![utility.evaluate(&cert.rate)];
    let mut trace = vec![TracePoint { iter: 0, user: None, utility: history[0], elapsed_s: 0.0, messages }];
    let mut converged = false;
    let mut n = 0;
    while n < max_iters {
        n += 1;
        let i = (n - 1) % k_users;
        let model = surrogate_from_cert(i, &beams, stats, cfg, &cert, penalty)?;
        let w_new = solve_block_subproblem(&model, utility, cfg.power_budget[i], &opts.inner)?;
        beams.beams[i] = w_new;
        for j in 0..k_users {
            powers.set(i, j, checked_quad(stats.q(i, j), &beams.beams[i])?);
        }
        if !(powers.signal(i) > 0.0) {
            return Err(CobfError::DegenerateIterate { user: i, beams: Box::new(beams) });
        }
        messages += messages_per_block_update(k_users);
        cert = CertifiedRates::from_powers(powers.clone(), cfg);
        let u = utility.evaluate(&cert.rate);
        history.push(u);
        trace.push(TracePoint { iter: n, user: Some(i), utility: u, elapsed_s: started.elapsed().as_secs_f64(), messages });
        if n >= k_users {
            let prev = history[n - k_users];
            if (u - prev).abs() < opts.rel_tol * prev.abs() {
                converged = true;
                break;
            }
        }
    }
    let utility_value = *history.last().expect("history starts non-empty");
    Ok(DbsumOutput { beams, rates: cert, utility: utility_value, trace, messages, iterations: n, converged })
}

/// Largest per-block projected-gradient norm of the true utility at `beams`.
pub fn stationarity_residual(beams: &BeamformerSet, stats: &ChannelStats, cfg: &NetworkConfig, utility: &UtilitySpec) -> Result<f64> {
    let cert = CertifiedRates::from_powers(cross_powers(beams, stats)?, cfg);
    let mut worst: f64 = 0.0;
    for i in 0..cfg.num_users {
        let model = surrogate_from_cert(i, beams, stats, cfg, &cert, 0.0)?;
        let g = model.gradient(&beams.beams[i], utility).ok_or(CobfError::NonFiniteGradient { user: i })?;
        worst = worst.max(projected_gradient_norm(&beams.beams[i], &g, cfg.power_budget[i]));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::implicit_rate::certified_rate;
    use crate::model::generate_instance;
    use crate::utilities::UtilityKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ball_point(rng: &mut ChaCha8Rng, n: usize, power: f64) -> CVec {
        let mut w = CVec::from_fn(n, |_, _| Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        let target = power * rng.random::<f64>();
        w.scale_mut((target / linalg::norm_sqr(&w)).sqrt());
        w
    }

    fn setup(k: usize, nt: usize, seed: u64) -> (ChannelStats, NetworkConfig, BeamformerSet) {
        let cfg = NetworkConfig::from_snr_db(k, nt, 10.0, 0.1).unwrap();
        let stats = generate_instance(seed, &cfg, 0.5).unwrap();
        let init = BeamformerSet::random_unit(&cfg, seed + 100);
        (stats, cfg, init)
    }

    #[test]
    fn surrogate_is_tight_at_base() {
        let (stats, cfg, beams) = setup(3, 2, 1);
        let cert = certified_rate(&beams, &stats, &cfg).unwrap();
        for i in 0..3 {
            let m = build_surrogate(i, &beams, &stats, &cfg, 0.1).unwrap();
            let r = m.rates(&beams.beams[i]).unwrap();
            for j in 0..3 {
                assert!((r[j] - cert.rate[j]).abs() < 1e-12);
            }
            let u = UtilitySpec::wsr(vec![1.0; 3]);
            assert!((surrogate_value(&m, &beams.beams[i], &u) - u.evaluate(&cert.rate)).abs() < 1e-12);
        }
    }

    #[test]
    fn surrogate_rates_lower_bound_true_rates() {
        let (stats, cfg, beams) = setup(3, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..3 {
            let m = build_surrogate(i, &beams, &stats, &cfg, 0.1).unwrap();
            for _ in 0..100 {
                let w = random_ball_point(&mut rng, 3, 1.0);
                let mut trial = beams.clone();
                trial.beams[i] = w.clone();
                let truth = certified_rate(&trial, &stats, &cfg).unwrap();
                if let Some(r) = m.rates(&w) {
                    for j in 0..3 {
                        assert!(r[j] <= truth.rate[j] + 1e-9, "j={j}: {} > {}", r[j], truth.rate[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn large_penalty_makes_base_optimal() {
        let (stats, cfg, beams) = setup(2, 2, 3);
        let m = build_surrogate(0, &beams, &stats, &cfg, 1e9).unwrap();
        let u = UtilitySpec::wsr(vec![1.0; 2]);
        let base = m.value(&beams.beams[0], &u);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let w = random_ball_point(&mut rng, 2, 1.0);
            assert!(m.value(&w, &u) < base);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (stats, cfg, beams) = setup(3, 2, 4);
        for kind in [UtilityKind::WeightedSumRate, UtilityKind::ProportionalFairness, UtilityKind::HarmonicMean, UtilityKind::MmfLse] {
            let u = UtilitySpec::new(kind, vec![0.2, 0.3, 0.5]).unwrap();
            let m = build_surrogate(1, &beams, &stats, &cfg, 0.05).unwrap();
            let mut w = beams.beams[1].clone();
            w[0] += Complex64::new(0.05, -0.02);
            let g = m.gradient(&w, &u).unwrap();
            let h = 1e-6;
            for k in 0..2 {
                for dir in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
                    let mut wp = w.clone();
                    let mut wm = w.clone();
                    wp[k] += dir * h;
                    wm[k] -= dir * h;
                    let fd = (m.value(&wp, &u) - m.value(&wm, &u)) / (2.0 * h);
                    let an = (g[k].conj() * dir).re;
                    assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{kind}: {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn subproblem_ascends_and_stays_feasible() {
        let (stats, cfg, beams) = setup(3, 4, 6);
        let u = UtilitySpec::new(UtilityKind::ProportionalFairness, vec![1.0; 3]).unwrap();
        for i in 0..3 {
            let m = build_surrogate(i, &beams, &stats, &cfg, 0.01).unwrap();
            let w = solve_block_subproblem(&m, &u, 1.0, &InnerOptions::default()).unwrap();
            assert!(linalg::norm_sqr(&w).sqrt() <= 1.0 + 1e-12);
            assert!(m.value(&w, &u) >= m.value(&beams.beams[i], &u) - 1e-12);
            let g = m.gradient(&w, &u).unwrap();
            assert!(projected_gradient_norm(&w, &g, 1.0) <= 1e-7);
            // restarting from the maximizer leaves it in place
            let w2 = ascend_from(&m, &w, &u, 1.0, &InnerOptions::default()).unwrap();
            let moved = linalg::norm_sqr(&(&w2 - &w)).sqrt();
            assert!(moved < 1e-6, "moved {moved}");
        }
    }

    #[test]
    fn local_reports_reproduce_full_model() {
        let (stats, cfg, beams) = setup(4, 2, 7);
        let full = build_surrogate(2, &beams, &stats, &cfg, 0.1).unwrap();
        // each receiver j knows only the powers arriving at it
        let powers = cross_powers(&beams, &stats).unwrap();
        let mut reports = Vec::new();
        for j in [0usize, 1, 3] {
            let mut local = vec![0.0; 16];
            for k in 0..4 {
                local[k * 4 + j] = powers.get(k, j);
            }
            let local = CrossPowers::from_values(4, local).unwrap();
            let xi_j =
                crate::implicit_rate::solve_xi(&local.interference(j), cfg.noise_power[j], cfg.success_target[j], crate::implicit_rate::XI_REL_TOL);
            let d = rate_derivative(&local, xi_j, cfg.noise_power[j], j, 2).unwrap();
            let r = crate::implicit_rate::certified_rate_value(xi_j, local.signal(j));
            reports.push(RateReport { from: j, rate: r, derivative: d });
        }
        let xi_2 =
            crate::implicit_rate::solve_xi(&powers.interference(2), cfg.noise_power[2], cfg.success_target[2], crate::implicit_rate::XI_REL_TOL);
        let own_cov = (0..4).map(|j| stats.q(2, j).clone()).collect();
        let rate_2 = crate::implicit_rate::certified_rate_value(xi_2, powers.signal(2));
        let local = SurrogateModel::from_messages(2, beams.beams[2].clone(), own_cov, xi_2, rate_2, &reports, 0.1).unwrap();
        assert_eq!(local.base_rates, full.base_rates);
        assert_eq!(local.derivs, full.derivs);
        assert_eq!(local.xi, full.xi);
    }

    #[test]
    fn single_user_reaches_principal_eigenvector() {
        let cfg = NetworkConfig::from_snr_db(1, 4, 10.0, 0.1).unwrap();
        let stats = generate_instance(9, &cfg, 1.0).unwrap();
        let init = BeamformerSet::random_unit(&cfg, 1);
        let opts = DbsumOptions { rel_tol: 1e-9, max_iters: Some(200), ..Default::default() };
        let out = run_dbsum(&stats, &cfg, &UtilitySpec::wsr(vec![1.0]), &init, &opts).unwrap();
        let lmax = linalg::lambda_max(stats.q(0, 0));
        let best = (1.0 + (1.0f64 / 0.9).ln() * lmax / cfg.noise_power[0]).log2();
        assert!((out.utility - best).abs() <= 1e-4 * best, "{} vs {}", out.utility, best);
    }

    #[test]
    fn degenerate_start_is_repaired() {
        let (stats, cfg, _) = setup(2, 2, 10);
        let init = BeamformerSet::zeros(2, 2);
        let out = run_dbsum(&stats, &cfg, &UtilitySpec::wsr(vec![1.0; 2]), &init, &DbsumOptions::default()).unwrap();
        assert!(out.beams.is_feasible(&cfg));
        assert!(out.rates.rate.iter().all(|r| *r > 0.0));
    }

    #[test]
    fn trace_is_monotone_and_messages_counted() {
        let (stats, cfg, init) = setup(3, 2, 11);
        let u = UtilitySpec::new(UtilityKind::HarmonicMean, vec![1.0 / 6.0, 1.0 / 3.0, 0.5]).unwrap();
        let out = run_dbsum(&stats, &cfg, &u, &init, &DbsumOptions::default()).unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1].utility >= w[0].utility - 1e-9);
            assert_eq!(w[1].messages - w[0].messages, 6);
        }
        assert_eq!(out.trace[0].messages, 6);
        assert!(out.converged);
    }
}
