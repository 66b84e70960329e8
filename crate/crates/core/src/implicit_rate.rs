//! Implicit interference level and certified rates.
//!
//! For user `i` the outage constraint holds with equality exactly when
//! `R_i = log2(1 + xi_i * I_ii)`, where `xi_i` is the unique positive root of
//!
//! ```text
//! phi(xi) = ln(rho_i) + sigma_i^2 xi + sum_{k != i} ln(1 + I_ki xi)
//! ```
//!
//! `phi` is strictly increasing with `phi(0) = ln(rho) < 0` and
//! `phi(ln(1/rho) / sigma^2) >= 0`, which brackets the root for bisection.

use std::f64::consts::LN_2;

use crate::error::{CobfError, Result};
use crate::model::{cross_powers, BeamformerSet, ChannelStats, CrossPowers, NetworkConfig};

/// Relative bracket width at which bisection stops.
pub const XI_REL_TOL: f64 = 1e-12;
const MAX_BISECTIONS: usize = 200;

pub fn phi(xi: f64, interf: &[f64], noise: f64, rho: f64) -> f64 {
    rho.ln() + noise * xi + interf.iter().map(|&ik| (ik * xi).ln_1p()).sum::<f64>()
}

/// Upper end of the bisection bracket, the interference-free root.
pub fn xi_upper(noise: f64, rho: f64) -> f64 {
    -rho.ln() / noise
}

/// Root of `phi` by bisection on `[0, ln(1/rho)/sigma^2]`, stopped once the
/// bracket is narrower than `rel_tol` times its initial width.
pub fn solve_xi(interf: &[f64], noise: f64, rho: f64, rel_tol: f64) -> f64 {
    let mut hi = xi_upper(noise, rho);
    if interf.iter().all(|&v| v == 0.0) {
        return hi;
    }
    let mut lo = 0.0;
    let width = rel_tol.max(f64::EPSILON) * hi;
    let mut iters = 0;
    while hi - lo > width {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid, interf, noise, rho) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        iters += 1;
        assert!(iters < MAX_BISECTIONS, "xi bisection failed to narrow its bracket");
    }
    0.5 * (lo + hi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertifiedRates {
    pub xi: Vec<f64>,
    pub rate: Vec<f64>,
    pub powers: CrossPowers,
}

impl CertifiedRates {
    pub fn from_powers(powers: CrossPowers, cfg: &NetworkConfig) -> Self {
        let k_users = cfg.num_users;
        let mut xi = Vec::with_capacity(k_users);
        let mut rate = Vec::with_capacity(k_users);
        for i in 0..k_users {
            let x = solve_xi(&powers.interference(i), cfg.noise_power[i], cfg.success_target[i], XI_REL_TOL);
            xi.push(x);
            rate.push(certified_rate_value(x, powers.signal(i)));
        }
        Self { xi, rate, powers }
    }

    /// `dR_j / dI_ij` at the stored point; see [`rate_derivative`].
    pub fn derivative(&self, cfg: &NetworkConfig, j: usize, i: usize) -> Result<f64> {
        rate_derivative(&self.powers, self.xi[j], cfg.noise_power[j], j, i)
    }
}

pub fn certified_rate_value(xi: f64, signal: f64) -> f64 {
    (xi * signal).ln_1p() / LN_2
}

pub fn certified_rate(beams: &BeamformerSet, stats: &ChannelStats, cfg: &NetworkConfig) -> Result<CertifiedRates> {
    let powers = cross_powers(beams, stats)?;
    Ok(CertifiedRates::from_powers(powers, cfg))
}

/// Partial derivative of user `j`'s certified rate with respect to the
/// interference power `I_ij` that transmitter `i` causes at receiver `j`,
/// from the implicit function theorem applied to `phi`:
///
/// ```text
/// dR_j/dI_ij = -I_jj xi_j / (ln2 (1 + xi_j I_jj))
///              / [(1 + I_ij xi_j) (sigma_j^2 + sum_{l != j} I_lj / (1 + I_lj xi_j))]
/// ```
pub fn rate_derivative(powers: &CrossPowers, xi_j: f64, noise_j: f64, j: usize, i: usize) -> Result<f64> {
    assert_ne!(i, j, "derivative is taken with respect to a cross link");
    let signal = powers.signal(j);
    if !(signal > 0.0) {
        return Err(CobfError::ZeroSignal { user: j });
    }
    let slope: f64 = noise_j
        + (0..powers.num_users())
            .filter(|&l| l != j)
            .map(|l| {
                let p = powers.get(l, j);
                p / (1.0 + p * xi_j)
            })
            .sum::<f64>();
    let lead = -signal * xi_j / (LN_2 * (1.0 + xi_j * signal));
    Ok(lead / ((1.0 + powers.get(i, j) * xi_j) * slope))
}

pub fn rate_partial_derivative(beams: &BeamformerSet, stats: &ChannelStats, cfg: &NetworkConfig, j: usize, i: usize) -> Result<f64> {
    let cert = certified_rate(beams, stats, cfg)?;
    cert.derivative(cfg, j, i)
}

/// Certified rate as a function of the raw powers at receiver `i`:
/// `signal = I_ii`, `interf = {I_ki}_{k != i}`.
pub fn rate_from_scalars(signal: f64, interf: &[f64], noise: f64, rho: f64) -> f64 {
    certified_rate_value(solve_xi(interf, noise, rho, XI_REL_TOL), signal)
}
