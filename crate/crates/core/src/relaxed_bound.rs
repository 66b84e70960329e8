//! Upper bound on the outage-constrained utility maximum.
//!
//! Replacing `ln(1+x)` by `x`, the product by a sum, and `w w^H` by a PSD
//! `W` turns the rate region into a union of SDP-representable sets. The
//! polyblock engine then maximizes the utility over that relaxed region
//! intersected with the box of single-user maximal rates.

use num_complex::Complex64;

use crate::error::{CobfError, Result};
use crate::linalg;
use crate::model::{sinr_threshold, BeamformerSet, ChannelStats, NetworkConfig};
use crate::polyblock::{ray_intersection, run_poa, MembershipOracle, PoaOptions, PoaTrace, RayHit, Vertex};
use crate::sdp::{solve_max_slack, BlockSdpProblem, SdpOptions, SdpSolution, SlackRow};
use crate::utilities::UtilitySpec;

pub const BETA_REL_TOL: f64 = 1e-6;
const RETRY_PERTURBATION: f64 = 1e-9;

/// `log2(1 + ln(1/rho_i) P_i lambda_max(Q_ii) / sigma_i^2)` per user.
pub fn initial_vertex(stats: &ChannelStats, cfg: &NetworkConfig) -> Result<Vertex> {
    let coords = (0..cfg.num_users)
        .map(|i| {
            let snr = (1.0 / cfg.success_target[i]).ln() * cfg.power_budget[i] * linalg::lambda_max(stats.q(i, i)) / cfg.noise_power[i];
            snr.ln_1p() / std::f64::consts::LN_2
        })
        .collect();
    Vertex::new(coords)
}

#[derive(Debug, Clone)]
pub struct RelaxedInstance {
    pub stats: ChannelStats,
    pub cfg: NetworkConfig,
    /// `(1 - rho_i) / rho_i`.
    pub thresholds: Vec<f64>,
    pub box_vertex: Vertex,
    pub sdp: SdpOptions,
}

impl RelaxedInstance {
    pub fn new(stats: &ChannelStats, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        stats.validate()?;
        let thresholds = cfg.success_target.iter().map(|r| (1.0 - r) / r).collect();
        Ok(Self {
            stats: stats.clone(),
            cfg: cfg.clone(),
            thresholds,
            box_vertex: initial_vertex(stats, cfg)?,
            sdp: SdpOptions { sign_only: true, ..Default::default() },
        })
    }

    /// Max-slack SDP whose optimum is nonnegative iff `rates` lies in the
    /// relaxed region. Row `i` is divided by `sigma_i^2`; users with zero
    /// rate impose no constraint.
    pub fn problem(&self, rates: &[f64]) -> Option<BlockSdpProblem> {
        let k_users = self.cfg.num_users;
        let rows: Vec<SlackRow> = (0..k_users)
            .filter(|&i| rates[i] > 0.0)
            .map(|i| {
                let noise = self.cfg.noise_power[i];
                let a = self.thresholds[i] / sinr_threshold(rates[i]);
                let coeffs = (0..k_users)
                    .map(|k| {
                        let scale = if k == i { a / noise } else { -1.0 / noise };
                        Some(self.stats.q(k, i) * Complex64::new(scale, 0.0))
                    })
                    .collect();
                SlackRow { coeffs, offset: 1.0 }
            })
            .collect();
        if rows.is_empty() {
            return None;
        }
        Some(BlockSdpProblem::new(self.cfg.num_antennas, self.cfg.power_budget.clone(), rows).expect("instance data already validated"))
    }

    pub fn solve(&self, rates: &[f64], opts: &SdpOptions) -> Result<Option<SdpSolution>> {
        match self.problem(rates) {
            Some(p) => Ok(Some(solve_max_slack(&p, opts)?)),
            None => Ok(None),
        }
    }

    /// Signed feasibility margin of `rates`. An undecided solve is retried at
    /// slightly perturbed rates; if the sign is still open the point counts
    /// as a member, which can only loosen the bound.
    pub fn feasibility_margin(&self, rates: &[f64]) -> Result<f64> {
        for factor in [1.0, 1.0 + RETRY_PERTURBATION, 1.0 - RETRY_PERTURBATION] {
            let trial: Vec<f64> = rates.iter().map(|r| r * factor).collect();
            match self.solve(&trial, &self.sdp)? {
                None => return Ok(1.0),
                Some(sol) if sol.sign_certain() => return Ok(sol.margin()),
                Some(_) => continue,
            }
        }
        Ok(0.0)
    }
}

impl MembershipOracle for RelaxedInstance {
    fn margin(&self, x: &[f64]) -> Result<f64> {
        self.feasibility_margin(x)
    }
}

/// Largest `beta` with `beta v` in the relaxed region and inside the box.
pub fn solve_beta(inst: &RelaxedInstance, v: &Vertex, rel_tol: f64) -> Result<RayHit> {
    ray_intersection(v, inst, &inst.box_vertex, rel_tol)
}

#[derive(Debug, Clone)]
pub struct UpperBound {
    pub value: f64,
    pub trace: PoaTrace,
}

pub fn upper_bound(inst: &RelaxedInstance, utility: &UtilitySpec, opts: &PoaOptions) -> Result<UpperBound> {
    if utility.weights.len() != inst.cfg.num_users {
        return Err(CobfError::DimensionMismatch { expected: inst.cfg.num_users, got: utility.weights.len() });
    }
    let f = |x: &[f64]| utility.evaluate(x);
    let trace = run_poa(&f, inst, inst.box_vertex.clone(), opts)?;
    Ok(UpperBound { value: trace.upper(), trace })
}

/// Bound on `max min_i R_i / alpha_i`: one ray search along `alpha`,
/// reported at the infeasible end of the bracket.
pub fn mmf_upper_bound(inst: &RelaxedInstance, alpha: &[f64]) -> Result<f64> {
    let v = Vertex::new(alpha.to_vec())?;
    Ok(solve_beta(inst, &v, BETA_REL_TOL)?.beta_upper)
}

/// Per-user slack of the relaxed constraint at `W_i = w_i w_i^H`, in units of
/// `sigma_i^2`: `a_i tr(W_i Q_ii) - sum_{k != i} tr(W_k Q_ki) - sigma_i^2`,
/// multiplied through by `2^{R_i} - 1` so zero rates are allowed.
pub fn relaxed_slack(inst: &RelaxedInstance, beams: &BeamformerSet, rates: &[f64]) -> Vec<f64> {
    let k_users = inst.cfg.num_users;
    (0..k_users)
        .map(|i| {
            let signal = linalg::quad_form(inst.stats.q(i, i), &beams.beams[i]);
            let interf: f64 = (0..k_users).filter(|&k| k != i).map(|k| linalg::quad_form(inst.stats.q(k, i), &beams.beams[k])).sum();
            (inst.thresholds[i] * signal - (inst.cfg.noise_power[i] + interf) * sinr_threshold(rates[i])) / inst.cfg.noise_power[i]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::implicit_rate::certified_rate;
    use crate::model::generate_instance;
    use crate::utilities::UtilityKind;

    #[test]
    fn initial_vertex_scalar_case() {
        let cfg = NetworkConfig::symmetric(1, 1, 1.0, 0.1).unwrap();
        let stats = ChannelStats::new(1, 1, vec![linalg::CMat::identity(1, 1)]).unwrap();
        let v = initial_vertex(&stats, &cfg).unwrap();
        assert!((v.coords()[0] - 0.144_516_984_389_850_47).abs() < 1e-15);
    }

    #[test]
    fn single_user_beta_closed_form() {
        let cfg = NetworkConfig::from_snr_db(1, 3, 10.0, 0.1).unwrap();
        let stats = generate_instance(4, &cfg, 1.0).unwrap();
        let inst = RelaxedInstance::new(&stats, &cfg).unwrap();
        // direction far below the box so the cap does not bind
        let v = Vertex::new(vec![0.01]).unwrap();
        let hit = solve_beta(&inst, &v, 1e-9).unwrap();
        let lmax = linalg::lambda_max(stats.q(0, 0));
        let relaxed = (1.0 + (1.0 / 0.9 - 1.0) * lmax / cfg.noise_power[0]).log2();
        let capped = relaxed.min(inst.box_vertex.coords()[0]);
        assert!((hit.beta * 0.01 - capped).abs() < 1e-6 * capped, "{} vs {}", hit.beta * 0.01, capped);
    }

    #[test]
    fn certified_rates_are_relaxed_feasible() {
        let cfg = NetworkConfig::from_snr_db(3, 2, 10.0, 0.1).unwrap();
        let stats = generate_instance(6, &cfg, 0.8).unwrap();
        let inst = RelaxedInstance::new(&stats, &cfg).unwrap();
        for seed in 0..20 {
            let beams = BeamformerSet::random_unit(&cfg, seed);
            let cert = certified_rate(&beams, &stats, &cfg).unwrap();
            assert!(relaxed_slack(&inst, &beams, &cert.rate).iter().all(|s| *s >= -1e-10));
            assert!(inst.feasibility_margin(&cert.rate).unwrap() >= 0.0);
        }
    }

    #[test]
    fn bound_dominates_random_points() {
        let cfg = NetworkConfig::from_snr_db(2, 2, 10.0, 0.1).unwrap();
        let stats = generate_instance(2, &cfg, 0.5).unwrap();
        let inst = RelaxedInstance::new(&stats, &cfg).unwrap();
        let u = UtilitySpec::new(UtilityKind::WeightedSumRate, vec![1.0, 1.0]).unwrap();
        let ub = upper_bound(&inst, &u, &PoaOptions::default()).unwrap();
        for seed in 0..10 {
            let cert = certified_rate(&BeamformerSet::random_unit(&cfg, seed), &stats, &cfg).unwrap();
            assert!(u.evaluate(&cert.rate) <= ub.value);
        }
        assert!(ub.trace.iterations.windows(2).all(|w| w[1].upper <= w[0].upper && w[1].lower >= w[0].lower));
    }
}
