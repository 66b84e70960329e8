#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use cobf::linalg::CVec;
use cobf::model::{BeamformerSet, NetworkConfig};
use cobf::relaxed_bound::RelaxedInstance;
use cobf::sdp::BlockSdpProblem;

/// Random beamformers with norms spread over `(0, sqrt(P)]`.
pub fn random_beams<R: Rng>(cfg: &NetworkConfig, rng: &mut R) -> BeamformerSet {
    let beams = (0..cfg.num_users).map(|u| random_beam(cfg.num_antennas, cfg.power_budget[u], rng)).collect();
    BeamformerSet::new(beams)
}

pub fn random_beam<R: Rng>(n: usize, power: f64, rng: &mut R) -> CVec {
    let w = CVec::from_fn(n, |_, _| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)));
    let target = rng.random_range(0.05..1.0f64) * power.sqrt();
    let norm = w.norm();
    w * Complex64::new(target / norm, 0.0)
}

/// Exact max-slack value of a scalar-block problem by enumerating the
/// vertices of the LP in `(p_1, .., p_K, t)`.
pub fn scalar_max_slack(p: &BlockSdpProblem) -> f64 {
    assert_eq!(p.block_dim, 1);
    let k = p.num_blocks();
    let n = k + 1;
    // each constraint as (a, b) meaning a.x >= b
    let mut cons: Vec<(Vec<f64>, f64)> = Vec::new();
    for row in &p.rows {
        let mut a: Vec<f64> = row.coeffs.iter().map(|c| c.as_ref().map_or(0.0, |c| c[(0, 0)].re)).collect();
        a.push(-1.0);
        cons.push((a, row.offset));
    }
    for b in 0..k {
        let mut lo = vec![0.0; n];
        lo[b] = 1.0;
        cons.push((lo, 0.0));
        let mut hi = vec![0.0; n];
        hi[b] = -1.0;
        cons.push((hi, -p.power[b]));
    }
    let m = cons.len();
    let mut best = f64::NEG_INFINITY;
    let mut idx: Vec<usize> = (0..n).collect();
    loop {
        let a = DMatrix::from_fn(n, n, |r, c| cons[idx[r]].0[c]);
        let b = DVector::from_fn(n, |r, _| cons[idx[r]].1);
        if let Some(x) = a.lu().solve(&b) {
            let ok = cons.iter().all(|(a, b)| a.iter().zip(x.iter()).map(|(u, v)| u * v).sum::<f64>() >= b - 1e-9 * (1.0 + b.abs()));
            if ok && x.iter().all(|v| v.is_finite()) {
                best = best.max(x[n - 1]);
            }
        }
        // next combination
        let mut i = n;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if idx[i] < m - n + i {
                idx[i] += 1;
                for j in i + 1..n {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Largest `beta` along `v` over a power grid with the given number of
/// steps per axis, for two single-antenna users, capped by the box.
pub fn grid_beta(inst: &RelaxedInstance, v: &[f64], steps: usize) -> f64 {
    assert_eq!(inst.cfg.num_users, 2);
    assert_eq!(inst.cfg.num_antennas, 1);
    let q = |k: usize, i: usize| inst.stats.q(k, i)[(0, 0)].re;
    let cap = (0..2).map(|i| inst.box_vertex.coords()[i] / v[i]).fold(f64::INFINITY, f64::min);
    let mut best = 0.0f64;
    for a in 0..=steps {
        let p0 = inst.cfg.power_budget[0] * a as f64 / steps as f64;
        for b in 0..=steps {
            let p1 = inst.cfg.power_budget[1] * b as f64 / steps as f64;
            let p = [p0, p1];
            let beta = (0..2)
                .map(|i| {
                    let j = 1 - i;
                    let sinr = inst.thresholds[i] * q(i, i) * p[i] / (inst.cfg.noise_power[i] + q(j, i) * p[j]);
                    sinr.ln_1p() / std::f64::consts::LN_2 / v[i]
                })
                .fold(f64::INFINITY, f64::min);
            best = best.max(beta);
        }
    }
    best.min(cap)
}
