//! Network and channel data model.
//!
//! Covariance `Q[k][i]` describes the fading channel from transmitter `k` to
//! receiver `i`. All indices are zero-based in the API; the text format uses
//! one-based indices.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{CobfError, Result};
use crate::linalg::{self, CMat, CVec};

/// Relative slack allowed on the per-user power budget.
pub const POWER_SLACK: f64 = 1e-9;

const NEG_QUAD_TOL: f64 = 1e-12;
const MC_CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub num_users: usize,
    pub num_antennas: usize,
    pub noise_power: Vec<f64>,
    pub power_budget: Vec<f64>,
    pub outage_tolerance: Vec<f64>,
    /// `1 - outage_tolerance`, stored so every consumer sees the same value.
    pub success_target: Vec<f64>,
    pub priority_weight: Vec<f64>,
}

impl NetworkConfig {
    pub fn new(
        num_users: usize,
        num_antennas: usize,
        noise_power: Vec<f64>,
        power_budget: Vec<f64>,
        outage_tolerance: Vec<f64>,
        priority_weight: Vec<f64>,
    ) -> Result<Self> {
        let success_target = outage_tolerance.iter().map(|e| 1.0 - e).collect();
        let cfg = Self { num_users, num_antennas, noise_power, power_budget, outage_tolerance, success_target, priority_weight };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Identical users: common noise power and outage tolerance, unit power
    /// budgets and unit weights.
    pub fn symmetric(num_users: usize, num_antennas: usize, noise_power: f64, outage_tolerance: f64) -> Result<Self> {
        Self::new(
            num_users,
            num_antennas,
            vec![noise_power; num_users],
            vec![1.0; num_users],
            vec![outage_tolerance; num_users],
            vec![1.0; num_users],
        )
    }

    /// Symmetric configuration with `1/sigma^2` given in dB.
    pub fn from_snr_db(num_users: usize, num_antennas: usize, snr_db: f64, outage_tolerance: f64) -> Result<Self> {
        Self::symmetric(num_users, num_antennas, 10f64.powf(-snr_db / 10.0), outage_tolerance)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.priority_weight = weights;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_users;
        if k == 0 || self.num_antennas == 0 {
            return Err(CobfError::InvalidConfig("need at least one user and one antenna".into()));
        }
        for (name, v) in [
            ("noise_power", &self.noise_power),
            ("power_budget", &self.power_budget),
            ("outage_tolerance", &self.outage_tolerance),
            ("success_target", &self.success_target),
            ("priority_weight", &self.priority_weight),
        ] {
            if v.len() != k {
                return Err(CobfError::InvalidConfig(format!("{name} has length {} but K = {k}", v.len())));
            }
        }
        for u in 0..k {
            if !(self.noise_power[u] > 0.0 && self.noise_power[u].is_finite()) {
                return Err(CobfError::InvalidConfig(format!("noise power of user {u} must be positive")));
            }
            if !(self.power_budget[u] > 0.0 && self.power_budget[u].is_finite()) {
                return Err(CobfError::InvalidConfig(format!("power budget of user {u} must be positive")));
            }
            if !(self.priority_weight[u] > 0.0 && self.priority_weight[u].is_finite()) {
                return Err(CobfError::InvalidConfig(format!("weight of user {u} must be positive")));
            }
            let eps = self.outage_tolerance[u];
            if !(eps > 0.0 && eps < 1.0) {
                return Err(CobfError::InvalidConfig(format!("outage tolerance of user {u} must lie in (0,1)")));
            }
            if self.success_target[u] != 1.0 - eps {
                return Err(CobfError::InvalidConfig(format!("success target of user {u} is not 1 - eps")));
            }
        }
        Ok(())
    }
}

/// Channel distribution information: the K x K grid of covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    num_users: usize,
    num_antennas: usize,
    cov: Vec<CMat>,
}

impl ChannelStats {
    /// `cov[k * K + i]` is `Q[k][i]`.
    pub fn new(num_users: usize, num_antennas: usize, cov: Vec<CMat>) -> Result<Self> {
        let stats = Self { num_users, num_antennas, cov };
        stats.validate()?;
        Ok(stats)
    }

    pub fn from_fn(num_users: usize, num_antennas: usize, mut f: impl FnMut(usize, usize) -> CMat) -> Result<Self> {
        let mut cov = Vec::with_capacity(num_users * num_users);
        for k in 0..num_users {
            for i in 0..num_users {
                cov.push(f(k, i));
            }
        }
        Self::new(num_users, num_antennas, cov)
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    pub fn num_antennas(&self) -> usize {
        self.num_antennas
    }

    /// Covariance of the channel from transmitter `k` to receiver `i`.
    pub fn q(&self, k: usize, i: usize) -> &CMat {
        &self.cov[k * self.num_users + i]
    }

    pub fn validate(&self) -> Result<()> {
        let (k_users, n) = (self.num_users, self.num_antennas);
        if self.cov.len() != k_users * k_users {
            return Err(CobfError::DimensionMismatch { expected: k_users * k_users, got: self.cov.len() });
        }
        for k in 0..k_users {
            for i in 0..k_users {
                let q = self.q(k, i);
                if q.nrows() != n || q.ncols() != n {
                    return Err(CobfError::DimensionMismatch { expected: n, got: q.nrows() });
                }
                let scale = q.iter().map(|z| z.norm()).fold(0.0, f64::max);
                for r in 0..n {
                    for c in r..n {
                        if (q[(r, c)] - q[(c, r)].conj()).norm() > 1e-12 * scale.max(f64::MIN_POSITIVE) {
                            return Err(CobfError::InvalidConfig(format!("Q[{k}][{i}] is not Hermitian")));
                        }
                    }
                }
                let (vals, _) = linalg::hermitian_eigh(q);
                let min_eig = vals[0];
                let tr = linalg::trace_re(q);
                if min_eig < -1e-10 * (tr / n as f64).abs() {
                    return Err(CobfError::NotPsd { k, i, min_eig });
                }
                if k == i && vals[n - 1] <= 0.0 {
                    return Err(CobfError::InvalidConfig(format!("direct covariance Q[{k}][{k}] is zero")));
                }
            }
        }
        Ok(())
    }

    /// Serialize as text: per `(k, i)` a header `Q k i N_t` (one-based
    /// indices) followed by `N_t` rows of `re+imj` entries with 17
    /// significant digits.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        let n = self.num_antennas;
        for k in 0..self.num_users {
            for i in 0..self.num_users {
                writeln!(out, "Q {} {} {}", k + 1, i + 1, n)?;
                let q = self.q(k, i);
                for r in 0..n {
                    let mut line = String::new();
                    for c in 0..n {
                        if c > 0 {
                            line.push(' ');
                        }
                        write_complex(&mut line, q[(r, c)]);
                    }
                    writeln!(out, "{line}")?;
                }
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn read_text<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines().enumerate().filter_map(|(no, l)| match l {
            Ok(s) if s.trim().is_empty() => None,
            other => Some((no + 1, other)),
        });
        let mut records: Vec<(usize, usize, CMat)> = Vec::new();
        let mut nt_seen: Option<usize> = None;
        while let Some((no, line)) = lines.next() {
            let line = line?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "Q" {
                return Err(CobfError::Parse { line: no, msg: format!("expected `Q k i N_t`, got `{line}`") });
            }
            let parse_idx = |s: &str| -> Result<usize> { s.parse::<usize>().map_err(|e| CobfError::Parse { line: no, msg: e.to_string() }) };
            let (k, i, n) = (parse_idx(parts[1])?, parse_idx(parts[2])?, parse_idx(parts[3])?);
            if k == 0 || i == 0 || n == 0 {
                return Err(CobfError::Parse { line: no, msg: "indices are one-based and N_t must be positive".into() });
            }
            if let Some(prev) = nt_seen {
                if prev != n {
                    return Err(CobfError::Parse { line: no, msg: format!("N_t changed from {prev} to {n}") });
                }
            }
            nt_seen = Some(n);
            let mut q = CMat::zeros(n, n);
            for r in 0..n {
                let (row_no, row) = lines.next().ok_or(CobfError::Parse { line: no, msg: "truncated matrix".into() })?;
                let row = row?;
                let entries: Vec<&str> = row.split_whitespace().collect();
                if entries.len() != n {
                    return Err(CobfError::Parse { line: row_no, msg: format!("expected {n} entries") });
                }
                for (c, e) in entries.iter().enumerate() {
                    q[(r, c)] = parse_complex(e).ok_or(CobfError::Parse { line: row_no, msg: format!("bad complex `{e}`") })?;
                }
            }
            records.push((k - 1, i - 1, q));
        }
        let n = nt_seen.ok_or(CobfError::Parse { line: 0, msg: "no records".into() })?;
        let k_users = (records.len() as f64).sqrt().round() as usize;
        if k_users * k_users != records.len() {
            return Err(CobfError::Parse { line: 0, msg: format!("{} records is not K^2", records.len()) });
        }
        let mut cov: Vec<Option<CMat>> = vec![None; k_users * k_users];
        for (k, i, q) in records {
            if k >= k_users || i >= k_users {
                return Err(CobfError::Parse { line: 0, msg: format!("index ({}, {}) out of range", k + 1, i + 1) });
            }
            if cov[k * k_users + i].replace(q).is_some() {
                return Err(CobfError::Parse { line: 0, msg: format!("duplicate record ({}, {})", k + 1, i + 1) });
            }
        }
        let cov = cov.into_iter().map(|q| q.expect("all K^2 slots filled")).collect();
        Self::new(k_users, n, cov)
    }

    pub fn from_text(s: &str) -> Result<Self> {
        Self::read_text(s.as_bytes())
    }
}

fn write_complex(buf: &mut String, z: Complex64) {
    write!(buf, "{:.16e}{:+.16e}j", z.re, z.im).expect("string write");
}

fn parse_complex(s: &str) -> Option<Complex64> {
    let body = s.strip_suffix('j')?;
    let bytes = body.as_bytes();
    let split = (1..bytes.len()).rev().find(|&p| (bytes[p] == b'+' || bytes[p] == b'-') && !matches!(bytes[p - 1], b'e' | b'E'))?;
    let re = body[..split].parse::<f64>().ok()?;
    let im = body[split..].parse::<f64>().ok()?;
    Some(Complex64::new(re, im))
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

fn complex_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> CVec {
    DVector::from_fn(n, |_, _| complex_normal(rng))
}

/// Random covariances with `lambda_max(Q[i][i]) = 1` and
/// `lambda_max(Q[k][i]) = eta` for `k != i`; each is `G G^H` for a square
/// matrix `G` of i.i.d. standard complex Gaussians, rescaled.
pub fn generate_instance(seed: u64, cfg: &NetworkConfig, eta: f64) -> Result<ChannelStats> {
    if !(eta > 0.0 && eta <= 1.0) {
        return Err(CobfError::InvalidConfig(format!("eta must lie in (0,1], got {eta}")));
    }
    let (k_users, n) = (cfg.num_users, cfg.num_antennas);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ChannelStats::from_fn(k_users, n, |k, i| {
        let g = CMat::from_fn(n, n, |_, _| complex_normal(&mut rng));
        let mut q = &g * g.adjoint();
        linalg::hermitize(&mut q);
        let target = if k == i { 1.0 } else { eta };
        let lmax = linalg::lambda_max(&q);
        q.scale_mut(target / lmax);
        q
    })
}

/// One fading draw: `h[k][i]` is the channel from transmitter `k` to receiver `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    num_users: usize,
    h: Vec<CVec>,
}

impl ChannelRealization {
    pub fn new(num_users: usize, h: Vec<CVec>) -> Result<Self> {
        if h.len() != num_users * num_users {
            return Err(CobfError::DimensionMismatch { expected: num_users * num_users, got: h.len() });
        }
        if h.iter().any(|v| v.iter().any(|z| !z.re.is_finite() || !z.im.is_finite())) {
            return Err(CobfError::InvalidConfig("channel realization has non-finite entries".into()));
        }
        Ok(Self { num_users, h })
    }

    pub fn h(&self, k: usize, i: usize) -> &CVec {
        &self.h[k * self.num_users + i]
    }
}

/// Pre-factored sampler for `h[k][i] ~ CN(0, Q[k][i])`.
#[derive(Debug, Clone)]
pub struct ChannelSampler {
    num_users: usize,
    num_antennas: usize,
    factors: Vec<CMat>,
}

impl ChannelSampler {
    pub fn new(stats: &ChannelStats) -> Result<Self> {
        let k_users = stats.num_users();
        let mut factors = Vec::with_capacity(k_users * k_users);
        for k in 0..k_users {
            for i in 0..k_users {
                let q = stats.q(k, i);
                let (vals, _) = linalg::hermitian_eigh(q);
                let scale = vals.last().copied().unwrap_or(0.0).abs();
                if vals[0] < -1e-10 * scale.max(f64::MIN_POSITIVE) {
                    return Err(CobfError::NotPsd { k, i, min_eig: vals[0] });
                }
                factors.push(linalg::psd_factor(q));
            }
        }
        Ok(Self { num_users: k_users, num_antennas: stats.num_antennas(), factors })
    }

    fn factor(&self, k: usize, i: usize) -> &CMat {
        &self.factors[k * self.num_users + i]
    }

    /// Draw the channel from transmitter `k` to receiver `i`.
    pub fn draw_link<R: Rng + ?Sized>(&self, k: usize, i: usize, rng: &mut R) -> CVec {
        let z = complex_normal_vec(rng, self.num_antennas);
        self.factor(k, i) * z
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelRealization {
        let k_users = self.num_users;
        let mut h = Vec::with_capacity(k_users * k_users);
        for k in 0..k_users {
            for i in 0..k_users {
                h.push(self.draw_link(k, i, rng));
            }
        }
        ChannelRealization { num_users: k_users, h }
    }
}

pub fn sample_channels(stats: &ChannelStats, seed: u64) -> Result<ChannelRealization> {
    let sampler = ChannelSampler::new(stats)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sampler.draw(&mut rng))
}

/// One beamforming vector per transmitter.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformerSet {
    pub beams: Vec<CVec>,
}

impl BeamformerSet {
    pub fn new(beams: Vec<CVec>) -> Self {
        Self { beams }
    }

    pub fn zeros(num_users: usize, num_antennas: usize) -> Self {
        Self { beams: vec![CVec::zeros(num_antennas); num_users] }
    }

    /// Random unit-norm complex vectors, shrunk onto the power ball when a
    /// budget is below one.
    pub fn random_unit(cfg: &NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beams = (0..cfg.num_users)
            .map(|u| {
                let mut w = complex_normal_vec(&mut rng, cfg.num_antennas);
                let norm = linalg::norm_sqr(&w).sqrt();
                w.unscale_mut(norm);
                linalg::project_ball(&mut w, cfg.power_budget[u]);
                w
            })
            .collect();
        Self { beams }
    }

    /// `sqrt(P_i)` times the principal eigenvector of `Q[i][i]` for every user.
    pub fn principal(stats: &ChannelStats, cfg: &NetworkConfig) -> Self {
        let beams = (0..cfg.num_users).map(|u| linalg::principal_eigvec(stats.q(u, u)) * Complex64::new(cfg.power_budget[u].sqrt(), 0.0)).collect();
        Self { beams }
    }

    pub fn num_users(&self) -> usize {
        self.beams.len()
    }

    pub fn is_feasible(&self, cfg: &NetworkConfig) -> bool {
        self.beams.len() == cfg.num_users
            && self.beams.iter().zip(&cfg.power_budget).all(|(w, p)| w.len() == cfg.num_antennas && linalg::norm_sqr(w) <= p * (1.0 + POWER_SLACK))
    }
}

/// Instantaneous achievable rate of user `i` (bits/s/Hz) under single-user
/// detection.
pub fn instantaneous_rate(real: &ChannelRealization, beams: &BeamformerSet, cfg: &NetworkConfig, i: usize) -> f64 {
    let signal = real.h(i, i).dotc(&beams.beams[i]).norm_sqr();
    let interference: f64 = (0..cfg.num_users).filter(|&k| k != i).map(|k| real.h(k, i).dotc(&beams.beams[k]).norm_sqr()).sum();
    (signal / (interference + cfg.noise_power[i])).ln_1p() / std::f64::consts::LN_2
}

/// `I[k][i] = w_k^H Q[k][i] w_k`; the diagonal entries are the signal powers.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossPowers {
    num_users: usize,
    values: Vec<f64>,
}

impl CrossPowers {
    pub fn from_values(num_users: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_users * num_users {
            return Err(CobfError::DimensionMismatch { expected: num_users * num_users, got: values.len() });
        }
        if let Some(&v) = values.iter().find(|v| !(**v >= 0.0)) {
            return Err(CobfError::NegativeQuadraticForm { value: v });
        }
        Ok(Self { num_users, values })
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    /// Power of transmitter `k`'s beam as seen (on average) by receiver `i`.
    pub fn get(&self, k: usize, i: usize) -> f64 {
        self.values[k * self.num_users + i]
    }

    pub fn set(&mut self, k: usize, i: usize, v: f64) {
        self.values[k * self.num_users + i] = v;
    }

    pub fn signal(&self, i: usize) -> f64 {
        self.get(i, i)
    }

    /// Interference powers at receiver `i`, transmitter order, skipping `i`.
    pub fn interference(&self, i: usize) -> Vec<f64> {
        (0..self.num_users).filter(|&k| k != i).map(|k| self.get(k, i)).collect()
    }
}

pub(crate) fn checked_quad(q: &CMat, w: &CVec) -> Result<f64> {
    let v = linalg::quad_form(q, w);
    if v >= 0.0 {
        return Ok(v);
    }
    let scale = linalg::norm_sqr(w) * q.iter().map(|z| z.norm()).fold(0.0, f64::max) * q.nrows() as f64;
    if v >= -NEG_QUAD_TOL * scale.max(1.0) {
        Ok(0.0)
    } else {
        Err(CobfError::NegativeQuadraticForm { value: v })
    }
}

pub fn cross_powers(beams: &BeamformerSet, stats: &ChannelStats) -> Result<CrossPowers> {
    let k_users = stats.num_users();
    if beams.num_users() != k_users {
        return Err(CobfError::DimensionMismatch { expected: k_users, got: beams.num_users() });
    }
    let mut values = Vec::with_capacity(k_users * k_users);
    for k in 0..k_users {
        let w = &beams.beams[k];
        if w.len() != stats.num_antennas() {
            return Err(CobfError::DimensionMismatch { expected: stats.num_antennas(), got: w.len() });
        }
        for i in 0..k_users {
            values.push(checked_quad(stats.q(k, i), w)?);
        }
    }
    Ok(CrossPowers { num_users: k_users, values })
}

/// `2^rate - 1` evaluated without cancellation at small rates.
pub fn sinr_threshold(rate: f64) -> f64 {
    (rate * std::f64::consts::LN_2).exp_m1()
}

/// Closed-form probability that the instantaneous rate reaches `rate`:
/// `exp(-(2^R-1) sigma^2 / s) * prod_k (1 + (2^R-1) I_k / s)^-1`.
pub fn success_probability(rate: f64, signal: f64, interf: &[f64], noise: f64) -> Result<f64> {
    if rate <= 0.0 {
        return Ok(1.0);
    }
    if !(signal > 0.0) {
        return Err(CobfError::ZeroSignalPower);
    }
    let x = sinr_threshold(rate) / signal;
    let log_p = -x * noise - interf.iter().map(|&ik| (x * ik).ln_1p()).sum::<f64>();
    Ok(log_p.exp())
}

/// Monte Carlo estimate of `Pr{ r_i < rate }`. Samples are drawn in fixed
/// chunks with per-chunk ChaCha streams, so the estimate does not depend on
/// the number of worker threads.
pub fn monte_carlo_outage(
    stats: &ChannelStats,
    beams: &BeamformerSet,
    cfg: &NetworkConfig,
    i: usize,
    rate: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(CobfError::InvalidConfig("n_samples must be at least 1".into()));
    }
    let k_users = cfg.num_users;
    let factors: Vec<(usize, CMat)> = (0..k_users).map(|k| (k, linalg::psd_factor(stats.q(k, i)))).collect();
    let n_chunks = n_samples.div_ceil(MC_CHUNK);
    let n = cfg.num_antennas;
    let noise = cfg.noise_power[i];
    let outages: usize = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let count = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let mut out = 0usize;
            for _ in 0..count {
                let mut signal = 0.0;
                let mut interference = 0.0;
                for (k, f) in &factors {
                    let h = f * complex_normal_vec(&mut rng, n);
                    let p = h.dotc(&beams.beams[*k]).norm_sqr();
                    if *k == i {
                        signal = p;
                    } else {
                        interference += p;
                    }
                }
                let r = (signal / (interference + noise)).ln_1p() / std::f64::consts::LN_2;
                if r < rate {
                    out += 1;
                }
            }
            out
        })
        .sum();
    Ok(outages as f64 / n_samples as f64)
}
