//! Experiment runner: instance sweeps, algorithm comparisons, bounds,
//! Monte Carlo outage checks and CSV output.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Deserialize;

use crate::dbsum::{run_dbsum, DbsumOptions};
use crate::dwmmse::{run_dwmmse, DwmmseOptions};
use crate::error::{CobfError, Result};
use crate::implicit_rate::CertifiedRates;
use crate::linalg;
use crate::model::{generate_instance, monte_carlo_outage, success_probability, BeamformerSet, ChannelStats, NetworkConfig};
use crate::polyblock::PoaOptions;
use crate::relaxed_bound::{upper_bound, RelaxedInstance};
use crate::utilities::{UtilityKind, UtilitySpec};

/// Tolerance on `Pr{success} = rho` at the certified rates.
pub const OUTAGE_EQUALITY_TOL: f64 = 1e-6;
pub const CSV_HEADER: &str = "seed,algo,utility,K,Nt,eta,snr_db,value,bound,gap_ratio,iters,time_s,messages";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Dbsum,
    Dwmmse,
    Poa,
    Tdma,
}

impl Algo {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algo::Dbsum => "dbsum",
            Algo::Dwmmse => "dwmmse",
            Algo::Poa => "poa",
            Algo::Tdma => "tdma",
        }
    }
}

impl fmt::Display for Algo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algo {
    type Err = CobfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dbsum" => Ok(Algo::Dbsum),
            "dwmmse" => Ok(Algo::Dwmmse),
            "poa" => Ok(Algo::Poa),
            "tdma" => Ok(Algo::Tdma),
            other => Err(CobfError::InvalidConfig(format!("unknown algorithm `{other}`"))),
        }
    }
}

fn default_epsilon() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    crate::utilities::DEFAULT_LSE_GAMMA
}
fn default_tol() -> f64 {
    1e-3
}
fn default_true() -> bool {
    true
}
fn default_algorithms() -> Vec<Algo> {
    vec![Algo::Dbsum, Algo::Dwmmse]
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoaSettings {
    #[serde(default = "default_tol")]
    pub delta: f64,
    #[serde(default = "default_poa_iters")]
    pub max_iters: usize,
}

fn default_poa_iters() -> usize {
    200
}

impl Default for PoaSettings {
    fn default() -> Self {
        Self { delta: default_tol(), max_iters: default_poa_iters() }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub num_users: usize,
    pub num_antennas: usize,
    pub eta: Vec<f64>,
    pub snr_db: Vec<f64>,
    pub utility: String,
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
    #[serde(default = "default_gamma")]
    pub lse_gamma: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub trials: usize,
    pub seed: u64,
    #[serde(default = "default_algorithms")]
    pub algorithms: Vec<Algo>,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default)]
    pub penalty: Option<f64>,
    #[serde(default)]
    pub max_iters: Option<usize>,
    #[serde(default)]
    pub poa: PoaSettings,
    #[serde(default)]
    pub workers: Option<usize>,
    /// Record wall-clock times; off gives byte-identical reruns.
    #[serde(default = "default_true")]
    pub timing: bool,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CobfError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn utility_kind(&self) -> Result<UtilityKind> {
        self.utility.parse()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.weights.clone().unwrap_or_else(|| vec![1.0 / self.num_users as f64; self.num_users])
    }

    pub fn utility_spec(&self) -> Result<UtilitySpec> {
        UtilitySpec::new(self.utility_kind()?, self.weights())?.with_gamma(self.lse_gamma)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(CobfError::InvalidConfig("trials must be at least 1".into()));
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(CobfError::InvalidConfig("snr_db values must be finite".into()));
        }
        if self.eta.is_empty() || self.eta.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return Err(CobfError::InvalidConfig("eta values must lie in (0,1]".into()));
        }
        if self.algorithms.is_empty() {
            return Err(CobfError::InvalidConfig("no algorithms selected".into()));
        }
        if self.algorithms.contains(&Algo::Dwmmse) && self.utility_kind()? != UtilityKind::WeightedSumRate {
            return Err(CobfError::InvalidConfig("dwmmse supports the weighted sum rate only".into()));
        }
        if !(self.tol > 0.0) || self.penalty.is_some_and(|c| !(c > 0.0)) {
            return Err(CobfError::InvalidConfig("tolerance and penalty must be positive".into()));
        }
        NetworkConfig::symmetric(self.num_users, self.num_antennas, 1.0, self.epsilon)?;
        self.utility_spec()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub seed: u64,
    pub algo: Algo,
    pub utility: UtilityKind,
    pub num_users: usize,
    pub num_antennas: usize,
    pub eta: f64,
    pub snr_db: f64,
    pub value: f64,
    pub bound: Option<f64>,
    pub gap_ratio: Option<f64>,
    pub iters: usize,
    pub time_s: f64,
    pub messages: usize,
}

/// Heuristic-to-bound ratio on a rate scale. Proportional fairness is
/// compared through the weighted geometric mean rate `exp(U / sum a)`, since
/// its raw value changes sign at unit rates; the other utilities are rates
/// already.
pub fn gap_ratio(utility: &UtilitySpec, value: f64, bound: f64) -> f64 {
    match utility.kind {
        UtilityKind::ProportionalFairness => {
            let total: f64 = utility.weights.iter().sum();
            ((value - bound) / total).exp()
        }
        _ => value / bound,
    }
}

/// Rates when each user takes a `1/K` time share at its interference-free
/// outage-optimal rate.
pub fn tdma_rates(stats: &ChannelStats, cfg: &NetworkConfig) -> Vec<f64> {
    let k_users = cfg.num_users as f64;
    (0..cfg.num_users)
        .map(|i| {
            let snr = (1.0 / cfg.success_target[i]).ln() * cfg.power_budget[i] * linalg::lambda_max(stats.q(i, i)) / cfg.noise_power[i];
            snr.ln_1p() / std::f64::consts::LN_2 / k_users
        })
        .collect()
}

/// Sum rate of the TDMA policy.
pub fn tdma_baseline(stats: &ChannelStats, cfg: &NetworkConfig) -> f64 {
    tdma_rates(stats, cfg).iter().sum()
}

/// Problems with a heuristic's output: infeasible beams or an outage
/// constraint that is not met with equality.
pub fn check_heuristic(beams: &BeamformerSet, cert: &CertifiedRates, cfg: &NetworkConfig) -> Vec<String> {
    let mut out = Vec::new();
    if !beams.is_feasible(cfg) {
        out.push("power budget violated".to_string());
    }
    for i in 0..cfg.num_users {
        match success_probability(cert.rate[i], cert.powers.signal(i), &cert.powers.interference(i), cfg.noise_power[i]) {
            Ok(p) if (p - cfg.success_target[i]).abs() <= OUTAGE_EQUALITY_TOL => {}
            Ok(p) => out.push(format!("user {i}: success probability {p} differs from {}", cfg.success_target[i])),
            Err(e) => out.push(format!("user {i}: {e}")),
        }
    }
    out
}

/// Seed of trial `t`: consecutive from the master seed.
pub fn instance_seed(master: u64, trial: usize) -> u64 {
    master.wrapping_add(trial as u64)
}

/// Seed of the random unit-norm starting point for an instance.
pub fn init_seed(instance: u64) -> u64 {
    instance ^ 0x9e37_79b9_7f4a_7c15
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutput {
    pub records: Vec<ResultRecord>,
    /// `(seed, algo, message)` for runs that returned an error.
    pub failures: Vec<(u64, Algo, String)>,
    /// Invariant violations found in completed runs.
    pub violations: Vec<String>,
}

impl ExperimentOutput {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.violations.is_empty()
    }
}

struct InstanceResult {
    records: Vec<ResultRecord>,
    failures: Vec<(u64, Algo, String)>,
    violations: Vec<String>,
}

fn run_instance(exp: &ExperimentConfig, utility: &UtilitySpec, eta: f64, snr_db: f64, seed: u64) -> InstanceResult {
    let mut res = InstanceResult { records: Vec::new(), failures: Vec::new(), violations: Vec::new() };
    let cfg = match NetworkConfig::from_snr_db(exp.num_users, exp.num_antennas, snr_db, exp.epsilon)
        .and_then(|c| c.with_weights(utility.weights.clone()))
    {
        Ok(c) => c,
        Err(e) => {
            res.failures.push((seed, exp.algorithms[0], e.to_string()));
            return res;
        }
    };
    let stats = match generate_instance(seed, &cfg, eta) {
        Ok(s) => s,
        Err(e) => {
            res.failures.push((seed, exp.algorithms[0], e.to_string()));
            return res;
        }
    };
    let init = BeamformerSet::random_unit(&cfg, init_seed(seed));
    let clock = |start: Instant| if exp.timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let base = |algo: Algo| ResultRecord {
        seed,
        algo,
        utility: utility.kind,
        num_users: exp.num_users,
        num_antennas: exp.num_antennas,
        eta,
        snr_db,
        value: f64::NAN,
        bound: None,
        gap_ratio: None,
        iters: 0,
        time_s: 0.0,
        messages: 0,
    };

    let mut bound = None;
    if exp.algorithms.contains(&Algo::Poa) {
        let start = Instant::now();
        let poa = PoaOptions { delta: exp.poa.delta, max_iters: exp.poa.max_iters, ..Default::default() };
        match RelaxedInstance::new(&stats, &cfg).and_then(|inst| upper_bound(&inst, utility, &poa)) {
            Ok(ub) => {
                bound = Some(ub.value);
                res.records.push(ResultRecord {
                    value: ub.value,
                    bound: Some(ub.value),
                    iters: ub.trace.iterations.len() - 1,
                    time_s: clock(start),
                    ..base(Algo::Poa)
                });
            }
            Err(e) => res.failures.push((seed, Algo::Poa, e.to_string())),
        }
    }
    let mut sorted = exp.algorithms.clone();
    sorted.sort();
    sorted.dedup();
    for algo in sorted {
        let start = Instant::now();
        let outcome: Result<(f64, usize, usize)> = match algo {
            Algo::Poa => continue,
            Algo::Tdma => Ok((utility.evaluate(&tdma_rates(&stats, &cfg)), 0, 0)),
            Algo::Dbsum => {
                let opts = DbsumOptions { penalty: exp.penalty, max_iters: exp.max_iters, rel_tol: exp.tol, ..Default::default() };
                run_dbsum(&stats, &cfg, utility, &init, &opts).map(|out| {
                    res.violations.extend(check_heuristic(&out.beams, &out.rates, &cfg).into_iter().map(|m| format!("seed {seed} dbsum: {m}")));
                    if out.trace.windows(2).any(|w| w[1].utility < w[0].utility - 1e-9) {
                        res.violations.push(format!("seed {seed} dbsum: utility trace decreased"));
                    }
                    (out.utility, out.iterations, out.messages)
                })
            }
            Algo::Dwmmse => {
                let opts = DwmmseOptions { rel_tol: exp.tol, max_iters: exp.max_iters.unwrap_or(1000), workers: exp.workers, schedule: None };
                run_dwmmse(&stats, &cfg, &utility.weights, &init, &opts).map(|out| {
                    res.violations.extend(check_heuristic(&out.beams, &out.rates, &cfg).into_iter().map(|m| format!("seed {seed} dwmmse: {m}")));
                    if out.trace.windows(2).any(|w| w[1].utility < w[0].utility - 1e-9) {
                        res.violations.push(format!("seed {seed} dwmmse: utility trace decreased"));
                    }
                    (out.utility, out.iterations, out.messages)
                })
            }
        };
        match outcome {
            Ok((value, iters, messages)) => {
                let mut rec = ResultRecord { value, iters, messages, time_s: clock(start), bound, ..base(algo) };
                if let Some(b) = bound {
                    rec.gap_ratio = Some(gap_ratio(utility, value, b));
                    if algo != Algo::Tdma && value > b + 1e-9 * b.abs().max(1.0) {
                        res.violations.push(format!("seed {seed} {algo}: value {value} exceeds bound {b}"));
                    }
                }
                res.records.push(rec);
            }
            Err(e) => res.failures.push((seed, algo, e.to_string())),
        }
    }
    res
}

/// Run every (eta, snr, trial) instance. Records are ordered by sweep
/// position, then seed, then algorithm, independent of scheduling.
pub fn run_experiment(exp: &ExperimentConfig) -> Result<ExperimentOutput> {
    exp.validate()?;
    let utility = exp.utility_spec()?;
    let mut jobs = Vec::new();
    for &eta in &exp.eta {
        for &snr in &exp.snr_db {
            for t in 0..exp.trials {
                jobs.push((eta, snr, instance_seed(exp.seed, t)));
            }
        }
    }
    let run = || -> Vec<InstanceResult> { jobs.par_iter().map(|&(eta, snr, seed)| run_instance(exp, &utility, eta, snr, seed)).collect() };
    let results = match exp.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CobfError::InvalidConfig(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    };
    let mut out = ExperimentOutput::default();
    for mut r in results {
        r.records.sort_by_key(|rec| rec.algo);
        out.records.extend(r.records);
        out.failures.extend(r.failures);
        out.violations.extend(r.violations);
    }
    Ok(out)
}

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn write_csv<W: Write>(records: &[ResultRecord], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            r.algo,
            r.utility,
            r.num_users,
            r.num_antennas,
            fmt_f64(r.eta),
            fmt_f64(r.snr_db),
            fmt_f64(r.value),
            fmt_opt(r.bound),
            fmt_opt(r.gap_ratio),
            r.iters,
            fmt_f64(r.time_s),
            r.messages
        )?;
    }
    Ok(())
}

pub fn emit_csv(records: &[ResultRecord], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    write_csv(records, &mut file)?;
    file.flush()?;
    Ok(())
}

fn field<T: FromStr>(value: &str, line: usize, name: &str) -> Result<T> {
    value.parse().map_err(|_| CobfError::Parse { line, msg: format!("bad {name} `{value}`") })
}

fn opt_field(value: &str, line: usize, name: &str) -> Result<Option<f64>> {
    if value.is_empty() {
        Ok(None)
    } else {
        field(value, line, name).map(Some)
    }
}

pub fn read_csv<R: BufRead>(input: R) -> Result<Vec<ResultRecord>> {
    let mut lines = input.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim_end() != CSV_HEADER {
        return Err(CobfError::Parse { line: 1, msg: "missing or unexpected header".into() });
    }
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line = line?;
        let ln = idx + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 13 {
            return Err(CobfError::Parse { line: ln, msg: format!("expected 13 fields, found {}", f.len()) });
        }
        out.push(ResultRecord {
            seed: field(f[0], ln, "seed")?,
            algo: f[1].parse().map_err(|_| CobfError::Parse { line: ln, msg: format!("bad algo `{}`", f[1]) })?,
            utility: f[2].parse().map_err(|_| CobfError::Parse { line: ln, msg: format!("bad utility `{}`", f[2]) })?,
            num_users: field(f[3], ln, "K")?,
            num_antennas: field(f[4], ln, "Nt")?,
            eta: field(f[5], ln, "eta")?,
            snr_db: field(f[6], ln, "snr_db")?,
            value: field(f[7], ln, "value")?,
            bound: opt_field(f[8], ln, "bound")?,
            gap_ratio: opt_field(f[9], ln, "gap_ratio")?,
            iters: field(f[10], ln, "iters")?,
            time_s: field(f[11], ln, "time_s")?,
            messages: field(f[12], ln, "messages")?,
        });
    }
    Ok(out)
}

pub fn parse_csv_file(path: &Path) -> Result<Vec<ResultRecord>> {
    read_csv(BufReader::new(fs::File::open(path)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutageValidationConfig {
    pub num_users: usize,
    pub num_antennas: usize,
    pub snr_db: f64,
    pub eta: f64,
    pub epsilon: f64,
    pub trials: usize,
    pub samples: usize,
    pub seed: u64,
    pub algo: Algo,
}

impl Default for OutageValidationConfig {
    fn default() -> Self {
        Self { num_users: 3, num_antennas: 2, snr_db: 10.0, eta: 0.5, epsilon: 0.1, trials: 10, samples: 100_000, seed: 1, algo: Algo::Dbsum }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutageCheck {
    pub seed: u64,
    pub user: usize,
    pub rate: f64,
    pub empirical: f64,
    pub deviation: f64,
    /// Three binomial standard deviations at the target.
    pub halfwidth: f64,
}

impl OutageCheck {
    pub fn within(&self) -> bool {
        self.deviation <= self.halfwidth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutageReport {
    pub checks: Vec<OutageCheck>,
}

impl OutageReport {
    pub fn fraction_within(&self) -> f64 {
        if self.checks.is_empty() {
            return 1.0;
        }
        self.checks.iter().filter(|c| c.within()).count() as f64 / self.checks.len() as f64
    }
}

/// Monte Carlo outage at the certified rates of a heuristic's final beams.
pub fn validate_outage(v: &OutageValidationConfig) -> Result<OutageReport> {
    if v.samples < 10_000 {
        return Err(CobfError::InvalidConfig("at least 10^4 samples are required".into()));
    }
    if v.trials == 0 {
        return Err(CobfError::InvalidConfig("trials must be at least 1".into()));
    }
    let cfg = NetworkConfig::from_snr_db(v.num_users, v.num_antennas, v.snr_db, v.epsilon)?;
    let weights = vec![1.0 / v.num_users as f64; v.num_users];
    let mut checks = Vec::new();
    for t in 0..v.trials {
        let seed = instance_seed(v.seed, t);
        let stats = generate_instance(seed, &cfg, v.eta)?;
        let init = BeamformerSet::random_unit(&cfg, init_seed(seed));
        let (beams, cert) = match v.algo {
            Algo::Dwmmse => {
                let out = run_dwmmse(&stats, &cfg, &weights, &init, &DwmmseOptions::default())?;
                (out.beams, out.rates)
            }
            Algo::Dbsum => {
                let out = run_dbsum(&stats, &cfg, &UtilitySpec::wsr(weights.clone()), &init, &DbsumOptions::default())?;
                (out.beams, out.rates)
            }
            other => return Err(CobfError::InvalidConfig(format!("{other} produces no beamformers"))),
        };
        for i in 0..v.num_users {
            let empirical = monte_carlo_outage(&stats, &beams, &cfg, i, cert.rate[i], v.samples, seed.wrapping_mul(31).wrapping_add(i as u64))?;
            let eps = cfg.outage_tolerance[i];
            checks.push(OutageCheck {
                seed,
                user: i,
                rate: cert.rate[i],
                empirical,
                deviation: (empirical - eps).abs(),
                halfwidth: 3.0 * (eps * (1.0 - eps) / v.samples as f64).sqrt(),
            });
        }
    }
    Ok(OutageReport { checks })
}
