//! System utilities over the rate vector. All are nondecreasing in every
//! rate and jointly concave, so they can drive both the block ascent and
//! the polyblock bound.

use std::fmt;
use std::str::FromStr;

use crate::error::{CobfError, Result};

pub const DEFAULT_RATE_FLOOR: f64 = 1e-12;
pub const DEFAULT_LSE_GAMMA: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UtilityKind {
    /// `sum_i a_i R_i`
    WeightedSumRate,
    /// `sum_i a_i ln R_i`
    ProportionalFairness,
    /// `(sum_i a_i / R_i)^-1`
    HarmonicMean,
    /// Log-sum-exp smoothing of `min_i R_i / a_i`.
    MmfLse,
}

impl UtilityKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            UtilityKind::WeightedSumRate => "wsr",
            UtilityKind::ProportionalFairness => "pf",
            UtilityKind::HarmonicMean => "hm",
            UtilityKind::MmfLse => "mmf-lse",
        }
    }
}

impl fmt::Display for UtilityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UtilityKind {
    type Err = CobfError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wsr" => Ok(UtilityKind::WeightedSumRate),
            "pf" => Ok(UtilityKind::ProportionalFairness),
            "hm" => Ok(UtilityKind::HarmonicMean),
            "mmf-lse" | "mmf" => Ok(UtilityKind::MmfLse),
            other => Err(CobfError::InvalidConfig(format!("unknown utility `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilitySpec {
    pub kind: UtilityKind,
    pub weights: Vec<f64>,
    pub lse_gamma: f64,
    pub rate_floor: f64,
}

impl UtilitySpec {
    pub fn new(kind: UtilityKind, weights: Vec<f64>) -> Result<Self> {
        let spec = Self { kind, weights, lse_gamma: DEFAULT_LSE_GAMMA, rate_floor: DEFAULT_RATE_FLOOR };
        spec.validate()?;
        Ok(spec)
    }

    pub fn wsr(weights: Vec<f64>) -> Self {
        Self::new(UtilityKind::WeightedSumRate, weights).expect("positive weights")
    }

    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        self.lse_gamma = gamma;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(CobfError::InvalidConfig("utility weights must be positive".into()));
        }
        if self.kind == UtilityKind::MmfLse && !(self.lse_gamma > 0.0 && self.lse_gamma.is_finite()) {
            return Err(CobfError::InvalidConfig("log-sum-exp gamma must be positive".into()));
        }
        if matches!(self.kind, UtilityKind::ProportionalFairness | UtilityKind::HarmonicMean) && !(self.rate_floor > 0.0) {
            return Err(CobfError::InvalidConfig("rate floor must be positive".into()));
        }
        Ok(())
    }

    pub fn evaluate(&self, rates: &[f64]) -> f64 {
        debug_assert_eq!(rates.len(), self.weights.len());
        let w = &self.weights;
        match self.kind {
            UtilityKind::WeightedSumRate => w.iter().zip(rates).map(|(a, r)| a * r).sum(),
            UtilityKind::ProportionalFairness => w.iter().zip(rates).map(|(a, r)| a * r.max(self.rate_floor).ln()).sum(),
            UtilityKind::HarmonicMean => 1.0 / w.iter().zip(rates).map(|(a, r)| a / r.max(self.rate_floor)).sum::<f64>(),
            UtilityKind::MmfLse => {
                let g = self.lse_gamma;
                let (m, s) = self.lse_parts(rates);
                // -(1/g) log2 sum 2^{-g a_i} with a_i = R_i / w_i, shifted by the min
                m - s.log2() / g
            }
        }
    }

    /// Returns `(min_i a_i, sum_i 2^{-g (a_i - min)})`.
    fn lse_parts(&self, rates: &[f64]) -> (f64, f64) {
        let g = self.lse_gamma;
        let m = rates.iter().zip(&self.weights).map(|(r, a)| r / a).fold(f64::INFINITY, f64::min);
        let s = rates.iter().zip(&self.weights).map(|(r, a)| (-g * (r / a - m)).exp2()).sum();
        (m, s)
    }

    pub fn gradient(&self, rates: &[f64]) -> Vec<f64> {
        let w = &self.weights;
        match self.kind {
            UtilityKind::WeightedSumRate => w.clone(),
            UtilityKind::ProportionalFairness => w.iter().zip(rates).map(|(a, r)| a / r.max(self.rate_floor)).collect(),
            UtilityKind::HarmonicMean => {
                let h = self.evaluate(rates);
                w.iter().zip(rates).map(|(a, r)| h * h * a / (r.max(self.rate_floor).powi(2))).collect()
            }
            UtilityKind::MmfLse => {
                let g = self.lse_gamma;
                let (m, s) = self.lse_parts(rates);
                rates.iter().zip(w).map(|(r, a)| (-g * (r / a - m)).exp2() / (s * a)).collect()
            }
        }
    }
}

/// Weighted max-min rate `min_i R_i / a_i`.
pub fn weighted_min_rate(rates: &[f64], weights: &[f64]) -> f64 {
    rates.iter().zip(weights).map(|(r, a)| r / a).fold(f64::INFINITY, f64::min)
}
