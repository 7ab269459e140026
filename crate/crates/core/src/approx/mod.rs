//! Sampling-theory estimators and error bounds.
//!
//! Simple random sampling scales a sample sum by `U / U'` and bounds it with
//! `t_{U'-1, 1-a/2} * sqrt(U (U - U') s^2 / U')`. The stratified variant sums the
//! same terms over strata with `sum(b_i) - n` degrees of freedom.

mod student_t;

use rand::Rng;
use thiserror::Error;

use crate::privacy::{debias_count, randomize_bit, RRCoins};

pub use student_t::{ln_gamma, t_cdf, t_pdf, t_quantile};

/// Below this many sampled clients the normal approximation is doubtful.
pub const CLT_MIN_SAMPLE: u64 = 30;

#[derive(Debug, Error, PartialEq)]
pub enum EstimateError {
    #[error("insufficient sample: {0}")]
    InsufficientSample(String),
    #[error("no strata given")]
    EmptyStrata,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn check_confidence(level: f64) -> Result<(), EstimateError> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(EstimateError::InvalidArgument(format!(
            "confidence level must lie in (0,1), got {level}"
        )))
    }
}

/// Two-sided critical value `t_{df, 1 - a/2}` for confidence level `1 - a`.
pub fn critical_value(df: u64, confidence_level: f64) -> Result<f64, EstimateError> {
    check_confidence(confidence_level)?;
    t_quantile(df, 1.0 - (1.0 - confidence_level) / 2.0)
}

/// Unbiased (`n - 1`) sample variance; zero for fewer than two values.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
}

/// Unbiased sample variance of `ones` ones among `n` binary values.
pub fn binary_sample_variance(ones: f64, n: f64) -> f64 {
    if n < 2.0 {
        return 0.0;
    }
    let rate = (ones / n).clamp(0.0, 1.0);
    rate * (1.0 - rate) * n / (n - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SrsPlan {
    /// Population size `U`.
    pub population: u64,
    /// Sampled size `U'`.
    pub sample: u64,
    pub confidence_level: f64,
}

/// A scaled-up sum with its two-sided error bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub half_width: f64,
    pub confidence_level: f64,
    pub df: u64,
    /// Fewer than [`CLT_MIN_SAMPLE`] sampled clients.
    pub low_sample: bool,
}

impl Estimate {
    pub fn lower(&self) -> f64 {
        self.value - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.value + self.half_width
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.lower() <= truth && truth <= self.upper()
    }
}

/// `B (B - b) r^2 / b`: one stratum's contribution to the variance of the sum.
fn stratum_variance(population: f64, sample: f64, variance: f64) -> f64 {
    population * (population - sample) * variance / sample
}

/// Simple-random-sampling estimate of a population sum.
pub fn srs_estimate(
    plan: &SrsPlan,
    sample_sum: f64,
    sample_variance: f64,
) -> Result<Estimate, EstimateError> {
    check_confidence(plan.confidence_level)?;
    if plan.sample < 2 {
        return Err(EstimateError::InsufficientSample(format!(
            "need at least 2 sampled clients, got {}",
            plan.sample
        )));
    }
    if plan.sample > plan.population {
        return Err(EstimateError::InvalidArgument(format!(
            "sample {} exceeds population {}",
            plan.sample, plan.population
        )));
    }
    if !(sample_variance >= 0.0) {
        return Err(EstimateError::InvalidArgument(format!(
            "sample variance must be >= 0, got {sample_variance}"
        )));
    }
    let (u, u_s) = (plan.population as f64, plan.sample as f64);
    let df = plan.sample - 1;
    let variance = stratum_variance(u, u_s, sample_variance);
    Ok(Estimate {
        value: u / u_s * sample_sum,
        half_width: critical_value(df, plan.confidence_level)? * variance.sqrt(),
        confidence_level: plan.confidence_level,
        df,
        low_sample: plan.sample < CLT_MIN_SAMPLE,
    })
}

/// Summary of one stratum's sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StratumStat {
    /// Stratum population `B_i`.
    pub population: u64,
    /// Sampled count `b_i`.
    pub sample: u64,
    pub sample_sum: f64,
    /// `r_i^2`, unbiased.
    pub sample_variance: f64,
}

impl StratumStat {
    pub fn from_values(population: u64, values: &[f64]) -> Self {
        StratumStat {
            population,
            sample: values.len() as u64,
            sample_sum: values.iter().sum(),
            sample_variance: sample_variance(values),
        }
    }
}

/// Stratified estimate of a population sum.
pub fn stratified_estimate(
    strata: &[StratumStat],
    confidence_level: f64,
) -> Result<Estimate, EstimateError> {
    check_confidence(confidence_level)?;
    if strata.is_empty() {
        return Err(EstimateError::EmptyStrata);
    }
    for (i, st) in strata.iter().enumerate() {
        if st.sample < 1 || st.sample > st.population {
            return Err(EstimateError::InvalidArgument(format!(
                "stratum {i}: need 1 <= b <= B, got b={} B={}",
                st.sample, st.population
            )));
        }
        if !(st.sample_variance >= 0.0) {
            return Err(EstimateError::InvalidArgument(format!(
                "stratum {i}: negative variance"
            )));
        }
    }
    let total_sample: u64 = strata.iter().map(|s| s.sample).sum();
    let n = strata.len() as u64;
    if total_sample <= n {
        return Err(EstimateError::InsufficientSample(format!(
            "degrees of freedom sum(b) - n = {} < 1",
            total_sample as i64 - n as i64
        )));
    }
    let df = total_sample - n;
    let value: f64 = strata
        .iter()
        .map(|s| s.population as f64 / s.sample as f64 * s.sample_sum)
        .sum();
    let variance: f64 = strata
        .iter()
        .map(|s| stratum_variance(s.population as f64, s.sample as f64, s.sample_variance))
        .sum();
    Ok(Estimate {
        value,
        half_width: critical_value(df, confidence_level)? * variance.sqrt(),
        confidence_level,
        df,
        low_sample: total_sample < CLT_MIN_SAMPLE || strata.iter().any(|s| s.sample < 2),
    })
}

/// Per-stratum sampling probabilities.
///
/// Flipping the same coin `s` in every stratum already yields samples
/// proportional to each stratum's arrival rate; `overrides` replaces the
/// probability of individual strata by index.
pub fn proportional_allocation(
    rates: &[f64],
    s: f64,
    overrides: &[(usize, f64)],
) -> Result<Vec<f64>, EstimateError> {
    if rates.is_empty() {
        return Err(EstimateError::EmptyStrata);
    }
    if let Some(r) = rates.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(EstimateError::InvalidArgument(format!(
            "arrival rates must be positive, got {r}"
        )));
    }
    let valid = |p: f64| p > 0.0 && p <= 1.0;
    if !valid(s) {
        return Err(EstimateError::InvalidArgument(format!(
            "sampling probability must lie in (0,1], got {s}"
        )));
    }
    let mut probs = vec![s; rates.len()];
    for &(idx, p) in overrides {
        if idx >= rates.len() || !valid(p) {
            return Err(EstimateError::InvalidArgument(format!(
                "override stratum {idx} -> {p} is out of range"
            )));
        }
        probs[idx] = p;
    }
    Ok(probs)
}

/// Expected sampled items per stratum when `total` items arrive split by `rates`.
pub fn expected_samples(rates: &[f64], probs: &[f64], total: f64) -> Vec<f64> {
    let sum: f64 = rates.iter().sum();
    rates
        .iter()
        .zip(probs)
        .map(|(r, p)| total * r / sum * p)
        .collect()
}

/// Total error bound: the sampling and randomization components add.
pub fn combine_errors(sampling_half_width: f64, rr_half_width: f64) -> f64 {
    sampling_half_width + rr_half_width
}

/// How the variance of the randomized yes-count is bounded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RrVariance {
    /// Maximize over the unknown truthful yes-rate.
    WorstCase,
    /// Use a known or estimated truthful yes-rate.
    Pilot(f64),
}

/// `Var(R_y)` for `n` randomized answers given the truthful yes-rate.
fn randomized_count_variance(coins: &RRCoins, n: f64, mode: RrVariance) -> f64 {
    let yes = coins.yes_probability(true);
    let no = coins.yes_probability(false);
    let (v1, v0) = (yes * (1.0 - yes), no * (1.0 - no));
    match mode {
        RrVariance::WorstCase => n * v1.max(v0),
        RrVariance::Pilot(rate) => {
            let rate = rate.clamp(0.0, 1.0);
            n * (rate * v1 + (1.0 - rate) * v0)
        }
    }
}

/// `Var(E_y)` for `n` randomized answers: `Var(R_y) / p^2`.
pub fn rr_debiased_variance(coins: &RRCoins, n: u64, mode: RrVariance) -> f64 {
    if coins.p() <= 0.0 {
        return f64::INFINITY;
    }
    randomized_count_variance(coins, n as f64, mode) / (coins.p() * coins.p())
}

/// Error bound on a de-biased count `E_y` caused by randomized response alone.
///
/// `Var(E_y) = Var(R_y) / p^2`, where each truthful yes contributes
/// `pi1 (1 - pi1)` and each truthful no `pi0 (1 - pi0)`. The worst case is
/// never above `n / 4` and vanishes for `p = 1`.
pub fn rr_error_halfwidth(
    coins: &RRCoins,
    n: u64,
    confidence_level: f64,
    mode: RrVariance,
) -> Result<f64, EstimateError> {
    if n == 0 {
        return Err(EstimateError::InsufficientSample("no responses".into()));
    }
    if coins.p() <= 0.0 {
        return Err(EstimateError::InvalidArgument("p must be positive".into()));
    }
    let var = rr_debiased_variance(coins, n, mode);
    Ok(critical_value((n - 1).max(1), confidence_level)? * var.sqrt())
}

/// Result of an empirical warm-up run of randomized response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RrCalibration {
    pub half_width: f64,
    /// Mean accuracy loss over the warm-up runs (`NaN` if there were no yeses).
    pub mean_loss: f64,
    pub runs: usize,
}

/// Measures randomized-response error by replaying `runs` warm-up windows of
/// `n` answers with the given truthful yes-rate and no sampling.
pub fn calibrate_rr_error<R: Rng + ?Sized>(
    coins: &RRCoins,
    n: u64,
    yes_rate: f64,
    confidence_level: f64,
    runs: usize,
    rng: &mut R,
) -> Result<RrCalibration, EstimateError> {
    if n == 0 || runs < 2 {
        return Err(EstimateError::InsufficientSample(format!(
            "calibration needs n >= 1 and runs >= 2, got n={n}, runs={runs}"
        )));
    }
    let actual = (yes_rate.clamp(0.0, 1.0) * n as f64).round() as u64;
    let mut errors = Vec::with_capacity(runs);
    let mut loss = 0.0;
    for _ in 0..runs {
        let r_y = (0..n)
            .filter(|i| randomize_bit(*i < actual, coins, rng))
            .count() as f64;
        let e_y = debias_count(n as f64, r_y, coins)
            .map_err(|e| EstimateError::InvalidArgument(e.to_string()))?;
        errors.push(e_y - actual as f64);
        loss += ((actual as f64 - e_y) / actual as f64).abs();
    }
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / (runs - 1) as f64;
    Ok(RrCalibration {
        half_width: critical_value((n - 1).max(1), confidence_level)? * mse.sqrt(),
        mean_loss: if actual == 0 { f64::NAN } else { loss / runs as f64 },
        runs,
    })
}
