//! Two-coin randomized response, de-biasing, and the privacy-level calculators.
//!
//! With `x = p / ((1 - p) q)` (so `e^eps_rr = 1 + x`):
//!
//! * `eps_rr = ln(1 + x)`
//! * `eps_dp = ln(1 + s x)`
//! * `eps_zk = ln(s (2 - s) / (1 - s) * (1 + x) + (1 - s)) = ln(1 + s (1 + (2 - s) x) / (1 - s))`
//!
//! The `ln(1 + .)` forms are evaluated with `ln_1p` so that tiny `s` or `p`
//! do not lose precision.

use rand::Rng;
use thiserror::Error;

use crate::query::{AnswerVector, BitVector, Budget, BudgetKind};

/// Largest sampling probability the zero-knowledge inversion will return.
/// `eps_zk` diverges as `s -> 1`.
pub const MAX_ZK_SAMPLING: f64 = 1.0 - 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum PrivacyError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("estimator undefined: first-coin probability p is zero")]
    UndefinedEstimator,
    #[error("accuracy loss undefined for an actual count of zero")]
    UndefinedLoss,
    #[error("privacy level is infinite (p = 1 or q = 0)")]
    InfiniteEpsilon,
    #[error("zero-knowledge bound requires sampling (s < 1)")]
    RequiresSampling,
    #[error("budget eps = {requested} unachievable; at most {max_achievable} with these coins")]
    BudgetUnachievable { requested: f64, max_achievable: f64 },
}

/// Coin probabilities of the randomized response mechanism.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RRCoins {
    p: f64,
    q: f64,
}

impl RRCoins {
    /// Private mode: `0 < p < 1` and `0 < q < 1`.
    pub fn new(p: f64, q: f64) -> Result<Self, PrivacyError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(PrivacyError::InvalidParameter(format!(
                "first-coin probability p must lie in (0,1), got {p}"
            )));
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(PrivacyError::InvalidParameter(format!(
                "second-coin probability q must lie in (0,1), got {q}"
            )));
        }
        Ok(RRCoins { p, q })
    }

    /// `p = 1`: every answer is truthful.
    pub fn no_privacy(q: f64) -> Result<Self, PrivacyError> {
        RRCoins::arbitrary(1.0, q)
    }

    /// Any probabilities in `[0, 1]`; for degenerate mechanisms in tests.
    pub fn arbitrary(p: f64, q: f64) -> Result<Self, PrivacyError> {
        if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&q) {
            return Err(PrivacyError::InvalidParameter(format!(
                "coin probabilities must lie in [0,1], got p={p}, q={q}"
            )));
        }
        Ok(RRCoins { p, q })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    /// `Pr[out = 1 | truth]`.
    pub fn yes_probability(&self, truth: bool) -> f64 {
        let noise = (1.0 - self.p) * self.q;
        if truth {
            self.p + noise
        } else {
            noise
        }
    }

    /// `x = p / ((1 - p) q) = e^eps_rr - 1`.
    fn odds_gain(&self) -> Result<f64, PrivacyError> {
        let denom = (1.0 - self.p) * self.q;
        if denom <= 0.0 {
            return Err(PrivacyError::InfiniteEpsilon);
        }
        Ok(self.p / denom)
    }
}

/// Reports `truth` with probability `p`, otherwise a fresh Bernoulli(`q`) bit.
pub fn randomize_bit<R: Rng + ?Sized>(truth: bool, coins: &RRCoins, rng: &mut R) -> bool {
    if rng.gen_bool(coins.p) {
        truth
    } else {
        rng.gen_bool(coins.q)
    }
}

/// Randomizes every bucket bit independently.
pub fn randomize_bits<R: Rng + ?Sized>(truth: &BitVector, coins: &RRCoins, rng: &mut R) -> BitVector {
    truth.iter().map(|b| randomize_bit(b, coins, rng)).collect::<Vec<_>>().into()
}

pub fn randomize_vector<R: Rng + ?Sized>(
    truth: &AnswerVector,
    coins: &RRCoins,
    rng: &mut R,
) -> AnswerVector {
    AnswerVector {
        query_id: truth.query_id,
        timestamp_ms: truth.timestamp_ms,
        bits: randomize_bits(&truth.bits, coins, rng),
    }
}

/// Estimated truthful yes-count from `yes_count` randomized yeses out of
/// `responses`: `(R_y - (1 - p) q N) / p`. Not clamped.
pub fn debias_count(responses: f64, yes_count: f64, coins: &RRCoins) -> Result<f64, PrivacyError> {
    if coins.p <= 0.0 {
        return Err(PrivacyError::UndefinedEstimator);
    }
    Ok((yes_count - (1.0 - coins.p) * coins.q * responses) / coins.p)
}

/// `|(actual - estimate) / actual|`.
pub fn accuracy_loss(actual: f64, estimate: f64) -> Result<f64, PrivacyError> {
    if actual == 0.0 {
        return Err(PrivacyError::UndefinedLoss);
    }
    Ok(((actual - estimate) / actual).abs())
}

/// Per-response differential privacy level of the two-coin mechanism.
pub fn eps_rr(coins: &RRCoins) -> Result<f64, PrivacyError> {
    Ok(coins.odds_gain()?.ln_1p())
}

/// Differential privacy level of sampling at `s` followed by randomized response.
pub fn eps_dp(s: f64, coins: &RRCoins) -> Result<f64, PrivacyError> {
    check_sampling(s)?;
    Ok((s * coins.odds_gain()?).ln_1p())
}

/// Zero-knowledge privacy level of sampling at `s` (`0 < s < 1`) combined with
/// randomized response.
pub fn eps_zk(s: f64, coins: &RRCoins) -> Result<f64, PrivacyError> {
    check_sampling(s)?;
    if s >= 1.0 {
        return Err(PrivacyError::RequiresSampling);
    }
    let x = coins.odds_gain()?;
    Ok((s * (1.0 + (2.0 - s) * x) / (1.0 - s)).ln_1p())
}

/// The level of the given kind; what a [`Budget`] constrains.
pub fn eps_of_kind(kind: BudgetKind, s: f64, coins: &RRCoins) -> Result<f64, PrivacyError> {
    match kind {
        BudgetKind::ZeroKnowledge => eps_zk(s, coins),
        BudgetKind::Differential => eps_dp(s, coins),
    }
}

fn check_sampling(s: f64) -> Result<(), PrivacyError> {
    if s > 0.0 && s <= 1.0 {
        Ok(())
    } else {
        Err(PrivacyError::InvalidParameter(format!(
            "sampling probability must lie in (0,1], got {s}"
        )))
    }
}

/// All privacy levels for one parameter setting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyReport {
    pub eps_rr: f64,
    pub eps_dp: f64,
    pub eps_zk: f64,
    /// `eps_zk / eps_dp`.
    pub ratio: f64,
}

impl PrivacyReport {
    pub fn compute(s: f64, coins: &RRCoins) -> Result<Self, PrivacyError> {
        let eps_zk = eps_zk(s, coins)?;
        let eps_dp = eps_dp(s, coins)?;
        Ok(PrivacyReport {
            eps_rr: eps_rr(coins)?,
            eps_dp,
            eps_zk,
            ratio: eps_zk / eps_dp,
        })
    }
}

/// Solves for the sampling probability that spends exactly `budget.epsilon`
/// with the coins held fixed.
///
/// A differential budget looser than `eps_rr` is met by full sampling, so the
/// result is clamped to 1. The zero-knowledge level is unbounded as `s -> 1`;
/// budgets that would need `s > MAX_ZK_SAMPLING` are rejected.
pub fn invert_budget(budget: &Budget, coins: &RRCoins) -> Result<f64, PrivacyError> {
    budget.validate()?;
    let x = coins.odds_gain()?;
    let m = budget.epsilon.exp_m1();
    match budget.kind {
        BudgetKind::Differential => Ok((m / x).min(1.0)),
        BudgetKind::ZeroKnowledge => {
            if !m.is_finite() {
                return Err(PrivacyError::BudgetUnachievable {
                    requested: budget.epsilon,
                    max_achievable: eps_zk(MAX_ZK_SAMPLING, coins)?,
                });
            }
            // x s^2 - (1 + 2x + m) s + m = 0; h(0) = m > 0 and h(1) = -(1 + x) < 0,
            // so exactly one root lies in (0, 1): the smaller one.
            let b = 1.0 + 2.0 * x + m;
            let disc = b * b - 4.0 * x * m;
            debug_assert!(disc >= 0.0);
            let root = 2.0 * m / (b + disc.max(0.0).sqrt());
            let other = if x > 0.0 { m / (x * root) } else { f64::INFINITY };
            debug_assert!(other >= 1.0 || !(other > 0.0));
            if !(root > 0.0) || root > MAX_ZK_SAMPLING {
                return Err(PrivacyError::BudgetUnachievable {
                    requested: budget.epsilon,
                    max_achievable: eps_zk(MAX_ZK_SAMPLING, coins)?,
                });
            }
            Ok(root)
        }
    }
}

/// Complement of an estimated count on the given scale: `scale - estimate`.
pub fn invert_query_counts(estimate: f64, scale: f64) -> f64 {
    scale - estimate
}
