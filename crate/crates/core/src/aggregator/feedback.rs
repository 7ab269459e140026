//! Re-tuning the sampling probability from observed window error.

use crate::privacy::{eps_of_kind, invert_budget, PrivacyError};
use crate::query::{Budget, ExecutionParams};

use super::window::WindowEstimate;

/// Multiplicative control law on `s`; `p` and `q` are never touched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeedbackController {
    pub step_up: f64,
    pub step_down: f64,
    /// Below `deadband * target` the sampling rate is lowered.
    pub deadband: f64,
    pub min_sampling: f64,
}

impl Default for FeedbackController {
    fn default() -> Self {
        FeedbackController {
            step_up: 1.25,
            step_down: 0.9,
            deadband: 0.5,
            min_sampling: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackOutcome {
    pub params: ExecutionParams,
    /// Set when the error target cannot be met inside the privacy budget.
    pub advisory: Option<String>,
}

impl FeedbackOutcome {
    pub fn changed(&self, before: &ExecutionParams) -> bool {
        self.params.sampling != before.sampling
    }
}

/// Largest `s <= 1` whose privacy level stays within the budget.
pub fn sampling_ceiling(budget: &Budget, params: &ExecutionParams) -> Result<f64, PrivacyError> {
    let mut s = invert_budget(budget, &params.coins)?;
    // guard against the last ulp of rounding in the inversion
    while s > 0.0 && !within_budget(budget, params, s) {
        s *= 1.0 - 1e-12;
    }
    Ok(s)
}

fn within_budget(budget: &Budget, params: &ExecutionParams, s: f64) -> bool {
    eps_of_kind(budget.kind, s, &params.coins).is_ok_and(|e| e <= budget.epsilon)
}

impl FeedbackController {
    pub fn adjust(
        &self,
        est: &WindowEstimate,
        budget: &Budget,
        current: &ExecutionParams,
    ) -> Result<FeedbackOutcome, PrivacyError> {
        let unchanged = FeedbackOutcome {
            params: *current,
            advisory: None,
        };
        let Some(target) = budget.error_target else {
            return Ok(unchanged);
        };
        let ceiling = sampling_ceiling(budget, current)?;
        let floor = self.min_sampling.min(ceiling);
        let rel = est.relative_error();
        let s = current.sampling;
        let outcome = if rel > target {
            let wanted = s * self.step_up;
            if wanted > ceiling {
                FeedbackOutcome {
                    params: current.with_sampling(ceiling),
                    advisory: Some(format!(
                        "query {}: relative error {rel:.4} exceeds target {target} but sampling is capped at {ceiling:.6} by the {} budget {}",
                        est.query_id,
                        budget.kind.as_str(),
                        budget.epsilon
                    )),
                }
            } else {
                FeedbackOutcome {
                    params: current.with_sampling(wanted),
                    advisory: None,
                }
            }
        } else if rel < self.deadband * target {
            FeedbackOutcome {
                params: current.with_sampling((s * self.step_down).clamp(floor, ceiling)),
                advisory: None,
            }
        } else if s > ceiling {
            FeedbackOutcome {
                params: current.with_sampling(ceiling),
                advisory: None,
            }
        } else {
            unchanged
        };
        assert!(
            within_budget(budget, &outcome.params, outcome.params.sampling),
            "feedback produced s = {} outside the budget",
            outcome.params.sampling
        );
        Ok(outcome)
    }
}
