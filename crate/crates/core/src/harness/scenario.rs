//! Scenario files: `key=value` lines, `#` comments.
//!
//! ```text
//! n_clients=10000
//! yes_fraction=0.6
//! strata=3:4:5
//! s=0.6
//! p=0.3
//! q=0.6
//! epochs=10
//! seed=7
//! ```

use std::fmt::Write as _;

use crate::privacy::{invert_budget, RRCoins};
use crate::query::{Budget, BudgetKind, ExecutionParams};

use super::HarnessError;

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub n_clients: usize,
    /// Probability that a client's answer in an epoch is "yes".
    pub yes_fraction: f64,
    /// Relative stratum sizes; clients are split across strata in this ratio.
    pub strata: Vec<u32>,
    /// Per-stratum yes fractions, overriding `yes_fraction`.
    pub stratum_yes: Option<Vec<f64>>,
    pub s: f64,
    pub p: f64,
    pub q: f64,
    /// When set, `s` is derived from the budget and the given `p`, `q`.
    pub budget: Option<Budget>,
    /// Number of epochs, each closing one window.
    pub epochs: u64,
    pub epoch_ms: u64,
    pub seed: u64,
    /// Independent drop probability for every share on its way to a relay.
    pub loss: f64,
    pub n_proxies: usize,
    pub inverted: bool,
    pub confidence_level: f64,
    /// Seeds per value in a sweep: `seed, seed + 1, ...`.
    pub runs: usize,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            n_clients: 10_000,
            yes_fraction: 0.6,
            strata: vec![1],
            stratum_yes: None,
            s: 0.6,
            p: 0.9,
            q: 0.6,
            budget: None,
            epochs: 1,
            epoch_ms: 1000,
            seed: 0,
            loss: 0.0,
            n_proxies: 2,
            inverted: false,
            confidence_level: 0.95,
            runs: 1,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError>
where
    T::Err: std::fmt::Display,
{
    v.trim()
        .parse()
        .map_err(|e| HarnessError::Scenario(format!("`{key}`: cannot parse `{v}`: {e}")))
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut sc = Scenario::default();
        let mut budget_kind = None;
        let mut epsilon = None;
        let mut error_target = None;
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Scenario(format!("line `{line}` is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            match k {
                "budget" => {
                    budget_kind = Some(
                        BudgetKind::parse(v).ok_or_else(|| HarnessError::Scenario(format!("unknown budget `{v}`")))?,
                    )
                }
                "epsilon" => epsilon = Some(num(k, v)?),
                "error_target" => error_target = Some(num(k, v)?),
                _ => sc.set(k, v)?,
            }
        }
        sc.budget = match (budget_kind, epsilon) {
            (Some(kind), Some(eps)) => {
                let mut b = Budget::new(kind, eps)?;
                if let Some(t) = error_target {
                    b = b.with_error_target(t);
                }
                Some(b)
            }
            (None, None) => None,
            _ => return Err(HarnessError::Scenario("`budget` and `epsilon` go together".into())),
        };
        sc.validate()?;
        Ok(sc)
    }

    /// Sets one key; used by the parser and by sweeps.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        match key {
            "n_clients" => self.n_clients = num(key, value)?,
            "yes_fraction" => self.yes_fraction = num(key, value)?,
            "strata" => {
                self.strata = value
                    .split(':')
                    .map(|w| num(key, w))
                    .collect::<Result<_, _>>()?
            }
            "stratum_yes" => {
                self.stratum_yes = Some(
                    value
                        .split(',')
                        .map(|w| num(key, w))
                        .collect::<Result<_, _>>()?,
                )
            }
            "s" => {
                self.s = num(key, value)?;
                self.budget = None;
            }
            "p" => self.p = num(key, value)?,
            "q" => self.q = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "epoch_ms" => self.epoch_ms = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "loss" => self.loss = num(key, value)?,
            "n_proxies" => self.n_proxies = num(key, value)?,
            "inverted" => self.inverted = num(key, value)?,
            "confidence_level" => self.confidence_level = num(key, value)?,
            "runs" => self.runs = num(key, value)?,
            _ => return Err(HarnessError::Scenario(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Scenario(m));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if self.n_clients == 0 {
            return bad("n_clients must be positive".into());
        }
        if !unit(self.yes_fraction) || !unit(self.loss) {
            return bad("yes_fraction and loss must lie in [0, 1]".into());
        }
        if self.strata.is_empty() || self.strata.iter().all(|&w| w == 0) {
            return bad("strata needs a positive weight".into());
        }
        if self.strata.len() > self.n_clients {
            return bad("more strata than clients".into());
        }
        if let Some(ys) = &self.stratum_yes {
            if ys.len() != self.strata.len() || !ys.iter().all(|&y| unit(y)) {
                return bad("stratum_yes needs one fraction in [0, 1] per stratum".into());
            }
        }
        if self.epochs == 0 || self.epoch_ms == 0 || self.runs == 0 {
            return bad("epochs, epoch_ms and runs must be positive".into());
        }
        if !(2..=255).contains(&self.n_proxies) {
            return bad(format!("n_proxies = {} outside 2..=255", self.n_proxies));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return bad("confidence_level must lie in (0, 1)".into());
        }
        self.execution_params()?;
        Ok(())
    }

    pub fn execution_params(&self) -> Result<ExecutionParams, HarnessError> {
        match &self.budget {
            Some(b) => {
                let coins = RRCoins::new(self.p, self.q)?;
                Ok(ExecutionParams::new(invert_budget(b, &coins)?, self.p, self.q)?)
            }
            None => Ok(ExecutionParams::new(self.s, self.p, self.q)?),
        }
    }

    /// Clients per stratum, proportional to the weights (largest remainder),
    /// with at least one client in every positively weighted stratum.
    pub fn stratum_sizes(&self) -> Vec<usize> {
        let total: u64 = self.strata.iter().map(|&w| u64::from(w)).sum();
        let n = self.n_clients as u64;
        let mut sizes: Vec<u64> = self.strata.iter().map(|&w| n * u64::from(w) / total).collect();
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(n * u64::from(self.strata[i]) % total));
        let mut left = n - sizes.iter().sum::<u64>();
        for &i in order.iter().cycle() {
            if left == 0 {
                break;
            }
            sizes[i] += 1;
            left -= 1;
        }
        for i in 0..sizes.len() {
            if sizes[i] == 0 && self.strata[i] > 0 {
                let donor = (0..sizes.len()).max_by_key(|&j| sizes[j]).unwrap();
                sizes[donor] -= 1;
                sizes[i] = 1;
            }
        }
        sizes.into_iter().map(|s| s as usize).collect()
    }

    pub fn yes_fraction_of(&self, stratum: usize) -> f64 {
        self.stratum_yes.as_ref().map_or(self.yes_fraction, |ys| ys[stratum])
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let join = |xs: Vec<String>, sep: &str| xs.join(sep);
        let _ = writeln!(out, "n_clients={}", self.n_clients);
        let _ = writeln!(out, "yes_fraction={}", self.yes_fraction);
        let _ = writeln!(out, "strata={}", join(self.strata.iter().map(u32::to_string).collect(), ":"));
        if let Some(ys) = &self.stratum_yes {
            let _ = writeln!(out, "stratum_yes={}", join(ys.iter().map(f64::to_string).collect(), ","));
        }
        let _ = writeln!(out, "s={}", self.s);
        let _ = writeln!(out, "p={}", self.p);
        let _ = writeln!(out, "q={}", self.q);
        if let Some(b) = &self.budget {
            let _ = writeln!(out, "budget={}", b.kind.as_str());
            let _ = writeln!(out, "epsilon={}", b.epsilon);
            if let Some(t) = b.error_target {
                let _ = writeln!(out, "error_target={t}");
            }
        }
        for (k, v) in [
            ("epochs", self.epochs.to_string()),
            ("epoch_ms", self.epoch_ms.to_string()),
            ("seed", self.seed.to_string()),
            ("loss", self.loss.to_string()),
            ("n_proxies", self.n_proxies.to_string()),
            ("inverted", self.inverted.to_string()),
            ("confidence_level", self.confidence_level.to_string()),
            ("runs", self.runs.to_string()),
        ] {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
