//! One-parameter sweeps over a base scenario.

use std::fmt;

use rayon::prelude::*;

use super::{run_scenario, summarize, HarnessError, Scenario};

pub const SWEEP_PARAMS: [&str; 5] = ["s", "p", "q", "n_clients", "yes_fraction"];

pub const SWEEP_HEADER: &str = "param,value,seed,eta,half_width,coverage,eps_zk,eps_dp,ratio,bytes";

/// One run at one value: window-averaged loss plus the privacy levels.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub eta: f64,
    pub half_width: f64,
    pub coverage: f64,
    pub eps_zk: f64,
    pub eps_dp: f64,
    pub bytes: u64,
}

impl SweepRow {
    /// `eps_zk / eps_dp`.
    pub fn ratio(&self) -> f64 {
        self.eps_zk / self.eps_dp
    }
}

impl fmt::Display for SweepRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{},{},{},{},{}",
            self.param,
            self.value,
            self.seed,
            self.eta,
            self.half_width,
            self.coverage,
            self.eps_zk,
            self.eps_dp,
            self.ratio(),
            self.bytes
        )
    }
}

/// Runs `base` for every value of `param` and every seed
/// `base.seed .. base.seed + base.runs`. Rows come out value-major.
pub fn sweep(param: &str, values: &[f64], base: &Scenario) -> Result<Vec<SweepRow>, HarnessError> {
    if !SWEEP_PARAMS.contains(&param) {
        return Err(HarnessError::UnknownParameter(param.to_string()));
    }
    let mut jobs = Vec::with_capacity(values.len() * base.runs);
    for &v in values {
        let mut sc = base.clone();
        sc.set(param, &v.to_string())?;
        sc.validate()?;
        for i in 0..base.runs as u64 {
            let mut one = sc.clone();
            one.seed = base.seed.wrapping_add(i);
            jobs.push((v, one));
        }
    }
    jobs.into_par_iter()
        .map(|(value, sc)| {
            let results = run_scenario(&sc)?;
            let sum = summarize(&results);
            let first = results.first();
            Ok(SweepRow {
                param: param.to_string(),
                value,
                seed: sc.seed,
                eta: sum.mean_eta,
                half_width: sum.mean_half_width,
                coverage: sum.coverage,
                eps_zk: first.map_or(f64::NAN, |r| r.eps_zk),
                eps_dp: first.map_or(f64::NAN, |r| r.eps_dp),
                bytes: sum.bytes,
            })
        })
        .collect()
}

/// Mean of `eta` per value, in the order the values first appear.
pub fn mean_eta_by_value(rows: &[SweepRow]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(v, _, _)| *v == r.value) {
            Some(e) => {
                e.1 += r.eta;
                e.2 += 1;
            }
            None => out.push((r.value, r.eta, 1)),
        }
    }
    out.into_iter().map(|(v, s, n)| (v, s / n as f64)).collect()
}
