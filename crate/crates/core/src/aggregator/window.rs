//! Sliding windows over joined answers and the per-window estimate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::approx::{
    binary_sample_variance, critical_value, rr_debiased_variance, srs_estimate, stratified_estimate, EstimateError,
    RrVariance, SrsPlan, StratumStat, CLT_MIN_SAMPLE,
};
use crate::privacy::{debias_count, invert_query_counts};
use crate::query::{ExecutionParams, Query};
use crate::transport::PlainMessage;

/// Number of epoch starts `origin + k f` (`k >= 0`) inside `[start, end)`.
pub fn epochs_between(origin_ms: u64, f_ms: u64, start_ms: u64, end_ms: u64) -> u64 {
    let f = f_ms.max(1);
    let lo = start_ms.max(origin_ms);
    if lo >= end_ms {
        return 0;
    }
    (end_ms - origin_ms).div_ceil(f) - (lo - origin_ms).div_ceil(f)
}

/// Messages with timestamps in `[start_ms, end_ms)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start_ms: u64,
    pub end_ms: u64,
    /// Answering epochs that began inside the window.
    pub epochs: u64,
    pub messages: Vec<PlainMessage>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Accepted,
    /// Older than every window still open.
    Late,
    /// More than one slide beyond the window being filled.
    Quarantined,
}

/// Windows of length `w` ending at every multiple of `delta`, for answers
/// whose epochs start at `origin + k f`.
#[derive(Debug, Clone)]
pub struct WindowPipeline {
    origin_ms: u64,
    f_ms: u64,
    w_ms: u64,
    delta_ms: u64,
    next_end_ms: u64,
    lateness_ms: u64,
    buffer: Vec<PlainMessage>,
}

impl WindowPipeline {
    pub fn new(query: &Query, origin_ms: u64) -> Self {
        let delta = query.slide_interval_ms.max(1);
        WindowPipeline {
            origin_ms,
            f_ms: query.answer_frequency_ms.max(1),
            w_ms: query.window_length_ms.max(1),
            delta_ms: delta,
            next_end_ms: (origin_ms / delta + 1) * delta,
            lateness_ms: 0,
            buffer: Vec::new(),
        }
    }

    /// Holds each window back until `lateness` after its end.
    pub fn with_lateness(mut self, lateness_ms: u64) -> Self {
        self.lateness_ms = lateness_ms;
        self
    }

    pub fn origin_ms(&self) -> u64 {
        self.origin_ms
    }

    /// End of the next window to be emitted.
    pub fn next_end_ms(&self) -> u64 {
        self.next_end_ms
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    pub fn push(&mut self, msg: PlainMessage) -> PushOutcome {
        let ts = msg.timestamp_ms;
        if ts < self.origin_ms || ts < self.next_end_ms.saturating_sub(self.w_ms) {
            PushOutcome::Late
        } else if ts >= self.next_end_ms + self.delta_ms {
            PushOutcome::Quarantined
        } else {
            self.buffer.push(msg);
            PushOutcome::Accepted
        }
    }

    /// Emits every window ending at or before `now - lateness` and evicts
    /// messages no later window will need.
    pub fn advance(&mut self, now_ms: u64) -> Vec<Window> {
        let mut out = Vec::new();
        while self.next_end_ms + self.lateness_ms <= now_ms {
            out.push(self.emit_next());
        }
        out
    }

    fn emit_next(&mut self) -> Window {
        let end = self.next_end_ms;
        let start = end.saturating_sub(self.w_ms);
        let messages = self
            .buffer
            .iter()
            .filter(|m| (start..end).contains(&m.timestamp_ms))
            .cloned()
            .collect();
        self.next_end_ms += self.delta_ms;
        let keep_from = self.next_end_ms.saturating_sub(self.w_ms);
        self.buffer.retain(|m| m.timestamp_ms >= keep_from);
        Window {
            start_ms: start,
            end_ms: end,
            epochs: epochs_between(self.origin_ms, self.f_ms, start, end),
            messages,
        }
    }
}

/// How the randomized-response error is bounded per window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RrMode {
    /// Maximize over the unknown yes-rate.
    WorstCase,
    /// Plug in the de-biased yes-rate of the window.
    PlugIn,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub confidence_level: f64,
    pub rr_mode: RrMode,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            confidence_level: 0.95,
            rr_mode: RrMode::PlugIn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketEstimate {
    /// Randomized yes-answers received.
    pub r_y: u64,
    /// De-biased count among the received answers.
    pub e_y: f64,
    /// Population-scale count of the question clients actually answered.
    pub answered: f64,
    /// Population-scale count of the analyst's question (the complement of
    /// `answered` for inverted queries).
    pub estimate: f64,
    /// `estimate` clamped into `[0, population]`.
    pub estimate_clamped: f64,
    pub sampling_half_width: f64,
    pub rr_half_width: f64,
    pub half_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowEstimate {
    pub query_id: u64,
    pub start_ms: u64,
    pub end_ms: u64,
    /// Answers received (`N`).
    pub responses: u64,
    /// Client-epochs the window could have received (`U`).
    pub population: u64,
    /// Effective sampling probability the answers went through.
    pub sampling: f64,
    pub confidence_level: f64,
    pub low_sample: bool,
    pub inverted: bool,
    /// Messages ignored for carrying an unregistered stratum.
    pub quarantined: u64,
    pub buckets: Vec<BucketEstimate>,
}

pub const CSV_HEADER: &str = "window_start_ms,window_end_ms,bucket_index,R_y,E_y,estimate,half_width,confidence_level,flags";

impl WindowEstimate {
    pub fn flags(&self) -> String {
        let mut flags = Vec::new();
        if self.low_sample {
            flags.push("low_sample");
        }
        if self.inverted {
            flags.push("inverted");
        }
        if flags.is_empty() {
            "-".into()
        } else {
            flags.join("|")
        }
    }

    /// One CSV row per bucket, without header.
    pub fn csv_rows(&self) -> String {
        let flags = self.flags();
        let mut out = String::new();
        for (i, b) in self.buckets.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                self.start_ms, self.end_ms, i, b.r_y, b.e_y, b.estimate, b.half_width, self.confidence_level, flags
            );
        }
        out
    }

    /// Sum of half-widths over sum of absolute estimates.
    pub fn relative_error(&self) -> f64 {
        let hw: f64 = self.buckets.iter().map(|b| b.half_width).sum();
        let total: f64 = self.buckets.iter().map(|b| b.estimate.abs()).sum();
        if total > 0.0 {
            hw / total
        } else if hw == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

struct StratumTally {
    population: u64,
    responses: u64,
    ones: Vec<u64>,
}

/// De-biased, population-scaled estimate for every bucket of one window.
///
/// `registered` maps stratum id to its number of clients; each contributes
/// one possible answer per epoch. With one stratum the sampling error is the
/// simple-random-sampling bound, otherwise the stratified one. The
/// randomization error is added on top.
pub fn estimate_window(
    win: &Window,
    query: &Query,
    params: &ExecutionParams,
    registered: &BTreeMap<u16, u64>,
    opts: &EstimateOptions,
) -> WindowEstimate {
    let n_buckets = query.n_buckets();
    let mut tallies: BTreeMap<u16, StratumTally> = registered
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(&id, &c)| {
            let t = StratumTally {
                population: c * win.epochs,
                responses: 0,
                ones: vec![0; n_buckets],
            };
            (id, t)
        })
        .collect();
    let mut quarantined = 0;
    for m in &win.messages {
        match tallies.get_mut(&m.stratum_id) {
            Some(t) if m.bits.len() == n_buckets && m.query_id == query.query_id => {
                t.responses += 1;
                for (i, bit) in m.bits.iter().enumerate() {
                    t.ones[i] += u64::from(bit);
                }
            }
            _ => quarantined += 1,
        }
    }
    let population: u64 = tallies.values().map(|t| t.population).sum();
    let responses: u64 = tallies.values().map(|t| t.responses).sum();
    let sampled: Vec<&StratumTally> = tallies.values().filter(|t| t.responses > 0).collect();
    let mut low_sample = responses < CLT_MIN_SAMPLE || sampled.len() < tallies.len();

    let coins = &params.coins;
    let level = opts.confidence_level;
    let t_rr = critical_value(responses.saturating_sub(1).max(1), level).unwrap_or(f64::NAN);
    let mut buckets = Vec::with_capacity(n_buckets);
    for k in 0..n_buckets {
        let r_y: u64 = sampled.iter().map(|t| t.ones[k]).sum();
        let e_y = debias_count(responses as f64, r_y as f64, coins).unwrap_or(f64::NAN);
        let mut strata = Vec::with_capacity(sampled.len());
        let mut rr_var = 0.0;
        for t in &sampled {
            let b = t.responses as f64;
            let e_i = debias_count(b, t.ones[k] as f64, coins).unwrap_or(f64::NAN);
            let rate = (e_i / b).clamp(0.0, 1.0);
            strata.push(StratumStat {
                population: t.population,
                sample: t.responses,
                sample_sum: e_i,
                sample_variance: binary_sample_variance(rate * b, b),
            });
            let mode = match opts.rr_mode {
                RrMode::WorstCase => RrVariance::WorstCase,
                RrMode::PlugIn => RrVariance::Pilot(rate),
            };
            let scale = t.population as f64 / b;
            rr_var += scale * scale * rr_debiased_variance(coins, t.responses, mode);
        }
        let sampling_result = match strata.as_slice() {
            [] => Err(EstimateError::EmptyStrata),
            [one] => srs_estimate(
                &SrsPlan {
                    population: one.population,
                    sample: one.sample,
                    confidence_level: level,
                },
                one.sample_sum,
                one.sample_variance,
            ),
            many => stratified_estimate(many, level),
        };
        let (answered, sampling_hw) = match sampling_result {
            Ok(e) => {
                low_sample |= e.low_sample;
                (e.value, e.half_width)
            }
            Err(_) => {
                // Too few answers for a t bound: fall back to the trivial one.
                low_sample = true;
                let value = strata
                    .iter()
                    .map(|s| s.population as f64 / s.sample as f64 * s.sample_sum)
                    .sum();
                (value, population as f64)
            }
        };
        let rr_hw = if responses == 0 { 0.0 } else { t_rr * rr_var.sqrt() };
        let estimate = if query.inverted {
            invert_query_counts(answered, population as f64)
        } else {
            answered
        };
        buckets.push(BucketEstimate {
            r_y,
            e_y: if responses == 0 { 0.0 } else { e_y },
            answered,
            estimate,
            estimate_clamped: estimate.clamp(0.0, population as f64),
            sampling_half_width: sampling_hw,
            rr_half_width: rr_hw,
            half_width: crate::approx::combine_errors(sampling_hw, rr_hw),
        });
    }
    WindowEstimate {
        query_id: query.query_id,
        start_ms: win.start_ms,
        end_ms: win.end_ms,
        responses,
        population,
        sampling: params.sampling,
        confidence_level: level,
        low_sample,
        inverted: query.inverted,
        quarantined,
        buckets,
    }
}
