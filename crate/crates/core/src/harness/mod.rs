//! Deterministic in-process simulation: a fleet of client agents, relays and
//! an aggregator wired together, driven epoch by epoch on a virtual clock.
//!
//! The workload is a yes/no question. Every client holds one record per
//! epoch whose `answer` field is 1 with the scenario's yes fraction, and the
//! query has two buckets, `[0,1)` ("no") and `[1,2)` ("yes").

mod scenario;
mod sweep;

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::aggregator::{Aggregator, AggregatorConfig, AggregatorError, EstimateOptions, WindowEstimate};
use crate::client::{truthful_answer, ClientAgent, ClientConfig, ClientError, LocalStore, ShareSink};
use crate::privacy::{eps_dp, eps_zk, PrivacyError};
use crate::query::{BucketSpec, Predicate, Query, Record, Scalar};
use crate::transport::{Relay, RelayedShare, ShareMessage, TransportError};

pub use scenario::Scenario;
pub use sweep::{mean_eta_by_value, sweep, SweepRow, SWEEP_HEADER, SWEEP_PARAMS};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("unknown sweep parameter `{0}`")]
    UnknownParameter(String),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Aggregator(#[from] AggregatorError),
    #[error(transparent)]
    Client(#[from] ClientError),
}

/// Index of the "yes" bucket in the workload query.
pub const YES_BUCKET: usize = 1;
const QUERY_ID: u64 = 1;

pub fn workload_query(sc: &Scenario) -> Query {
    Query::new(QUERY_ID, Predicate::always(), BucketSpec::from_edges("answer", &[0.0, 1.0, 2.0]))
        .with_timing(sc.epoch_ms, sc.epoch_ms, sc.epoch_ms)
        .with_inverted(sc.inverted)
}

/// Outcome of one window of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub seed: u64,
    pub window: usize,
    pub start_ms: u64,
    pub end_ms: u64,
    pub n_clients: usize,
    pub sampling: f64,
    pub p: f64,
    pub q: f64,
    pub inverted: bool,
    pub population: u64,
    pub responses: u64,
    /// True count of what the query asks: yes answers, or no answers when
    /// the query is inverted.
    pub actual: f64,
    pub estimate: f64,
    pub half_width: f64,
    /// Accuracy loss `|actual - estimate| / actual`.
    pub eta: f64,
    /// Whether the interval around the yes estimate holds the true yes count.
    pub covered: bool,
    /// Infinite where undefined (`s = 1` for zero-knowledge privacy).
    pub eps_zk: f64,
    pub eps_dp: f64,
    /// Share frames handed to the relays for this window, before loss.
    pub bytes: u64,
    pub low_sample: bool,
    /// Direct per-bucket counts over the client stores.
    pub truth: Vec<f64>,
    /// Per-bucket estimates of the native question.
    pub estimates: Vec<f64>,
    /// Wall time of the whole run; not part of the CSV.
    pub wall_ms: f64,
}

pub const RESULT_HEADER: &str = "seed,window,window_start_ms,window_end_ms,n_clients,s,p,q,inverted,population,responses,actual,estimate,half_width,eta,covered,eps_zk,eps_dp,bytes,flags";

impl ExperimentResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.seed,
            self.window,
            self.start_ms,
            self.end_ms,
            self.n_clients,
            self.sampling,
            self.p,
            self.q,
            self.inverted,
            self.population,
            self.responses,
            self.actual,
            self.estimate,
            self.half_width,
            self.eta,
            u8::from(self.covered),
            self.eps_zk,
            self.eps_dp,
            self.bytes,
            if self.low_sample { "low_sample" } else { "-" }
        )
    }
}

pub fn results_csv(results: &[ExperimentResult]) -> String {
    let mut out = format!("{RESULT_HEADER}\n");
    for r in results {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Averages over the windows of one or more runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub windows: usize,
    pub mean_eta: f64,
    pub mean_half_width: f64,
    pub coverage: f64,
    pub bytes: u64,
}

pub fn summarize(results: &[ExperimentResult]) -> RunSummary {
    let n = results.len().max(1) as f64;
    RunSummary {
        windows: results.len(),
        mean_eta: results.iter().map(|r| r.eta).sum::<f64>() / n,
        mean_half_width: results.iter().map(|r| r.half_width).sum::<f64>() / n,
        coverage: results.iter().filter(|r| r.covered).count() as f64 / n,
        bytes: results.iter().map(|r| r.bytes).sum(),
    }
}

/// Collects the shares of one agent for one step.
#[derive(Default)]
struct Outbox(Vec<(usize, ShareMessage)>);

impl ShareSink for Outbox {
    fn send(&mut self, proxy: usize, share: &ShareMessage) -> Result<(), TransportError> {
        self.0.push((proxy, share.clone()));
        Ok(())
    }
}

fn build_fleet(sc: &Scenario, master: &mut ChaCha8Rng) -> Result<Vec<ClientAgent>, HarnessError> {
    let proxies: Vec<String> = (0..sc.n_proxies).map(|i| format!("relay-{}", i + 1)).collect();
    let mut agents = Vec::with_capacity(sc.n_clients);
    for (stratum, &size) in sc.stratum_sizes().iter().enumerate() {
        let y = sc.yes_fraction_of(stratum);
        for _ in 0..size {
            let agent_seed: u64 = master.gen();
            let mut data = ChaCha8Rng::seed_from_u64(master.gen());
            let mut store = LocalStore::new();
            for t in 0..sc.epochs {
                let answer = if data.gen::<f64>() < y { 1.0 } else { 0.0 };
                store.push(Record::new(t * sc.epoch_ms + sc.epoch_ms / 2).with("answer", Scalar::Number(answer)))?;
            }
            let cfg = ClientConfig::new(format!("client-{}", agents.len()), stratum as u16, proxies.clone())?
                .with_seed(agent_seed);
            agents.push(ClientAgent::new(cfg, store));
        }
    }
    Ok(agents)
}

/// Runs one scenario end to end and reports every emitted window.
/// Identical scenarios give identical results apart from `wall_ms`.
pub fn run_scenario(sc: &Scenario) -> Result<Vec<ExperimentResult>, HarnessError> {
    sc.validate()?;
    let started = Instant::now();
    let params = sc.execution_params()?;
    let mut master = ChaCha8Rng::seed_from_u64(sc.seed);
    let mut agents = build_fleet(sc, &mut master)?;
    let mut loss_rng = ChaCha8Rng::seed_from_u64(master.gen());

    let mut agg = Aggregator::new(AggregatorConfig {
        n_proxies: sc.n_proxies,
        p: sc.p,
        q: sc.q,
        estimate: EstimateOptions {
            confidence_level: sc.confidence_level,
            ..Default::default()
        },
        feedback: None,
        ..Default::default()
    })?;
    for (stratum, &size) in sc.stratum_sizes().iter().enumerate() {
        agg.register_clients(stratum as u16, size as u64);
    }
    let query = workload_query(sc);
    let native = query.clone().with_inverted(false);
    let published = agg.publish_with_params(query, params, None, 0)?;
    for a in agents.iter_mut() {
        a.subscribe(published.clone());
    }
    let relays: Vec<Arc<Relay>> = (0..sc.n_proxies)
        .map(|i| Arc::new(Relay::new(format!("relay-{}", i + 1), usize::MAX)))
        .collect();

    let eps_zk = eps_zk(params.sampling, &params.coins).unwrap_or(f64::INFINITY);
    let eps_dp = eps_dp(params.sampling, &params.coins).unwrap_or(f64::INFINITY);
    let mut estimates: Vec<(WindowEstimate, u64)> = Vec::new();
    for e in 1..=sc.epochs {
        let now = e * sc.epoch_ms;
        let outboxes: Vec<Outbox> = agents
            .par_iter_mut()
            .map(|a| {
                let mut out = Outbox::default();
                a.answer_due(now, &mut out).map(|_| out)
            })
            .collect::<Result<_, _>>()?;
        let mut bytes = 0u64;
        for (proxy, share) in outboxes.into_iter().flat_map(|o| o.0) {
            bytes += share.frame_len() as u64;
            if sc.loss > 0.0 && loss_rng.gen::<f64>() < sc.loss {
                continue;
            }
            relays[proxy]
                .forward(share)
                .expect("unbounded in-process relay accepts every well-formed share");
        }
        let shares: Vec<RelayedShare> = relays.iter().flat_map(|r| r.drain(usize::MAX)).collect();
        agg.ingest(shares, now);
        estimates.extend(agg.tick(now).into_iter().map(|w| (w, bytes)));
    }

    let wall_ms = started.elapsed().as_secs_f64() * 1e3;
    let mut out = Vec::with_capacity(estimates.len());
    for (window, (est, bytes)) in estimates.into_iter().enumerate() {
        let truth = agents
            .par_iter()
            .map(|a| {
                let mut counts = vec![0.0; native.n_buckets()];
                let mut t = est.start_ms;
                while t < est.end_ms {
                    for (k, bit) in truthful_answer(a.store(), &native, t, t + sc.epoch_ms).iter().enumerate() {
                        counts[k] += f64::from(u8::from(bit));
                    }
                    t += sc.epoch_ms;
                }
                counts
            })
            .reduce(
                || vec![0.0; native.n_buckets()],
                |a, b| a.iter().zip(&b).map(|(x, y)| x + y).collect(),
            );
        let yes = &est.buckets[YES_BUCKET];
        let pop = est.population as f64;
        let (actual, estimate) = if sc.inverted {
            (pop - truth[YES_BUCKET], pop - yes.estimate)
        } else {
            (truth[YES_BUCKET], yes.estimate)
        };
        let eta = if actual > 0.0 {
            (actual - estimate).abs() / actual
        } else if estimate == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        out.push(ExperimentResult {
            seed: sc.seed,
            window,
            start_ms: est.start_ms,
            end_ms: est.end_ms,
            n_clients: sc.n_clients,
            sampling: params.sampling,
            p: params.p(),
            q: params.q(),
            inverted: sc.inverted,
            population: est.population,
            responses: est.responses,
            actual,
            estimate,
            half_width: yes.half_width,
            eta,
            covered: (yes.estimate - truth[YES_BUCKET]).abs() <= yes.half_width,
            eps_zk,
            eps_dp,
            bytes,
            low_sample: est.low_sample,
            estimates: est.buckets.iter().map(|b| b.estimate).collect(),
            truth,
            wall_ms,
        });
    }
    Ok(out)
}

/// Runs `sc` once per seed `sc.seed .. sc.seed + sc.runs`, in parallel.
pub fn run_seeds(sc: &Scenario) -> Result<Vec<ExperimentResult>, HarnessError> {
    let runs: Vec<Vec<ExperimentResult>> = (0..sc.runs as u64)
        .into_par_iter()
        .map(|i| {
            let mut one = sc.clone();
            one.seed = sc.seed.wrapping_add(i);
            run_scenario(&one)
        })
        .collect::<Result<_, _>>()?;
    Ok(runs.into_iter().flatten().collect())
}
