//! The aggregator: joins shares, windows the answers and estimates.

mod feedback;
mod history;
mod join;
mod server;
mod window;

use std::collections::BTreeMap;
use std::path::PathBuf;

use log::{info, warn};
use rand::Rng;
use thiserror::Error;

use crate::privacy::{invert_budget, PrivacyError};
use crate::query::{validate_query, Budget, ExecutionParams, PublishedQuery, Query, Violation};
use crate::transport::{PlainMessage, RelayedShare};

pub use feedback::{sampling_ceiling, FeedbackController, FeedbackOutcome};
pub use history::{HistoricalRead, HistoricalStore};
pub use join::{JoinBuffer, JoinMetrics};
pub use server::{serve_control, AggregatorService, ControlClient};
pub use window::{
    epochs_between, estimate_window, BucketEstimate, EstimateOptions, PushOutcome, RrMode, Window, WindowEstimate,
    WindowPipeline, CSV_HEADER,
};

#[derive(Debug, Error)]
pub enum AggregatorError {
    #[error("query {0} is already published")]
    DuplicateQuery(u64),
    #[error("unknown query {0}")]
    UnknownQuery(u64),
    #[error("invalid query: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidQuery(Vec<Violation>),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error("empty time range [{0}, {1})")]
    EmptyRange(u64, u64),
    #[error("no historical store configured")]
    NoHistory,
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct AggregatorConfig {
    pub n_proxies: usize,
    /// Randomization coins fixed for every published query.
    pub p: f64,
    pub q: f64,
    pub estimate: EstimateOptions,
    /// `None` disables adaptive re-tuning.
    pub feedback: Option<FeedbackController>,
    /// Delay between a window's end and its emission.
    pub lateness_ms: u64,
    /// Multiple of the slide interval after which incomplete share sets are dropped.
    pub join_timeout_slides: u64,
    pub history_dir: Option<PathBuf>,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            n_proxies: 2,
            p: 0.9,
            q: 0.6,
            estimate: EstimateOptions::default(),
            feedback: Some(FeedbackController::default()),
            lateness_ms: 0,
            join_timeout_slides: 2,
            history_dir: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Revision {
    published: PublishedQuery,
    pipeline: WindowPipeline,
}

#[derive(Debug, Clone)]
struct QueryState {
    budget: Option<Budget>,
    /// Registration counts frozen at publish time.
    registered: BTreeMap<u16, u64>,
    current: Revision,
    /// The revision being wound down after an inversion.
    previous: Option<Revision>,
    latest: Option<WindowEstimate>,
    windows_emitted: u64,
    advisories: Vec<String>,
}

/// Smallest `origin + k * period` (`k >= 0`) that is `>= at`.
fn next_boundary(origin: u64, period: u64, at: u64) -> u64 {
    let period = period.max(1);
    if at <= origin {
        origin
    } else {
        origin + (at - origin).div_ceil(period) * period
    }
}

pub struct Aggregator {
    config: AggregatorConfig,
    registered: BTreeMap<u16, u64>,
    queries: BTreeMap<u64, QueryState>,
    join: JoinBuffer,
    history: Option<HistoricalStore>,
}

impl Aggregator {
    pub fn new(config: AggregatorConfig) -> Result<Self, AggregatorError> {
        let history = match &config.history_dir {
            Some(dir) => Some(HistoricalStore::open(dir)?),
            None => None,
        };
        Ok(Aggregator {
            join: JoinBuffer::new(config.n_proxies, 0),
            config,
            registered: BTreeMap::new(),
            queries: BTreeMap::new(),
            history,
        })
    }

    pub fn config(&self) -> &AggregatorConfig {
        &self.config
    }

    /// Adds `count` clients to a stratum. Queries published afterwards use the new totals.
    pub fn register_clients(&mut self, stratum: u16, count: u64) {
        *self.registered.entry(stratum).or_default() += count;
    }

    pub fn registered(&self) -> &BTreeMap<u16, u64> {
        &self.registered
    }

    /// Converts the budget into parameters and starts the query at the next
    /// epoch boundary.
    pub fn publish_query(&mut self, query: Query, budget: Budget, now_ms: u64) -> Result<PublishedQuery, AggregatorError> {
        let coins = ExecutionParams::new(1.0, self.config.p, self.config.q)?.coins;
        let s = invert_budget(&budget, &coins)?;
        let params = ExecutionParams::new(s, self.config.p, self.config.q)?;
        self.publish_with_params(query, params, Some(budget), now_ms)
    }

    /// Publishes with explicit parameters; without a budget no feedback runs.
    pub fn publish_with_params(
        &mut self,
        query: Query,
        params: ExecutionParams,
        budget: Option<Budget>,
        now_ms: u64,
    ) -> Result<PublishedQuery, AggregatorError> {
        validate_query(&query).map_err(AggregatorError::InvalidQuery)?;
        if self.queries.contains_key(&query.query_id) {
            return Err(AggregatorError::DuplicateQuery(query.query_id));
        }
        let start = next_boundary(0, query.answer_frequency_ms, now_ms);
        let published = PublishedQuery {
            query,
            params,
            revision: 0,
            start_ms: start,
        };
        let delta = published.query.slide_interval_ms;
        self.join.raise_timeout(delta * self.config.join_timeout_slides);
        info!(
            "publish query {} with s={} p={} q={} from {start} ms",
            published.query.query_id,
            params.sampling,
            params.p(),
            params.q()
        );
        let pipeline = WindowPipeline::new(&published.query, start).with_lateness(self.config.lateness_ms);
        self.queries.insert(
            published.query.query_id,
            QueryState {
                budget,
                registered: self.registered.clone(),
                current: Revision {
                    published: published.clone(),
                    pipeline,
                },
                previous: None,
                latest: None,
                windows_emitted: 0,
                advisories: Vec::new(),
            },
        );
        Ok(published)
    }

    pub fn published(&self, query_id: u64) -> Option<&PublishedQuery> {
        self.queries.get(&query_id).map(|s| &s.current.published)
    }

    pub fn all_published(&self) -> Vec<PublishedQuery> {
        self.queries.values().map(|s| s.current.published.clone()).collect()
    }

    pub fn latest(&self, query_id: u64) -> Option<&WindowEstimate> {
        self.queries.get(&query_id).and_then(|s| s.latest.as_ref())
    }

    pub fn advisories(&self, query_id: u64) -> &[String] {
        self.queries.get(&query_id).map_or(&[], |s| s.advisories.as_slice())
    }

    pub fn metrics(&self) -> JoinMetrics {
        self.join.metrics()
    }

    /// Flips the query between asking for yes and for no answers. Clients
    /// switch at the next slide boundary, where the window pipeline restarts.
    pub fn invert(&mut self, query_id: u64, now_ms: u64) -> Result<PublishedQuery, AggregatorError> {
        let lateness = self.config.lateness_ms;
        let state = self.queries.get_mut(&query_id).ok_or(AggregatorError::UnknownQuery(query_id))?;
        let old = &state.current;
        let q = &old.published.query;
        let start = next_boundary(0, q.slide_interval_ms, now_ms.max(old.pipeline.origin_ms()));
        let published = PublishedQuery {
            query: q.clone().with_inverted(!q.inverted),
            params: old.published.params,
            revision: old.published.revision + 1,
            start_ms: start,
        };
        let pipeline = WindowPipeline::new(&published.query, start).with_lateness(lateness);
        let old = std::mem::replace(
            &mut state.current,
            Revision {
                published: published.clone(),
                pipeline,
            },
        );
        state.previous = Some(old);
        info!("query {query_id}: inverted={} from {start} ms", published.query.inverted);
        Ok(published)
    }

    /// Feeds shares drained from the relays.
    pub fn ingest<I: IntoIterator<Item = RelayedShare>>(&mut self, shares: I, now_ms: u64) {
        for s in shares {
            self.join.offer_relayed(s, now_ms);
        }
    }

    fn route(&mut self, msg: PlainMessage) {
        if let Some(h) = self.history.as_mut() {
            if let Err(e) = h.append(&msg) {
                warn!("historical store append failed: {e}");
            }
        }
        let Some(state) = self.queries.get_mut(&msg.query_id) else {
            self.join.metrics_mut().quarantined += 1;
            return;
        };
        let target = if msg.timestamp_ms >= state.current.pipeline.origin_ms() {
            &mut state.current
        } else if let Some(prev) = state.previous.as_mut() {
            prev
        } else {
            self.join.metrics_mut().late += 1;
            return;
        };
        match target.pipeline.push(msg) {
            PushOutcome::Accepted => {}
            PushOutcome::Late => self.join.metrics_mut().late += 1,
            PushOutcome::Quarantined => self.join.metrics_mut().quarantined += 1,
        }
    }

    /// Moves time forward: expires stale share sets, places joined messages
    /// into windows and returns every window estimate that became due.
    pub fn tick(&mut self, now_ms: u64) -> Vec<WindowEstimate> {
        self.join.expire(now_ms);
        for msg in self.join.drain_completed() {
            self.route(msg);
        }
        let opts = self.config.estimate;
        let feedback = self.config.feedback;
        let mut out = Vec::new();
        for (&id, state) in self.queries.iter_mut() {
            let mut emitted = Vec::new();
            let cutover = state.current.pipeline.origin_ms();
            if let Some(prev) = state.previous.as_mut() {
                for win in prev.pipeline.advance(now_ms) {
                    if win.end_ms > cutover {
                        break;
                    }
                    emitted.push(estimate_window(&win, &prev.published.query, &prev.published.params, &state.registered, &opts));
                }
                if prev.pipeline.next_end_ms() > cutover {
                    state.previous = None;
                }
            }
            for win in state.current.pipeline.advance(now_ms) {
                let cur = &state.current.published;
                let est = estimate_window(&win, &cur.query, &cur.params, &state.registered, &opts);
                if let (Some(ctl), Some(budget)) = (feedback, state.budget.as_ref()) {
                    if !est.low_sample {
                        match ctl.adjust(&est, budget, &cur.params) {
                            Ok(fb) => {
                                let changed = fb.changed(&cur.params);
                                if let Some(a) = fb.advisory {
                                    warn!("{a}");
                                    state.advisories.push(a);
                                }
                                if changed {
                                    let cur = &mut state.current.published;
                                    cur.params = fb.params;
                                    cur.revision += 1;
                                    cur.start_ms = next_boundary(
                                        state.current.pipeline.origin_ms(),
                                        cur.query.answer_frequency_ms,
                                        now_ms,
                                    );
                                    info!("query {id}: sampling re-tuned to {}", fb.params.sampling);
                                }
                            }
                            Err(e) => warn!("query {id}: feedback skipped: {e}"),
                        }
                    }
                }
                emitted.push(est);
            }
            state.windows_emitted += emitted.len() as u64;
            if let Some(last) = emitted.last() {
                state.latest = Some(last.clone());
            }
            out.extend(emitted);
        }
        out
    }

    /// Human-readable state of one query.
    pub fn status(&self, query_id: u64) -> Result<String, AggregatorError> {
        let state = self.queries.get(&query_id).ok_or(AggregatorError::UnknownQuery(query_id))?;
        let p = &state.current.published;
        let mut lines = vec![
            format!("query_id={query_id}"),
            format!("revision={}", p.revision),
            format!("inverted={}", p.query.inverted),
            format!("s={}", p.params.sampling),
            format!("p={}", p.params.p()),
            format!("q={}", p.params.q()),
            format!("windows_emitted={}", state.windows_emitted),
            format!("registered={}", state.registered.values().sum::<u64>()),
        ];
        if let Some(b) = &state.budget {
            lines.push(format!("budget={} epsilon={}", b.kind.as_str(), b.epsilon));
        }
        if let Some(l) = &state.latest {
            lines.push(format!("latest_window=[{},{}) responses={} flags={}", l.start_ms, l.end_ms, l.responses, l.flags()));
        }
        lines.extend(state.advisories.iter().map(|a| format!("advisory={a}")));
        Ok(lines.join("\n"))
    }

    /// Re-estimates `[from, to)` from the historical store after sampling
    /// stored answers with probability `aggregator_sampling`.
    pub fn historical<R: Rng + ?Sized>(
        &mut self,
        query_id: u64,
        from_ms: u64,
        to_ms: u64,
        aggregator_sampling: f64,
        rng: &mut R,
    ) -> Result<WindowEstimate, AggregatorError> {
        let state = self.queries.get(&query_id).ok_or(AggregatorError::UnknownQuery(query_id))?;
        let store = self.history.as_mut().ok_or(AggregatorError::NoHistory)?;
        let cur = &state.current;
        historical_query(
            store,
            &cur.published.query,
            &cur.published.params,
            &state.registered,
            cur.pipeline.origin_ms(),
            from_ms,
            to_ms,
            aggregator_sampling,
            &self.config.estimate,
            rng,
        )
    }
}

/// Batch estimate over stored answers in `[from, to)`.
///
/// Stored answers are sampled again with `aggregator_sampling`; the estimate
/// scales by the answers that survive both stages, so the effective sampling
/// probability is the client's `s` times `aggregator_sampling`.
#[allow(clippy::too_many_arguments)]
pub fn historical_query<R: Rng + ?Sized>(
    store: &mut HistoricalStore,
    query: &Query,
    params: &ExecutionParams,
    registered: &BTreeMap<u16, u64>,
    origin_ms: u64,
    from_ms: u64,
    to_ms: u64,
    aggregator_sampling: f64,
    opts: &EstimateOptions,
    rng: &mut R,
) -> Result<WindowEstimate, AggregatorError> {
    if from_ms >= to_ms {
        return Err(AggregatorError::EmptyRange(from_ms, to_ms));
    }
    if !(aggregator_sampling > 0.0 && aggregator_sampling <= 1.0) {
        return Err(PrivacyError::InvalidParameter(format!(
            "aggregator sampling must lie in (0,1], got {aggregator_sampling}"
        ))
        .into());
    }
    let read = store.read_range(query.query_id, from_ms, to_ms, aggregator_sampling, rng)?;
    let window = Window {
        start_ms: from_ms,
        end_ms: to_ms,
        epochs: epochs_between(origin_ms, query.answer_frequency_ms, from_ms, to_ms),
        messages: read.messages,
    };
    let effective = params.with_sampling(params.sampling * aggregator_sampling);
    Ok(estimate_window(&window, query, &effective, registered, opts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{ClientAgent, ClientConfig, LocalStore};
    use crate::query::{BucketSpec, Predicate, Record, Scalar};
    use crate::transport::Relay;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn query(id: u64) -> Query {
        Query::new(id, Predicate::always(), BucketSpec::from_edges("v", &[0.0, 1.0, 2.0, 3.0]))
            .with_timing(1000, 2000, 1000)
    }

    struct Fleet {
        agents: Vec<ClientAgent>,
        relays: Vec<Arc<Relay>>,
    }

    fn fleet(n: usize, seed: u64) -> Fleet {
        let relays: Vec<Arc<Relay>> = (0..2).map(|i| Arc::new(Relay::new(format!("r{i}"), 1 << 20))).collect();
        let agents = (0..n)
            .map(|i| {
                let cfg = ClientConfig::new(format!("c{i}"), 0, vec!["r0".into(), "r1".into()])
                    .unwrap()
                    .with_seed(seed * 1_000_003 + i as u64);
                let mut store = LocalStore::new();
                for t in 0..20u64 {
                    store
                        .push(Record::new(t * 1000 + 10).with("v", Scalar::Number(((i as u64 + t) % 3) as f64)))
                        .unwrap();
                }
                ClientAgent::new(cfg, store)
            })
            .collect();
        Fleet { agents, relays }
    }

    fn step(agg: &mut Aggregator, fleet: &mut Fleet, now: u64) -> Vec<WindowEstimate> {
        for a in fleet.agents.iter_mut() {
            a.answer_due(now, &mut fleet.relays).unwrap();
        }
        let shares: Vec<RelayedShare> = fleet.relays.iter().flat_map(|r| r.drain(usize::MAX)).collect();
        agg.ingest(shares, now);
        agg.tick(now)
    }

    #[test]
    fn publish_converts_budget_and_rejects_duplicates() {
        let mut agg = Aggregator::new(AggregatorConfig { p: 0.5, q: 0.5, ..Default::default() }).unwrap();
        let pq = agg.publish_query(query(1), Budget::zk(5f64.ln()).unwrap(), 0).unwrap();
        assert!((pq.params.sampling - 0.5).abs() < 1e-12);
        assert!(matches!(
            agg.publish_query(query(1), Budget::zk(1.0).unwrap(), 0),
            Err(AggregatorError::DuplicateQuery(1))
        ));
        let x = 0.5 / (0.5 * 0.5);
        let pq = agg.publish_query(query(2), Budget::dp((1.0f64 + x).ln()).unwrap(), 1500).unwrap();
        assert!((pq.params.sampling - 1.0).abs() < 1e-12);
        assert_eq!(pq.start_ms, 2000);
    }

    #[test]
    fn exact_pipeline_matches_oracle() {
        let mut agg = Aggregator::new(AggregatorConfig { feedback: None, ..Default::default() }).unwrap();
        agg.register_clients(0, 30);
        let pq = agg
            .publish_with_params(query(1), ExecutionParams::new(1.0, 1.0, 0.5).unwrap(), None, 0)
            .unwrap();
        let mut f = fleet(30, 1);
        for a in f.agents.iter_mut() {
            a.subscribe(pq.clone());
        }
        let mut all = Vec::new();
        for now in (1000..=10_000).step_by(1000) {
            all.extend(step(&mut agg, &mut f, now));
        }
        assert_eq!(all.len(), 10);
        for est in &all {
            let mut truth = [0.0f64; 3];
            for i in 0..30u64 {
                for t in est.start_ms / 1000..est.end_ms / 1000 {
                    truth[((i + t) % 3) as usize] += 1.0;
                }
            }
            let got: Vec<f64> = est.buckets.iter().map(|b| b.estimate).collect();
            assert_eq!(got, truth.to_vec(), "window {}", est.start_ms);
            assert!(est.buckets.iter().all(|b| b.half_width == 0.0));
        }
        assert_eq!(agg.metrics().joined, 300);
    }

    #[test]
    fn inversion_switches_at_boundary() {
        let mut agg = Aggregator::new(AggregatorConfig { feedback: None, ..Default::default() }).unwrap();
        agg.register_clients(0, 20);
        let pq = agg
            .publish_with_params(query(1), ExecutionParams::new(1.0, 1.0, 0.5).unwrap(), None, 0)
            .unwrap();
        let mut f = fleet(20, 2);
        for a in f.agents.iter_mut() {
            a.subscribe(pq.clone());
        }
        let mut all = step(&mut agg, &mut f, 2000);
        let inv = agg.invert(1, 2500).unwrap();
        assert_eq!((inv.revision, inv.start_ms, inv.query.inverted), (1, 3000, true));
        for a in f.agents.iter_mut() {
            a.subscribe(inv.clone());
        }
        for now in (3000..=8000).step_by(1000) {
            all.extend(step(&mut agg, &mut f, now));
        }
        let ends: Vec<u64> = all.iter().map(|e| e.end_ms).collect();
        assert_eq!(ends, vec![1000, 2000, 3000, 4000, 5000, 6000, 7000, 8000]);
        for est in &all {
            assert_eq!(est.inverted, est.end_ms > 3000);
            let total: f64 = est.buckets.iter().map(|b| b.estimate).sum();
            assert_eq!(total, est.population as f64);
        }
        assert_eq!(agg.metrics().late, 0);
    }

    #[test]
    fn feedback_retunes_sampling_within_budget() {
        let cfg = AggregatorConfig { p: 0.9, q: 0.6, ..Default::default() };
        let mut agg = Aggregator::new(cfg).unwrap();
        agg.register_clients(0, 200);
        let budget = Budget::zk(3.0).unwrap().with_error_target(0.01);
        let pq = agg
            .publish_with_params(query(1), ExecutionParams::new(0.1, 0.9, 0.6).unwrap(), Some(budget), 0)
            .unwrap();
        let mut f = fleet(200, 3);
        for a in f.agents.iter_mut() {
            a.subscribe(pq.clone());
        }
        let mut last = pq.clone();
        for now in (1000..=12_000).step_by(1000) {
            step(&mut agg, &mut f, now);
            let cur = agg.published(1).unwrap().clone();
            if cur.revision != last.revision {
                assert!(cur.params.sampling >= last.params.sampling);
                for a in f.agents.iter_mut() {
                    a.subscribe(cur.clone());
                }
                last = cur;
            }
        }
        let ceiling = sampling_ceiling(&budget, &last.params).unwrap();
        assert!(last.params.sampling <= ceiling);
        assert!(last.revision > 0);
        assert!(last.params.sampling > 0.1);
        assert!(agg.status(1).unwrap().contains("revision="));
    }

    #[test]
    fn historical_matches_streaming_at_full_sampling() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = AggregatorConfig {
            feedback: None,
            history_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        let mut agg = Aggregator::new(cfg).unwrap();
        agg.register_clients(0, 50);
        let q = query(4).with_timing(1000, 4000, 4000);
        let pq = agg.publish_with_params(q, ExecutionParams::new(0.7, 0.8, 0.5).unwrap(), None, 0).unwrap();
        let mut f = fleet(50, 4);
        for a in f.agents.iter_mut() {
            a.subscribe(pq.clone());
        }
        let mut streamed = Vec::new();
        for now in (1000..=8000).step_by(1000) {
            streamed.extend(step(&mut agg, &mut f, now));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let hist = agg.historical(4, 4000, 8000, 1.0, &mut rng).unwrap();
        assert_eq!(&hist, streamed.iter().find(|e| e.start_ms == 4000).unwrap());
        assert!(matches!(agg.historical(4, 5, 5, 1.0, &mut rng), Err(AggregatorError::EmptyRange(..))));
        let half = agg.historical(4, 0, 8000, 0.5, &mut rng).unwrap();
        assert!((half.sampling - 0.35).abs() < 1e-12);
    }
}
