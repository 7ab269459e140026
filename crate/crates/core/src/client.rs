//! The client side: a local record store and the per-epoch answering loop.
//!
//! For every epoch `[e - f, e)` of a subscribed query the agent flips its
//! sampling coin. On success it bucketizes the most recent matching record
//! (all zeros when none matched), randomizes the bits, splits the message
//! into XOR shares and hands share `i` to proxy `i`. A failed coin sends
//! nothing at all. Messages are stamped with the epoch start `e - f`.

use std::collections::{BTreeMap, VecDeque};
use std::io::BufRead;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::privacy::randomize_bits;
use crate::query::{bucketize, BitVector, PublishedQuery, Query, QueryError, Record};
use crate::transport::{split_encrypt, PlainMessage, Relay, RelayClient, ShareMessage, TransportError};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("record at {got} ms is older than the newest stored record ({newest} ms)")]
    OutOfOrder { got: u64, newest: u64 },
    #[error("not subscribed to query {0}")]
    NotSubscribed(u64),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Participation coin: `true` with probability `s`.
pub fn sampling_coin<R: Rng + ?Sized>(s: f64, rng: &mut R) -> bool {
    if s >= 1.0 {
        true
    } else if s <= 0.0 {
        false
    } else {
        rng.gen::<f64>() < s
    }
}

/// A client's own records, oldest first.
#[derive(Debug, Clone, Default)]
pub struct LocalStore {
    records: VecDeque<Record>,
    capacity: Option<usize>,
}

impl LocalStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Keeps at most `capacity` records, evicting the oldest.
    pub fn bounded(capacity: usize) -> Self {
        LocalStore {
            records: VecDeque::new(),
            capacity: Some(capacity.max(1)),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: Record) -> Result<(), ClientError> {
        if let Some(last) = self.records.back() {
            if record.timestamp_ms < last.timestamp_ms {
                return Err(ClientError::OutOfOrder {
                    got: record.timestamp_ms,
                    newest: last.timestamp_ms,
                });
            }
        }
        if self.capacity == Some(self.records.len()) {
            self.records.pop_front();
        }
        self.records.push_back(record);
        Ok(())
    }

    /// Reads `timestamp_ms,field=value,...` lines; blank lines and `#` comments are skipped.
    pub fn ingest<R: BufRead>(&mut self, reader: R) -> Result<usize, ClientError> {
        let mut n = 0;
        for line in reader.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.push(Record::parse_line(line)?)?;
            n += 1;
        }
        Ok(n)
    }

    /// Records with `start <= timestamp < end`.
    pub fn range(&self, start_ms: u64, end_ms: u64) -> impl DoubleEndedIterator<Item = &Record> {
        let lo = self.records.partition_point(|r| r.timestamp_ms < start_ms);
        let hi = self.records.partition_point(|r| r.timestamp_ms < end_ms).max(lo);
        self.records.range(lo..hi)
    }
}

/// The truthful bits for one epoch: the newest record in `[start, end)` that
/// satisfies the predicate and carries the bucket field, or all zeros.
/// Inverted queries answer the complement.
pub fn truthful_answer(store: &LocalStore, query: &Query, start_ms: u64, end_ms: u64) -> BitVector {
    let field = query.buckets.field();
    let bits = store
        .range(start_ms, end_ms)
        .rev()
        .filter(|r| query.predicate.matches(r))
        .find_map(|r| r.get(field).and_then(|v| bucketize(v, &query.buckets).ok()))
        .unwrap_or_else(|| BitVector::zeros(query.n_buckets()));
    if query.inverted {
        bits.negated()
    } else {
        bits
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    /// Never leaves the device.
    pub client_id: String,
    pub stratum_id: u16,
    /// One relay per share index.
    pub proxies: Vec<String>,
    pub rng_seed: Option<u64>,
    /// Control endpoint to poll for published queries.
    pub aggregator: Option<String>,
}

impl ClientConfig {
    pub fn new(client_id: impl Into<String>, stratum_id: u16, proxies: Vec<String>) -> Result<Self, ClientError> {
        let cfg = ClientConfig {
            client_id: client_id.into(),
            stratum_id,
            proxies,
            rng_seed: None,
            aggregator: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = Some(seed);
        self
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.proxies.len() < 2 || self.proxies.len() > u8::MAX as usize {
            return Err(ClientError::Config(format!(
                "need between 2 and 255 proxies, got {}",
                self.proxies.len()
            )));
        }
        Ok(())
    }

    /// Parses `key=value` lines: `client_id`, `stratum`, `proxy` (repeatable)
    /// or `proxies` (comma separated), `seed`, `aggregator`.
    pub fn parse(text: &str) -> Result<Self, ClientError> {
        let mut cfg = ClientConfig {
            client_id: String::new(),
            stratum_id: 0,
            proxies: vec![],
            rng_seed: None,
            aggregator: None,
        };
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ClientError::Config(format!("expected key=value: {line:?}")))?;
            let v = v.trim();
            let bad = |what: &str| ClientError::Config(format!("bad {what}: {v:?}"));
            match k.trim() {
                "client_id" => cfg.client_id = v.to_string(),
                "stratum" => cfg.stratum_id = v.parse().map_err(|_| bad("stratum"))?,
                "proxy" => cfg.proxies.push(v.to_string()),
                "proxies" => cfg
                    .proxies
                    .extend(v.split(',').map(|p| p.trim().to_string()).filter(|p| !p.is_empty())),
                "seed" => cfg.rng_seed = Some(v.parse().map_err(|_| bad("seed"))?),
                "aggregator" => cfg.aggregator = Some(v.to_string()),
                other => return Err(ClientError::Config(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Where an agent delivers its shares; `proxy` is the 0-based share position.
pub trait ShareSink {
    fn send(&mut self, proxy: usize, share: &ShareMessage) -> Result<(), TransportError>;
}

/// In-process relays, one per share index.
impl ShareSink for [Arc<Relay>] {
    fn send(&mut self, proxy: usize, share: &ShareMessage) -> Result<(), TransportError> {
        self[proxy].forward(share.clone())
    }
}

impl ShareSink for Vec<Arc<Relay>> {
    fn send(&mut self, proxy: usize, share: &ShareMessage) -> Result<(), TransportError> {
        self.as_mut_slice().send(proxy, share)
    }
}

/// Relays reached over TCP, connected lazily and reconnected after errors.
pub struct TcpRelays {
    addrs: Vec<String>,
    conns: Vec<Option<RelayClient>>,
}

impl TcpRelays {
    pub fn new(addrs: Vec<String>) -> Self {
        let conns = addrs.iter().map(|_| None).collect();
        TcpRelays { addrs, conns }
    }
}

impl ShareSink for TcpRelays {
    fn send(&mut self, proxy: usize, share: &ShareMessage) -> Result<(), TransportError> {
        if self.conns[proxy].is_none() {
            self.conns[proxy] = Some(RelayClient::connect(&self.addrs[proxy]).map_err(|e| TransportError::Io(e.to_string()))?);
        }
        let result = self.conns[proxy].as_mut().unwrap().send(share);
        if matches!(result, Err(TransportError::Io(_))) {
            self.conns[proxy] = None;
        }
        result
    }
}

/// Bounded exponential backoff for retryable send failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 5,
            initial_backoff: Duration::from_millis(2),
            max_backoff: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EpochOutcome {
    /// All shares were accepted by their relays.
    Dispatched { message_id: u128, bytes: usize },
    /// The sampling coin said no; nothing was sent.
    Skipped,
    /// Sending failed after retries; the epoch's answer is abandoned.
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubscribeOutcome {
    New,
    /// Same query and revision as before; ignored.
    Duplicate,
    /// A newer revision replaced the current one.
    Replaced,
    /// An older revision than the current one; ignored.
    Stale,
}

#[derive(Debug, Clone)]
struct Subscription {
    published: PublishedQuery,
    last_epoch_end: Option<u64>,
    /// The replaced revision, still answering epochs that end by `published.start_ms`.
    retiring: Option<Box<Subscription>>,
}

impl Subscription {
    /// The revision in force for the epoch ending at `epoch_end_ms`.
    fn for_epoch(&self, epoch_end_ms: u64) -> &PublishedQuery {
        match &self.retiring {
            Some(old) if epoch_end_ms <= self.published.start_ms => &old.published,
            _ => &self.published,
        }
    }
}

/// One client: its store, its subscriptions and its randomness.
pub struct ClientAgent {
    config: ClientConfig,
    store: LocalStore,
    subs: BTreeMap<u64, Subscription>,
    rng: ChaCha20Rng,
    retry: RetryPolicy,
}

impl ClientAgent {
    pub fn new(config: ClientConfig, store: LocalStore) -> Self {
        let rng = match config.rng_seed {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed),
            None => ChaCha20Rng::from_entropy(),
        };
        ClientAgent {
            config,
            store,
            subs: BTreeMap::new(),
            rng,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn config(&self) -> &ClientConfig {
        &self.config
    }

    pub fn store(&self) -> &LocalStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut LocalStore {
        &mut self.store
    }

    pub fn subscriptions(&self) -> impl Iterator<Item = &PublishedQuery> {
        self.subs.values().map(|s| &s.published)
    }

    /// Registers a published query. Answering starts with the epoch that
    /// begins at `start_ms`.
    pub fn subscribe(&mut self, published: PublishedQuery) -> SubscribeOutcome {
        let id = published.query.query_id;
        let outcome = match self.subs.get(&id) {
            None => SubscribeOutcome::New,
            Some(cur) if published.revision == cur.published.revision => return SubscribeOutcome::Duplicate,
            Some(cur) if published.revision < cur.published.revision => return SubscribeOutcome::Stale,
            Some(_) => SubscribeOutcome::Replaced,
        };
        debug!("client {}: query {id} revision {} ({outcome:?})", self.config.client_id, published.revision);
        let retiring = self.subs.remove(&id).map(|mut old| {
            old.retiring = None;
            Box::new(old)
        });
        self.subs.insert(
            id,
            Subscription {
                published,
                last_epoch_end: None,
                retiring,
            },
        );
        outcome
    }

    pub fn unsubscribe(&mut self, query_id: u64) -> bool {
        self.subs.remove(&query_id).is_some()
    }

    /// Builds this epoch's randomized message, or `None` when the coin says no.
    pub fn prepare_epoch(&mut self, query_id: u64, epoch_end_ms: u64) -> Result<Option<PlainMessage>, ClientError> {
        let sub = self.subs.get(&query_id).ok_or(ClientError::NotSubscribed(query_id))?;
        let PublishedQuery { query, params, .. } = sub.for_epoch(epoch_end_ms);
        if !sampling_coin(params.sampling, &mut self.rng) {
            return Ok(None);
        }
        let start = epoch_end_ms.saturating_sub(query.answer_frequency_ms);
        let truth = truthful_answer(&self.store, query, start, epoch_end_ms);
        let bits = randomize_bits(&truth, &params.coins, &mut self.rng);
        Ok(Some(PlainMessage::new(query_id, self.config.stratum_id, start, bits)))
    }

    /// Answers the epoch ending at `epoch_end_ms` and ships the shares.
    /// Answers are only meaningful for epoch ends `start_ms + k f`, `k >= 1`.
    pub fn answer_epoch<S: ShareSink + ?Sized>(
        &mut self,
        query_id: u64,
        epoch_end_ms: u64,
        sink: &mut S,
    ) -> Result<EpochOutcome, ClientError> {
        let Some(msg) = self.prepare_epoch(query_id, epoch_end_ms)? else {
            return Ok(EpochOutcome::Skipped);
        };
        let shares = split_encrypt(&msg, self.config.proxies.len(), &mut self.rng)?;
        let mut bytes = 0;
        for (i, share) in shares.iter().enumerate() {
            if let Err(e) = self.send_with_retry(sink, i, share) {
                warn!(
                    "client {}: dropping epoch {epoch_end_ms} of query {query_id}: {e}",
                    self.config.client_id
                );
                return Ok(EpochOutcome::Dropped);
            }
            bytes += share.frame_len();
        }
        Ok(EpochOutcome::Dispatched {
            message_id: shares[0].message_id,
            bytes,
        })
    }

    fn send_with_retry<S: ShareSink + ?Sized>(
        &self,
        sink: &mut S,
        proxy: usize,
        share: &ShareMessage,
    ) -> Result<(), TransportError> {
        let mut backoff = self.retry.initial_backoff;
        let mut attempt = 1;
        loop {
            match sink.send(proxy, share) {
                Ok(()) => return Ok(()),
                Err(e) if e.is_retryable() && attempt < self.retry.attempts => {
                    thread::sleep(backoff);
                    backoff = (backoff * 2).min(self.retry.max_backoff);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Answers every epoch of every subscription that ended at or before
    /// `now_ms` and has not been answered yet.
    pub fn answer_due<S: ShareSink + ?Sized>(
        &mut self,
        now_ms: u64,
        sink: &mut S,
    ) -> Result<Vec<(u64, u64, EpochOutcome)>, ClientError> {
        fn pending(sub: &Subscription, until_ms: u64) -> Vec<u64> {
            let f = sub.published.query.answer_frequency_ms.max(1);
            let mut e = sub.last_epoch_end.map_or(sub.published.start_ms + f, |last| last + f);
            let mut out = Vec::new();
            while e <= until_ms {
                out.push(e);
                e += f;
            }
            out
        }
        let mut due = Vec::new();
        for (id, sub) in &self.subs {
            if let Some(old) = &sub.retiring {
                due.extend(pending(old, now_ms.min(sub.published.start_ms)).into_iter().map(|e| (*id, e)));
            }
            due.extend(pending(sub, now_ms).into_iter().map(|e| (*id, e)));
        }
        due.sort_by_key(|&(id, e)| (e, id));
        let mut out = Vec::with_capacity(due.len());
        for (id, e) in due {
            let outcome = self.answer_epoch(id, e, sink)?;
            if let Some(sub) = self.subs.get_mut(&id) {
                match sub.retiring.as_mut() {
                    Some(old) if e <= sub.published.start_ms => old.last_epoch_end = Some(e),
                    _ => sub.last_epoch_end = Some(e),
                }
            }
            out.push((id, e, outcome));
        }
        for sub in self.subs.values_mut() {
            if now_ms >= sub.published.start_ms {
                sub.retiring = None;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::query::{BucketSpec, ExecutionParams, Predicate, Scalar};
    use crate::transport::{join_decrypt, RelayedShare};

    fn speed_query() -> Query {
        let mut edges = vec![0.0, 1.0];
        edges.extend((1..=10).map(|k| 1.0 + 10.0 * k as f64));
        edges.push(f64::INFINITY);
        Query::new(1, Predicate::always(), BucketSpec::from_edges("speed", &edges)).with_timing(1000, 1000, 1000)
    }

    fn published(query: Query, s: f64, p: f64) -> PublishedQuery {
        PublishedQuery {
            query,
            params: ExecutionParams::test_mode(s, p, 0.5).unwrap(),
            revision: 0,
            start_ms: 0,
        }
    }

    fn relays(n: usize) -> Vec<Arc<Relay>> {
        (0..n).map(|i| Arc::new(Relay::new(format!("r{i}"), 1024))).collect()
    }

    fn agent(seed: u64) -> ClientAgent {
        let cfg = ClientConfig::new("c", 4, vec!["a".into(), "b".into()]).unwrap().with_seed(seed);
        ClientAgent::new(cfg, LocalStore::new())
    }

    fn collect(relays: &[Arc<Relay>]) -> Vec<RelayedShare> {
        relays.iter().flat_map(|r| r.drain(usize::MAX)).collect()
    }

    #[test]
    fn coin_rates() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        assert!((0..1000).all(|_| sampling_coin(1.0, &mut rng)));
        let hits = (0..100_000).filter(|_| sampling_coin(0.6, &mut rng)).count();
        assert!((hits as f64 / 1e5 - 0.6).abs() < 0.01);
        assert!((0..100).all(|_| !sampling_coin(1e-6, &mut rng)));
    }

    #[test]
    fn fifteen_mph_end_to_end() {
        let mut a = agent(1);
        a.store_mut().push(Record::new(500).with("speed", Scalar::Number(15.0))).unwrap();
        a.subscribe(published(speed_query(), 1.0, 1.0));
        let mut rs = relays(2);
        let out = a.answer_epoch(1, 1000, &mut rs).unwrap();
        assert!(matches!(out, EpochOutcome::Dispatched { .. }));
        let shares: Vec<_> = collect(&rs).into_iter().map(|r| r.share).collect();
        let m = join_decrypt(&shares).unwrap();
        assert_eq!(m.bits.to_string(), "001000000000");
        assert_eq!((m.stratum_id, m.timestamp_ms), (4, 0));
    }

    #[test]
    fn empty_store_sends_zeros_and_inverted_sends_ones() {
        let mut a = agent(2);
        a.subscribe(published(speed_query(), 1.0, 1.0));
        let m = a.prepare_epoch(1, 1000).unwrap().unwrap();
        assert_eq!(m.bits.count_ones(), 0);
        a.subscribe(PublishedQuery {
            revision: 1,
            ..published(speed_query().with_inverted(true), 1.0, 1.0)
        });
        assert_eq!(a.prepare_epoch(1, 2000).unwrap().unwrap().bits.count_ones(), 12);
    }

    #[test]
    fn newest_matching_record_in_epoch_wins() {
        let mut store = LocalStore::new();
        for (t, v) in [(100, 5.0), (600, 50.0), (900, 95.0), (1500, 200.0)] {
            store.push(Record::new(t).with("speed", Scalar::Number(v))).unwrap();
        }
        let q = speed_query();
        assert!(truthful_answer(&store, &q, 0, 1000).get(10));
        let q2 = Query {
            predicate: "speed < 60".parse().unwrap(),
            ..q
        };
        assert!(truthful_answer(&store, &q2, 0, 1000).get(5));
        assert_eq!(truthful_answer(&store, &q2, 1000, 2000).count_ones(), 0);
    }

    #[test]
    fn zero_sampling_sends_nothing() {
        let mut a = agent(3);
        a.subscribe(published(speed_query(), 0.0, 1.0));
        let mut rs = relays(2);
        for e in 1..=50 {
            assert_eq!(a.answer_epoch(1, e * 1000, &mut rs).unwrap(), EpochOutcome::Skipped);
        }
        assert!(rs.iter().all(|r| r.is_empty()));
    }

    #[test]
    fn subscribe_is_idempotent_and_revision_aware() {
        let mut a = agent(4);
        let pq = published(speed_query(), 1.0, 1.0);
        assert_eq!(a.subscribe(pq.clone()), SubscribeOutcome::New);
        assert_eq!(a.subscribe(pq.clone()), SubscribeOutcome::Duplicate);
        assert_eq!(a.subscribe(PublishedQuery { revision: 2, ..pq.clone() }), SubscribeOutcome::Replaced);
        assert_eq!(a.subscribe(pq), SubscribeOutcome::Stale);
        assert!(matches!(a.prepare_epoch(99, 1000), Err(ClientError::NotSubscribed(99))));
    }

    #[test]
    fn answer_due_walks_epochs_per_query() {
        let mut a = agent(5);
        a.subscribe(PublishedQuery {
            start_ms: 2000,
            ..published(speed_query(), 1.0, 1.0)
        });
        let mut other = speed_query().with_timing(500, 500, 500);
        other.query_id = 2;
        a.subscribe(published(other, 1.0, 1.0));
        let mut rs = relays(2);
        let done = a.answer_due(4000, &mut rs).unwrap();
        let q1: Vec<u64> = done.iter().filter(|d| d.0 == 1).map(|d| d.1).collect();
        let q2 = done.iter().filter(|d| d.0 == 2).count();
        assert_eq!(q1, vec![3000, 4000]);
        assert_eq!(q2, 8);
        assert!(a.answer_due(4000, &mut rs).unwrap().is_empty());
    }

    #[test]
    fn same_seed_same_bytes() {
        let run = || {
            let mut a = agent(77);
            a.store_mut().push(Record::new(10).with("speed", Scalar::Number(33.0))).unwrap();
            a.subscribe(published(speed_query(), 0.7, 0.5));
            let mut rs = relays(2);
            for e in 1..=20 {
                a.answer_epoch(1, e * 1000, &mut rs).unwrap();
            }
            collect(&rs).into_iter().map(|r| r.share.to_frame()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backpressure_retries_then_drops() {
        let mut a = agent(6).with_retry(RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_micros(10),
            max_backoff: Duration::from_micros(40),
        });
        a.subscribe(published(speed_query(), 1.0, 1.0));
        let mut rs: Vec<Arc<Relay>> = (0..2).map(|i| Arc::new(Relay::new(format!("r{i}"), 1))).collect();
        assert!(matches!(a.answer_epoch(1, 1000, &mut rs).unwrap(), EpochOutcome::Dispatched { .. }));
        assert_eq!(a.answer_epoch(1, 2000, &mut rs).unwrap(), EpochOutcome::Dropped);
    }

    #[test]
    fn store_rules_and_ingest() {
        let mut s = LocalStore::bounded(2);
        s.push(Record::new(5)).unwrap();
        assert!(matches!(s.push(Record::new(4)), Err(ClientError::OutOfOrder { .. })));
        let n = s.ingest("# speeds\n6,speed=3\n\n7,speed=4,city=NYC\n".as_bytes()).unwrap();
        assert_eq!((n, s.len()), (2, 2));
        assert_eq!(s.range(0, 100).next().unwrap().timestamp_ms, 6);
    }

    #[test]
    fn config_parsing() {
        let c = ClientConfig::parse("client_id=x\nstratum=3\nproxies=127.0.0.1:1, 127.0.0.1:2\nseed=9\n").unwrap();
        assert_eq!((c.stratum_id, c.proxies.len(), c.rng_seed), (3, 2, Some(9)));
        assert!(ClientConfig::parse("proxy=a\n").is_err());
        assert!(ClientConfig::parse("proxy=a\nproxy=b\ncolor=red\n").is_err());
    }
}
