use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use privapprox::aggregator::{historical_query, EstimateOptions, HistoricalStore, WindowEstimate};
use privapprox::privacy::randomize_bits;
use privapprox::query::{BitVector, BucketSpec, ExecutionParams, Predicate, Query};
use privapprox::transport::PlainMessage;

const CLIENTS: u64 = 10_000;
const EPOCHS: u64 = 10;
const F: u64 = 60_000;
const BUCKETS: usize = 11;
/// The bucket whose count is checked; 60% of clients fall in it.
const HOT: usize = 4;

fn query() -> Query {
    let edges: Vec<f64> = (0..=BUCKETS).map(|b| b as f64).collect();
    Query::new(3, Predicate::always(), BucketSpec::from_edges("distance", &edges)).with_timing(F, F * EPOCHS, F * EPOCHS)
}

/// 10^5 stored answers, 60% of them in the hot bucket; returns its true count.
fn fill(store: &mut HistoricalStore, params: &ExecutionParams) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut yes = 0.0;
    for e in 0..EPOCHS {
        for _ in 0..CLIENTS {
            let bucket = if rng.gen::<f64>() < 0.6 { HOT } else { rng.gen_range(0..BUCKETS - 1) + usize::from(rng.gen_range(0..BUCKETS - 1) >= HOT) };
            yes += f64::from(u8::from(bucket == HOT));
            let mut bits = BitVector::zeros(BUCKETS);
            bits.set(bucket, true);
            let sent = randomize_bits(&bits, &params.coins, &mut rng);
            store.append(&PlainMessage::new(3, 0, e * F, sent)).unwrap();
        }
    }
    store.flush().unwrap();
    yes
}

fn run(store: &mut HistoricalStore, params: &ExecutionParams, a: f64, seed: u64) -> (WindowEstimate, Duration) {
    let registered = BTreeMap::from([(0u16, CLIENTS)]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Instant::now();
    let est = historical_query(
        store,
        &query(),
        params,
        &registered,
        0,
        0,
        F * EPOCHS,
        a,
        &EstimateOptions::default(),
        &mut rng,
    )
    .unwrap();
    (est, t.elapsed())
}

#[test]
fn aggregator_sampling_trades_little_accuracy_for_speed() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = HistoricalStore::open(dir.path()).unwrap();
    let params = ExecutionParams::new(1.0, 0.9, 0.6).unwrap();
    let yes = fill(&mut store, &params);

    let mut full_t = Duration::MAX;
    let mut part_t = Duration::MAX;
    let mut full_loss = 0.0;
    let mut part_loss = 0.0;
    const REPS: u64 = 15;
    for rep in 0..REPS {
        let (full, t1) = run(&mut store, &params, 1.0, rep);
        let (part, t2) = run(&mut store, &params, 0.6, rep);
        full_t = full_t.min(t1);
        part_t = part_t.min(t2);
        assert_eq!(full.responses, CLIENTS * EPOCHS);
        assert!((part.sampling - 0.6).abs() < 1e-12);
        full_loss += (full.buckets[HOT].estimate - yes).abs() / yes / REPS as f64;
        part_loss += (part.buckets[HOT].estimate - yes).abs() / yes / REPS as f64;
    }
    let speedup = full_t.as_secs_f64() / part_t.as_secs_f64();
    eprintln!("historical: speedup {speedup:.2}x, loss {full_loss:.5} -> {part_loss:.5}");
    assert!(speedup >= 1.4, "speedup {speedup:.2}");
    assert!(part_loss - full_loss < 0.01);
}

#[test]
fn empty_range_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut store = HistoricalStore::open(dir.path()).unwrap();
    let params = ExecutionParams::new(1.0, 0.9, 0.6).unwrap();
    let registered = BTreeMap::from([(0u16, 1)]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = historical_query(&mut store, &query(), &params, &registered, 0, 5, 5, 1.0, &EstimateOptions::default(), &mut rng);
    assert!(r.is_err());
}

