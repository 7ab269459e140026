//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Run everything with `cargo test -p privapprox --test acceptance`, or pick
//! criteria by number: `cargo test -p privapprox --test acceptance -- 3 7`.
//!
//! Criterion 10 contains a shape the estimator cannot reproduce (see the
//! comment on `rr_variance_oracle`); that failure is reported as FAIL and
//! does not fail the process as long as it fails for the analysed reason.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use privapprox::client::sampling_coin;
use privapprox::harness::{mean_eta_by_value, run_scenario, run_seeds, summarize, sweep, Scenario};
use privapprox::privacy::{eps_dp, eps_of_kind, eps_zk, invert_budget, randomize_bit, RRCoins};
use privapprox::query::{BitVector, Budget, BudgetKind};
use privapprox::transport::{join_decrypt, split_encrypt, xor_join, PlainMessage};

struct Outcome {
    pass: bool,
    detail: String,
    /// The failure is the one recorded as unattainable.
    documented_failure: bool,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
            documented_failure: false,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

fn c1_privacy_ordering() -> Outcome {
    let mut min_ratio = f64::INFINITY;
    let mut bad = Vec::new();
    for &p in &grid() {
        for &q in &grid() {
            let coins = RRCoins::new(p, q).unwrap();
            for &s in &grid() {
                let zk = eps_zk(s, &coins).unwrap();
                let dp = eps_dp(s, &coins).unwrap();
                min_ratio = min_ratio.min(zk / dp);
                if !(zk >= dp && dp > 0.0 && zk / dp >= 1.0) {
                    bad.push((p, q, s));
                }
            }
        }
    }
    Outcome::new(
        bad.is_empty(),
        format!("729 grid points, min eps_zk/eps_dp {min_ratio:.6}, violations {bad:?}"),
    )
}

fn c2_budget_roundtrip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = rng.gen_range(0.05..0.95);
        let q = rng.gen_range(0.05..0.95);
        let s = rng.gen_range(0.01..0.99);
        let coins = RRCoins::new(p, q).unwrap();
        let kind = if rng.gen() { BudgetKind::ZeroKnowledge } else { BudgetKind::Differential };
        let eps = eps_of_kind(kind, s, &coins).unwrap();
        let s_back = invert_budget(&Budget::new(kind, eps).unwrap(), &coins).unwrap();
        worst = worst.max((eps_of_kind(kind, s_back, &coins).unwrap() - eps).abs());
    }
    Outcome::new(worst <= 1e-9, format!("1000 budgets, max |eps' - eps| = {worst:.3e} (tolerance 1e-9)"))
}

fn c3_unbiased() -> Outcome {
    let sc = Scenario {
        n_clients: 10_000,
        yes_fraction: 0.6,
        s: 1.0,
        p: 0.3,
        q: 0.6,
        runs: 100,
        seed: 3_000,
        ..Default::default()
    };
    let rs = run_seeds(&sc).unwrap();
    let m = mean(&rs.iter().map(|r| r.estimate).collect::<Vec<_>>());
    let rel = (m - 6000.0).abs() / 6000.0;
    Outcome::new(
        rs.len() == 100 && rel <= 0.01,
        format!("mean de-biased yes count {m:.1} over {} runs, {:.3}% from 6000 (tolerance 1%)", rs.len(), 100.0 * rel),
    )
}

fn c4_additivity() -> Outcome {
    let base = Scenario {
        n_clients: 10_000,
        yes_fraction: 0.6,
        runs: 100,
        seed: 4_000,
        ..Default::default()
    };
    let loss = |s: f64, p: f64| {
        summarize(&run_seeds(&Scenario { s, p, q: 0.6, ..base.clone() }).unwrap()).mean_eta
    };
    let sampling_only = loss(0.6, 1.0);
    let rr_only = loss(1.0, 0.3);
    let combined = loss(0.6, 0.3);
    let rel = (sampling_only + rr_only - combined).abs() / combined;
    Outcome::new(
        rel <= 0.2,
        format!(
            "sampling-only {:.4}% + rr-only {:.4}% vs combined {:.4}%: {:.1}% apart (tolerance 20%)",
            100.0 * sampling_only,
            100.0 * rr_only,
            100.0 * combined,
            100.0 * rel
        ),
    )
}

fn c5_coverage() -> Outcome {
    let srs = Scenario {
        n_clients: 400,
        yes_fraction: 0.6,
        s: 0.5,
        p: 0.9,
        q: 0.6,
        epochs: 1000,
        seed: 5_000,
        ..Default::default()
    };
    let strat = Scenario {
        n_clients: 480,
        strata: vec![3, 4, 5],
        stratum_yes: Some(vec![0.3, 0.6, 0.8]),
        seed: 5_001,
        ..srs.clone()
    };
    let check = |sc: &Scenario| {
        let rs = run_scenario(sc).unwrap();
        let min_responses = rs.iter().map(|r| r.responses).min().unwrap_or(0);
        (rs.len(), summarize(&rs).coverage, min_responses)
    };
    let (n1, c1, u1) = check(&srs);
    let (n2, c2, u2) = check(&strat);
    Outcome::new(
        n1 == 1000 && n2 == 1000 && c1 >= 0.9 && c2 >= 0.9 && u1 >= 30 && u2 >= 30,
        format!(
            "95% CI coverage: SRS {:.1}% of {n1} windows (min U' {u1}), 3-strata {:.1}% of {n2} windows (min U' {u2}); need >= 90%",
            100.0 * c1,
            100.0 * c2
        ),
    )
}

fn c6_inversion() -> Outcome {
    let base = Scenario {
        n_clients: 10_000,
        yes_fraction: 0.1,
        s: 0.9,
        p: 0.9,
        q: 0.6,
        runs: 100,
        seed: 6_000,
        ..Default::default()
    };
    let native = summarize(&run_seeds(&base).unwrap()).mean_eta;
    let inverted = summarize(&run_seeds(&Scenario { inverted: true, ..base }).unwrap()).mean_eta;
    Outcome::new(
        inverted < native && (0.01..0.10).contains(&native),
        format!(
            "mean loss native {:.3}%, inverted {:.3}% over 100 seeds (need inverted < native, native in [1%, 10%))",
            100.0 * native,
            100.0 * inverted
        ),
    )
}

/// Subsets of `0..n` other than the empty and the full one.
fn proper_subsets(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (1u32..(1 << n) - 1).map(move |mask| (0..n).filter(|i| mask & (1 << i) != 0).collect())
}

fn chi_square(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let e = total as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

fn c7_transport() -> Outcome {
    const MESSAGES: usize = 10_000;
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for i in 0..MESSAGES {
        let n = 2 + i % 7;
        let len = rng.gen_range(1..40);
        let bits = BitVector::from((0..len).map(|_| rng.gen()).collect::<Vec<bool>>());
        let msg = PlainMessage::new(rng.gen(), rng.gen(), rng.gen(), bits);
        let shares = split_encrypt(&msg, n, &mut rng).unwrap();
        if join_decrypt(&shares).ok().as_ref() != Some(&msg) {
            mismatches += 1;
        }
    }

    // Secrecy: a fixed, low-entropy plaintext so any leak shows up in the
    // byte histogram of what a coalition of fewer than n relays sees.
    let fixed = PlainMessage::new(1, 0, 0, BitVector::zeros(11));
    let mut tests = Vec::new();
    for n in 2..=8usize {
        let sets: Vec<Vec<Vec<u8>>> = (0..MESSAGES)
            .map(|_| {
                split_encrypt(&fixed, n, &mut rng)
                    .unwrap()
                    .into_iter()
                    .map(|s| s.body)
                    .collect()
            })
            .collect();
        let width = sets[0][0].len();
        for subset in proper_subsets(n) {
            let mut all = vec![0u64; 256];
            let mut per_pos = vec![vec![0u64; 256]; width];
            for set in &sets {
                let view = xor_join(subset.iter().map(|&i| set[i].as_slice()));
                for (pos, &b) in view.iter().enumerate() {
                    all[b as usize] += 1;
                    per_pos[pos][b as usize] += 1;
                }
            }
            tests.push((n, subset.clone(), "all", chi_square(&all)));
            // single relays only, per byte position
            if subset.len() == 1 {
                for counts in &per_pos {
                    tests.push((n, subset.clone(), "position", chi_square(counts)));
                }
            }
        }
    }
    let alpha = 0.01 / tests.len() as f64;
    let critical = ChiSquared::new(255.0).unwrap().inverse_cdf(1.0 - alpha);
    let rejected: Vec<_> = tests.iter().filter(|t| t.3 > critical).collect();
    let worst = tests.iter().map(|t| t.3).fold(0.0, f64::max);
    Outcome::new(
        mismatches == 0 && rejected.is_empty(),
        format!(
            "{MESSAGES} roundtrips, {mismatches} mismatches; {} chi-square tests over proper share subsets for n = 2..8, \
             largest statistic {worst:.1} vs Bonferroni critical {critical:.1} (family alpha 0.01), {} rejected",
            tests.len(),
            rejected.len()
        ),
    )
}

fn c8_exactness() -> Outcome {
    let sc = Scenario {
        n_clients: 600,
        strata: vec![3, 4, 5],
        stratum_yes: Some(vec![0.2, 0.5, 0.9]),
        s: 1.0,
        p: 1.0,
        q: 0.5,
        epochs: 100,
        seed: 8_000,
        ..Default::default()
    };
    let rs = run_scenario(&sc).unwrap();
    let exact = rs
        .iter()
        .filter(|r| r.estimates == r.truth && r.half_width == 0.0)
        .count();
    Outcome::new(
        rs.len() == 100 && exact == rs.len(),
        format!("{exact} of {} windows bit-exact against the direct oracle", rs.len()),
    )
}

/// Two-sample proportion z-test; true when equality is not rejected at `alpha`.
fn same_proportion(x1: u64, x2: u64, n: u64, alpha: f64) -> (bool, f64) {
    let (p1, p2) = (x1 as f64 / n as f64, x2 as f64 / n as f64);
    let pooled = (x1 + x2) as f64 / (2 * n) as f64;
    let se = (pooled * (1.0 - pooled) * 2.0 / n as f64).sqrt();
    let z = if se > 0.0 { (p1 - p2) / se } else { 0.0 };
    let crit = Normal::new(0.0, 1.0).unwrap().inverse_cdf(1.0 - alpha / 2.0);
    (z.abs() <= crit, z)
}

fn c9_commutation() -> Outcome {
    const DRAWS: u64 = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (s, y) = (0.6, 0.6);
    let coins = RRCoins::new(0.3, 0.6).unwrap();
    let truths: Vec<bool> = (0..DRAWS).map(|_| rng.gen::<f64>() < y).collect();

    // sample then randomize vs randomize then sample: count of sampled yes responses
    let mut pre = 0;
    let mut post = 0;
    for &t in &truths {
        if sampling_coin(s, &mut rng) && randomize_bit(t, &coins, &mut rng) {
            pre += 1;
        }
        let r = randomize_bit(t, &coins, &mut rng);
        if sampling_coin(s, &mut rng) && r {
            post += 1;
        }
    }
    // one stage at s1 * s2 vs two stages at s1 then s2
    let (s1, s2) = (0.8, 0.75);
    let mut one = 0;
    let mut two = 0;
    for &t in &truths {
        if t && sampling_coin(s1 * s2, &mut rng) {
            one += 1;
        }
        if t && sampling_coin(s1, &mut rng) && sampling_coin(s2, &mut rng) {
            two += 1;
        }
    }
    let (ok1, z1) = same_proportion(pre, post, DRAWS, 0.01);
    let (ok2, z2) = same_proportion(one, two, DRAWS, 0.01);
    Outcome::new(
        ok1 && ok2,
        format!("{DRAWS} draws: pre/post-sampling z = {z1:.2}, two-stage decomposition z = {z2:.2} (alpha 0.01)"),
    )
}

/// Expected variance of the de-biased count per client, as a function of q.
/// It is a concave quadratic in q (largest where the overall yes-response
/// rate `y p + (1 - p) q` is 1/2), so over q in (0, 1) the loss is smallest
/// at an end of the range, not near the yes fraction.
fn rr_variance_oracle(y: f64, p: f64, q: f64) -> f64 {
    let yes = p + (1.0 - p) * q;
    let no = (1.0 - p) * q;
    (y * yes * (1.0 - yes) + (1.0 - y) * no * (1.0 - no)) / (p * p)
}

fn strictly_decreasing(curve: &[(f64, f64)]) -> bool {
    curve.windows(2).all(|w| w[1].1 < w[0].1)
}

fn fmt_curve(curve: &[(f64, f64)]) -> String {
    curve
        .iter()
        .map(|(v, e)| format!("{v}:{:.3}%", 100.0 * e))
        .collect::<Vec<_>>()
        .join(" ")
}

fn c10_shapes() -> Outcome {
    let base = Scenario {
        n_clients: 10_000,
        yes_fraction: 0.6,
        runs: 40,
        seed: 10_000,
        ..Default::default()
    };
    // (a) eta decreasing in s
    let s_curve = mean_eta_by_value(&sweep("s", &[0.1, 0.25, 0.5, 1.0], &Scenario { p: 0.3, q: 0.6, ..base.clone() }).unwrap());
    let a = strictly_decreasing(&s_curve);

    // (b) eta minimized near q = yes fraction
    let qs = grid();
    let q_curve =
        mean_eta_by_value(&sweep("q", &qs, &Scenario { s: 0.6, p: 0.3, runs: 100, ..base.clone() }).unwrap());
    let argmin = q_curve.iter().min_by(|x, y| x.1.total_cmp(&y.1)).unwrap().0;
    let b = (argmin - 0.6).abs() <= 0.1 + 1e-9;
    let eta_at = |q: f64| q_curve.iter().find(|(v, _)| (v - q).abs() < 1e-9).unwrap().1;
    let endpoints_beat_middle = eta_at(0.6) > eta_at(0.1).min(eta_at(0.9));
    let oracle_says = rr_variance_oracle(0.6, 0.3, 0.6) > rr_variance_oracle(0.6, 0.3, 0.1).min(rr_variance_oracle(0.6, 0.3, 0.9));

    // (c) eta decreasing in fleet size
    let n_curve = mean_eta_by_value(
        &sweep("n_clients", &[10.0, 100.0, 1000.0, 10_000.0], &Scenario { s: 0.9, p: 0.9, q: 0.6, ..base }).unwrap(),
    );
    let c = strictly_decreasing(&n_curve);

    Outcome {
        pass: a && b && c,
        detail: format!(
            "(a) s: {} [{}]; (b) q: {} argmin {argmin}, yes fraction 0.6 [{}]; (c) n: {} [{}]",
            fmt_curve(&s_curve),
            if a { "pass" } else { "FAIL" },
            fmt_curve(&q_curve),
            if b { "pass" } else { "FAIL" },
            fmt_curve(&n_curve),
            if c { "pass" } else { "FAIL" },
        ),
        documented_failure: a && c && !b && oracle_says && endpoints_beat_middle,
    }
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        (1, "privacy-bound ordering", Duration::from_secs(1), c1_privacy_ordering),
        (2, "budget round-trip", Duration::from_secs(1), c2_budget_roundtrip),
        (3, "estimator unbiasedness", Duration::from_secs(10), c3_unbiased),
        (4, "error additivity", Duration::from_secs(30), c4_additivity),
        (5, "CI coverage", Duration::from_secs(120), c5_coverage),
        (6, "query inversion", Duration::from_secs(30), c6_inversion),
        (7, "transport roundtrip + secrecy", Duration::from_secs(30), c7_transport),
        (8, "exactness collapse", Duration::from_secs(30), c8_exactness),
        (9, "commutation lemmas", Duration::from_secs(30), c9_commutation),
        (10, "utility-shape reproduction", Duration::from_secs(300), c10_shapes),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    if std::env::args().any(|a| a == "--list") {
        for (n, name, ..) in &criteria {
            println!("criterion {n} {name}: test");
        }
        return ExitCode::SUCCESS;
    }
    let mut unexpected = 0;
    let mut documented = 0;
    for (n, name, limit, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let out = run();
        let elapsed = t.elapsed();
        let in_time = elapsed <= limit;
        let pass = out.pass && in_time;
        println!(
            "criterion {n:>2} {name}: {} ({}) [{:.2}s, limit {}s]",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            limit.as_secs()
        );
        if !pass {
            if out.documented_failure && in_time {
                documented += 1;
                println!("             known failure: see the variance oracle in this file");
            } else {
                unexpected += 1;
            }
        }
    }
    println!("acceptance: {unexpected} unexpected failure(s), {documented} known failure(s)");
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
