use privapprox::harness::{mean_eta_by_value, results_csv, run_scenario, run_seeds, summarize, sweep, Scenario};

#[test]
fn same_scenario_same_csv() {
    let sc = Scenario::parse("n_clients=2000\nstrata=3:4:5\ns=0.7\np=0.6\nq=0.4\nepochs=5\nseed=123\nloss=0.01\nn_proxies=3\n").unwrap();
    let a = results_csv(&run_scenario(&sc).unwrap());
    let b = results_csv(&run_scenario(&sc).unwrap());
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 6);
}

#[test]
fn wire_bytes_scale_with_sampling() {
    let base = Scenario { n_clients: 10_000, epochs: 3, p: 0.9, q: 0.6, ..Default::default() };
    let bytes = |s: f64| summarize(&run_scenario(&Scenario { s, ..base.clone() }).unwrap()).bytes as f64;
    let full = bytes(1.0);
    let ratio = bytes(0.6) / full;
    assert!((ratio - 0.6).abs() <= 0.05 * 0.6, "ratio {ratio}");
}

#[test]
fn privacy_levels_grow_with_sampling() {
    let base = Scenario { n_clients: 300, p: 0.5, q: 0.5, ..Default::default() };
    let values: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
    let rows = sweep("s", &values, &base).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].eps_zk > w[0].eps_zk);
        assert!(w[1].eps_dp > w[0].eps_dp);
    }
    assert!(rows.iter().all(|r| r.ratio() >= 1.0));
}

#[test]
fn inversion_helps_exactly_when_the_complement_is_closer_to_q() {
    let base = Scenario { n_clients: 5000, s: 0.9, p: 0.9, q: 0.6, runs: 30, seed: 77, ..Default::default() };
    for y in [0.1, 0.2, 0.3, 0.7, 0.8, 0.9] {
        let native = summarize(&run_seeds(&Scenario { yes_fraction: y, ..base.clone() }).unwrap()).mean_eta;
        let inverted = summarize(&run_seeds(&Scenario { yes_fraction: y, inverted: true, ..base.clone() }).unwrap()).mean_eta;
        let complement_closer = (y - 0.6f64).abs() > ((1.0 - y) - 0.6f64).abs();
        assert_eq!(inverted < native, complement_closer, "y {y}: native {native}, inverted {inverted}");
    }
}

#[test]
fn budget_scenarios_derive_sampling() {
    let sc = Scenario::parse("n_clients=500\np=0.5\nq=0.5\nbudget=zk\nepsilon=1.6094379124341003\n").unwrap();
    let r = &run_scenario(&sc).unwrap()[0];
    assert!((r.sampling - 0.5).abs() < 1e-9);
    assert!((r.eps_zk - 5f64.ln()).abs() < 1e-9);
}

#[test]
fn fewer_clients_cost_accuracy() {
    let base = Scenario { s: 0.9, p: 0.9, q: 0.6, runs: 20, seed: 5, ..Default::default() };
    let curve = mean_eta_by_value(&sweep("n_clients", &[50.0, 500.0, 5000.0], &base).unwrap());
    assert!(curve.windows(2).all(|w| w[1].1 < w[0].1), "{curve:?}");
}
