//! Measures degradation-function accuracy against the rainflow oracle:
//! trains on generated data and reports the share of held-out feasible
//! dispatches predicted within +/-0.01 kWh.
//!
//! Usage: `cargo run --release --example def_accuracy [H] [N_train]`

use epa_core::battery::BatterySpec;
use epa_core::degradation::{degradation_of_dispatch, generate_dataset};
use epa_core::gpdef::{fit, DefHyperParams, FitOptions};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let horizon: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let n_train: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let n_test = 5000;
    let dt = 0.25;
    let spec = BatterySpec::new(500.0);

    let t0 = std::time::Instant::now();
    let train = generate_dataset(&spec, horizon, n_train, dt, 42).unwrap();
    println!("dataset: {} rows in {:.1?}", train.len(), t0.elapsed());

    let t1 = std::time::Instant::now();
    let model = fit(&train, &DefHyperParams::default(), &FitOptions::default()).unwrap();
    println!(
        "fit: {:.1?}  hyper = {:?}  log-marginal = {:.2}  jitter = {:.2e}",
        t1.elapsed(),
        model.hyper,
        model.log_marginal,
        model.jitter
    );

    let test = generate_dataset(&spec, horizon, n_test, dt, 4242).unwrap();
    let mut within = 0usize;
    let mut worst: f64 = 0.0;
    let mut sum_abs = 0.0;
    for row in &test.rows {
        let truth = degradation_of_dispatch(&spec, row, dt).unwrap();
        let pred = model.predict(row).unwrap();
        let err = (pred - truth).abs();
        sum_abs += err;
        worst = worst.max(err);
        if err <= 0.01 {
            within += 1;
        }
    }
    println!(
        "H={horizon} N={n_train}: {:.2}% within 0.01 kWh (mean |err| {:.5}, worst {:.5})",
        100.0 * within as f64 / n_test as f64,
        sum_abs / n_test as f64,
        worst
    );
}
