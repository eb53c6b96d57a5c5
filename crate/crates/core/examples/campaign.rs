//! Runs one Monte Carlo campaign and prints its summary table.
//!
//! `cargo run --release -p drlpdid --example campaign -- A 500 0.0 200 6`
//!
//! Arguments: scenario, N, delta, replications, largest scoring horizon.

use drlpdid::simulation::{run_campaign, McDesign, Scenario};
use drlpdid::Estimator;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let scenario = match args.first().map(String::as_str) {
        Some("B") => Scenario::B,
        Some("C") => Scenario::C,
        Some("D") => Scenario::D,
        _ => Scenario::A,
    };
    let parse = |i: usize| args.get(i).and_then(|s| s.parse::<f64>().ok());
    let design = McDesign {
        scenario,
        n_units: parse(1).map_or(500, |v| v as usize),
        delta: parse(2).unwrap_or(0.0),
        replications: parse(3).map_or(200, |v| v as usize),
        horizons: (0..=parse(4).map_or(6, |v| v as i64)).collect(),
        ..Default::default()
    };
    let report = run_campaign(&design, &Estimator::ALL).expect("campaign failed");
    println!(
        "scenario {} N={} delta={} R={}",
        scenario, design.n_units, design.delta, design.replications
    );
    println!(
        "{:<12} {:>9} {:>9} {:>9} {:>9} {:>9} {:>5}",
        "estimator", "bias", "rmse", "coverage", "mean_se", "sd", "fail"
    );
    for r in &report.rows {
        println!(
            "{:<12} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>9.3} {:>5}",
            r.estimator.name(),
            r.bias,
            r.rmse,
            r.coverage,
            r.mean_se,
            r.sd_estimate,
            r.failures
        );
    }
    println!("runtime {:.2}s", report.runtime_secs);
}
