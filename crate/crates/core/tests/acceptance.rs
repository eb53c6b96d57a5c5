//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;

use drlpdid::aggregation::{
    aggregate, cell_stats, pooled_lpdid_coefficient, rw_weights, vw_weights, CellWeighting,
};
use drlpdid::estimators::{fit_dr, fit_ipt_only, fit_ra, SemiparametricFit};
use drlpdid::inference::{
    influence, multiplier_bootstrap, InfluenceArray, MomentSystem, Multiplier,
};
use drlpdid::nuisance::{build_basis, fit_ipt, ipt_moments, CovariateSpec, IptOptions};
use drlpdid::panel::build_stack;
use drlpdid::simulation::{
    generate_replication, run_campaign, true_target, McDesign, McReport, Scenario,
};
use drlpdid::{BaseRule, EntryDate, Estimator, EstimatorOptions, Panel, Stack};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new() -> Self {
        Self {
            pass: true,
            detail: String::new(),
        }
    }

    fn check(&mut self, ok: bool, what: String) {
        self.pass &= ok;
        if !self.detail.is_empty() {
            self.detail.push_str("; ");
        }
        self.detail.push_str(&what);
        if !ok {
            self.detail.push_str(" [miss]");
        }
    }
}

fn random_panel(rng: &mut ChaCha8Rng) -> Panel {
    let n = rng.random_range(8..=50);
    let t = rng.random_range(4..=10);
    let first: Vec<EntryDate> = (0..n)
        .map(|_| {
            let g = rng.random_range(1..=t + 1);
            if g == 1 || g > t {
                EntryDate::Never
            } else {
                EntryDate::Period(g)
            }
        })
        .collect();
    let y = DMatrix::from_fn(n, t, |_, _| rng.sample::<f64, _>(StandardNormal) * 3.0);
    let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    Panel::new(y, first, x).unwrap()
}

/// Random stacks with at least one cell.
fn random_stacks(count: usize, seed: u64) -> Vec<Stack> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < count {
        let panel = random_panel(&mut rng);
        let h = rng.random_range(-1..=2);
        if let Ok(s) = build_stack(&panel, h, &BaseRule::last_pre()) {
            if !s.entry_dates.is_empty() {
                out.push(s);
            }
        }
    }
    out
}

/// Stacks from simulated replications across scenarios and horizons.
fn simulated_stacks(count: usize, n_units: usize) -> Vec<Stack> {
    let scenarios = [Scenario::A, Scenario::B, Scenario::C, Scenario::D];
    (0..count)
        .map(|k| {
            let design = McDesign {
                scenario: scenarios[k % 4],
                n_units,
                seed: 900 + k as u64,
                ..Default::default()
            };
            let rep = generate_replication(&design, k).unwrap();
            build_stack(&rep.panel, (k % 7) as i64, &BaseRule::last_pre()).unwrap()
        })
        .collect()
}

fn criterion_1() -> Outcome {
    let mut o = Outcome::new();
    let (mut vw_gap, mut rw_gap): (f64, f64) = (0.0, 0.0);
    for s in random_stacks(100, 1) {
        let cells = cell_stats(&s);
        let vw = aggregate(&cells, &vw_weights(&cells).unwrap()).unwrap();
        let rw = aggregate(&cells, &rw_weights(&cells).unwrap()).unwrap();
        vw_gap = vw_gap
            .max((vw - pooled_lpdid_coefficient(&s, &CellWeighting::Unweighted).unwrap()).abs());
        rw_gap = rw_gap.max((rw - pooled_lpdid_coefficient(&s, &CellWeighting::Rw).unwrap()).abs());
    }
    o.check(
        vw_gap <= 1e-10,
        format!("VW closed form vs OLS max gap {vw_gap:.1e}"),
    );
    o.check(
        rw_gap <= 1e-10,
        format!("RW closed form vs WLS max gap {rw_gap:.1e}"),
    );
    o
}

fn criterion_2() -> Outcome {
    let mut o = Outcome::new();
    let (mut moment, mut denom): (f64, f64) = (0.0, 0.0);
    let mut fits = 0;
    let stacks = simulated_stacks(28, 500)
        .into_iter()
        .chain(random_stacks(60, 2));
    for s in stacks {
        let Ok(basis) = build_basis(&s, &CovariateSpec::default()) else {
            continue;
        };
        let Ok(fit) = fit_ipt(&s, &basis, &IptOptions::default()) else {
            continue;
        };
        fits += 1;
        moment = moment.max(ipt_moments(&s, &basis, &fit.gamma).amax());
        let odds: f64 = s
            .rows
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.treated)
            .map(|(k, _)| basis.row(k).dot(&fit.gamma).exp())
            .sum();
        denom = denom.max((odds - s.n_treated() as f64).abs());
    }
    o.check(fits >= 50, format!("{fits} converged fits"));
    o.check(moment <= 1e-8, format!("max moment residual {moment:.1e}"));
    o.check(denom <= 1e-8, format!("max denominator gap {denom:.1e}"));
    o
}

fn criterion_3() -> Outcome {
    let mut o = Outcome::new();
    let opts = EstimatorOptions::default();
    let mut gap: f64 = 0.0;
    for s in random_stacks(50, 3)
        .into_iter()
        .chain(simulated_stacks(8, 300))
    {
        let mean = |treated: bool| {
            let v: Vec<f64> = s
                .rows
                .iter()
                .filter(|r| r.treated == treated)
                .map(|r| r.delta)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let did = mean(true) - mean(false);
        let basis = build_basis(&s, &CovariateSpec::intercept_only()).unwrap();
        for fit in [
            fit_ra(&s, &basis),
            fit_ipt_only(&s, &basis, &opts),
            fit_dr(&s, &basis, &opts),
        ] {
            gap = gap.max((fit.unwrap().estimate.theta - did).abs());
        }
    }
    o.check(
        gap <= 1e-10,
        format!("intercept-only RA/IPT/DR vs stack DiD max gap {gap:.1e}"),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut linear_gap: f64 = 0.0;
    for mut s in simulated_stacks(8, 300) {
        let basis = build_basis(&s, &CovariateSpec::default()).unwrap();
        let b = DVector::from_fn(basis.ncols(), |_, _| rng.sample::<f64, _>(StandardNormal));
        for (k, r) in s.rows.iter_mut().enumerate() {
            if !r.treated {
                r.delta = basis.row(k).dot(&b);
            }
        }
        let ra = fit_ra(&s, &basis).unwrap().estimate.theta;
        let dr = fit_dr(&s, &basis, &opts).unwrap().estimate.theta;
        linear_gap = linear_gap.max((ra - dr).abs());
    }
    o.check(
        linear_gap <= 1e-10,
        format!("DR vs RA with linear control outcomes max gap {linear_gap:.1e}"),
    );
    o
}

fn semiparametric_fits(s: &Stack) -> Vec<SemiparametricFit> {
    let opts = EstimatorOptions::default();
    let basis = build_basis(s, &CovariateSpec::default()).unwrap();
    vec![
        fit_ra(s, &basis).unwrap(),
        fit_ipt_only(s, &basis, &opts).unwrap(),
        fit_dr(s, &basis, &opts).unwrap(),
    ]
}

fn criterion_4() -> Outcome {
    let mut o = Outcome::new();
    let (mut if_sum, mut jac_rel): (f64, f64) = (0.0, 0.0);
    for s in simulated_stacks(20, 200) {
        for fit in semiparametric_fits(&s) {
            let inf = influence(&s, &fit).unwrap();
            if_sum = if_sum.max(inf.iter().sum::<f64>().abs());
            let system = MomentSystem::new(&s, &fit);
            let eta = system.params(&fit);
            let a = system.jacobian(&eta);
            let num = system.numeric_jacobian(&eta, 1e-6);
            jac_rel = jac_rel.max((&a - &num).amax() / a.amax().max(1.0));
        }
    }
    o.check(if_sum <= 1e-8, format!("max |sum IF| {if_sum:.1e}"));
    o.check(
        jac_rel <= 1e-5,
        format!("analytic vs numeric Jacobian max rel gap {jac_rel:.1e}"),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let values = DMatrix::from_fn(400, 1, |_, _| rng.sample::<f64, _>(StandardNormal));
    let array = InfluenceArray::new(vec![0], vec![0.0], values).unwrap();
    let band = multiplier_bootstrap(&array, 20_000, Multiplier::Rademacher, 0.05, 4).unwrap();
    o.check(
        (band.c_star - 1.96).abs() <= 0.05,
        format!("single-horizon c* {:.3}", band.c_star),
    );
    o
}

fn criterion_5() -> Outcome {
    let mut o = Outcome::new();
    let horizons: Vec<i64> = (0..=6).collect();
    let mut equal = 0;
    let total = 20;
    for r in 0..total {
        let scenario = [Scenario::A, Scenario::B, Scenario::C, Scenario::D][r % 4];
        let rep = generate_replication(
            &McDesign {
                scenario,
                ..Default::default()
            },
            r,
        )
        .unwrap();
        let last = true_target(&rep, &horizons, &BaseRule::last_pre()).unwrap();
        let avg = true_target(&rep, &horizons, &BaseRule::mean_of_last(2).unwrap()).unwrap();
        equal += usize::from(last == avg);
    }
    o.check(
        equal == total,
        format!("{equal}/{total} replications with bitwise-equal oracles"),
    );
    o
}

fn campaign(scenario: Scenario, n_units: usize, delta: f64) -> McReport {
    let design = McDesign {
        scenario,
        n_units,
        delta,
        replications: 200,
        ..Default::default()
    };
    run_campaign(&design, &Estimator::ALL).expect("campaign")
}

fn bias(r: &McReport, e: Estimator) -> f64 {
    r.row(e).unwrap().bias
}

fn coverage(r: &McReport, e: Estimator) -> f64 {
    r.row(e).unwrap().coverage
}

fn scenario_a_checks(o: &mut Outcome, a: &McReport) {
    use Estimator::*;
    let dr = bias(a, Drlpdid);
    let ra = bias(a, LpdidRa);
    o.check(dr.abs() < 0.05, format!("A DRLPDID bias {dr:.3}"));
    o.check(ra.abs() < 0.05, format!("A LPDID-RA bias {ra:.3}"));
    let c = coverage(a, Drlpdid);
    o.check(
        (0.90..=0.98).contains(&c),
        format!("A DRLPDID coverage {c:.3}"),
    );
    let rw = bias(a, LpdidRw);
    o.check(rw < -2.0, format!("A LPDID-RW bias {rw:.3}"));
    let ipt = bias(a, DrlpdidIpt);
    o.check(
        (-0.30..=-0.10).contains(&ipt),
        format!("A DRLPDID-IPT bias {ipt:.3}"),
    );
    let ci = coverage(a, DrlpdidIpt);
    o.check(ci < 0.75, format!("A DRLPDID-IPT coverage {ci:.3}"));
}

fn criterion_6(a: &McReport) -> Outcome {
    use Estimator::*;
    let mut o = Outcome::new();
    scenario_a_checks(&mut o, a);
    let c = campaign(Scenario::C, 500, 0.0);
    let (b_c, cov_c) = (bias(&c, Drlpdid), coverage(&c, Drlpdid));
    o.check(b_c.abs() < 0.05, format!("C DRLPDID bias {b_c:.3}"));
    o.check(
        (0.90..=0.99).contains(&cov_c),
        format!("C DRLPDID coverage {cov_c:.3}"),
    );
    let b = campaign(Scenario::B, 500, 0.0);
    let b_b = bias(&b, Drlpdid);
    o.check(b_b.abs() < 0.15, format!("B DRLPDID bias {b_b:.3}"));
    let d = campaign(Scenario::D, 500, 0.0);
    let rw_d = bias(&d, LpdidRw);
    o.check(rw_d < -3.0, format!("D LPDID-RW bias {rw_d:.3}"));
    o
}

fn criterion_7(a: &McReport) -> Outcome {
    use Estimator::*;
    let mut o = Outcome::new();
    let r = campaign(Scenario::A, 500, 1.0);
    let ra = bias(&r, LpdidRa);
    o.check(
        (0.12..=0.27).contains(&ra),
        format!("delta=1 LPDID-RA bias {ra:.3}"),
    );
    let cov = coverage(&r, LpdidRa);
    o.check(cov < 0.5, format!("delta=1 LPDID-RA coverage {cov:.3}"));
    let ipt = bias(&r, DrlpdidIpt);
    o.check(
        ipt.abs() < 0.12,
        format!("delta=1 DRLPDID-IPT bias {ipt:.3}"),
    );
    let mut zero = Outcome::new();
    scenario_a_checks(&mut zero, a);
    o.check(zero.pass, "delta=0 Scenario-A checks".to_string());
    o
}

fn criterion_8() -> Outcome {
    let mut o = Outcome::new();
    let r = campaign(Scenario::A, 250, 0.0);
    let b = bias(&r, Estimator::Drlpdid);
    let c = coverage(&r, Estimator::Drlpdid);
    o.check(b.abs() < 0.07, format!("N=250 DRLPDID bias {b:.3}"));
    o.check(
        (0.89..=0.99).contains(&c),
        format!("N=250 DRLPDID coverage {c:.3}"),
    );
    o
}

fn criterion_9() -> Outcome {
    let mut o = Outcome::new();
    let design = McDesign {
        scenario: Scenario::D,
        replications: 24,
        seed: 77,
        ..Default::default()
    };
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        let report = pool.install(|| run_campaign(&design, &Estimator::ALL).unwrap());
        serde_json::to_vec_pretty(&report).unwrap()
    };
    let one = run(1);
    let again = run(1);
    let many = run(4);
    o.check(one == again, "repeat run byte-identical".to_string());
    o.check(one == many, "1 vs 4 threads byte-identical".to_string());
    o
}

fn main() -> ExitCode {
    let report = |k: usize, o: &Outcome| {
        println!(
            "criterion {k}: {} - {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        o.pass
    };
    let mut all = true;
    all &= report(1, &criterion_1());
    all &= report(2, &criterion_2());
    all &= report(3, &criterion_3());
    all &= report(4, &criterion_4());
    all &= report(5, &criterion_5());
    let a = campaign(Scenario::A, 500, 0.0);
    all &= report(6, &criterion_6(&a));
    all &= report(7, &criterion_7(&a));
    all &= report(8, &criterion_8());
    all &= report(9, &criterion_9());
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
