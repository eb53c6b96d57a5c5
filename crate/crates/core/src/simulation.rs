//! Staggered-adoption Monte Carlo: covariates, multinomial-logit cohort
//! timing, potential outcomes with dynamic effects, the per-replication
//! oracle target, and bias/RMSE/coverage campaigns.
//!
//! Each replication draws from four independent ChaCha streams (covariates,
//! cohort draws, unit effects, idiosyncratic shocks) seeded from
//! `(seed, replication)`, so scenarios that share a seed share every random
//! draw and differ only through the deterministic parts of the design.

use std::fmt;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{fit_horizon, Estimator, EstimatorOptions, HorizonFit};
use crate::inference::{linear_contrast, normal_quantile, post_average_weights, InfluenceArray};
use crate::panel::{build_stack, BaseRule, EntryDate, Panel, Stack};

/// Which features drive the untreated outcome and the cohort timing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Baseline outcome index in `Z`, timing in `Z`.
    A,
    /// Hard outcome index in `H`, timing in `Z`.
    B,
    /// Baseline outcome index in `Z`, timing in `X`.
    C,
    /// Hard outcome index in `H`, timing in `X`.
    D,
}

impl Scenario {
    pub fn hard_outcome(self) -> bool {
        matches!(self, Scenario::B | Scenario::D)
    }

    pub fn timing_on_raw(self) -> bool {
        matches!(self, Scenario::C | Scenario::D)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McDesign {
    pub scenario: Scenario,
    #[serde(rename = "N")]
    pub n_units: usize,
    #[serde(rename = "T")]
    pub n_periods: usize,
    /// First treated cohort; cohorts are `first_cohort .. first_cohort + n_cohorts`.
    pub first_cohort: usize,
    #[serde(rename = "G")]
    pub n_cohorts: usize,
    /// Toeplitz correlation of the latent Gaussian covariates.
    #[serde(rename = "c")]
    pub corr: f64,
    pub xi: f64,
    pub delta: f64,
    #[serde(rename = "R")]
    pub replications: usize,
    pub seed: u64,
    pub horizons: Vec<i64>,
}

impl Default for McDesign {
    fn default() -> Self {
        Self {
            scenario: Scenario::A,
            n_units: 500,
            n_periods: 17,
            first_cohort: 9,
            n_cohorts: 6,
            corr: 0.0,
            xi: 0.9,
            delta: 0.0,
            replications: 200,
            seed: 20_260_417,
            horizons: (0..=6).collect(),
        }
    }
}

impl McDesign {
    pub fn validate(&self) -> Result<()> {
        if !(self.corr.abs() < 1.0) {
            return Err(Error::InvalidDesign(format!(
                "|c| = {} must be below 1",
                self.corr.abs()
            )));
        }
        if self.n_units < 2 || self.replications == 0 {
            return Err(Error::InvalidDesign("need N >= 2 and R >= 1".into()));
        }
        if self.n_cohorts == 0 || self.first_cohort < 2 {
            return Err(Error::InvalidDesign(
                "cohorts must start at period 2 or later".into(),
            ));
        }
        let last = self.first_cohort + self.n_cohorts - 1;
        if last > self.n_periods {
            return Err(Error::InvalidDesign(format!(
                "last cohort {last} exceeds T = {}",
                self.n_periods
            )));
        }
        if self.horizons.iter().all(|&h| h < 0) {
            return Err(Error::InvalidDesign(
                "scoring needs at least one horizon h >= 0".into(),
            ));
        }
        Ok(())
    }

    /// Seed of replication `r`.
    pub fn replication_seed(&self, r: usize) -> u64 {
        splitmix64(self.seed ^ splitmix64(r as u64 + 1))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Latent covariates `X`, their outcome-relevant transforms `Z`, and the
/// hard-design transforms `H`; all `N x 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateDraw {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub h: DMatrix<f64>,
}

/// Centres each column and scales it to unit sample variance (`n - 1`).
pub fn standardize_columns(m: &mut DMatrix<f64>) {
    let n = m.nrows() as f64;
    for mut col in m.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let var = col.norm_squared() / (n - 1.0);
        if var > 0.0 {
            col /= var.sqrt();
        }
    }
}

pub fn draw_covariates<R: Rng>(n: usize, corr: f64, rng: &mut R) -> CovariateDraw {
    let sigma = DMatrix::from_fn(4, 4, |k, j| corr.powi((k as i32 - j as i32).abs()));
    let chol = sigma
        .cholesky()
        .expect("Toeplitz correlation with |c| < 1 is positive definite");
    let l = chol.l();
    let mut x = DMatrix::zeros(n, 4);
    for i in 0..n {
        let e = DVector::from_fn(4, |_, _| StandardNormal.sample(rng));
        x.set_row(i, &(&l * e).transpose());
    }
    let mut z = DMatrix::from_fn(n, 4, |i, j| {
        let (x1, x2, x3, x4) = (x[(i, 0)], x[(i, 1)], x[(i, 2)], x[(i, 3)]);
        match j {
            0 => (0.5 * x1).exp(),
            1 => 10.0 + x2 / (1.0 + x1.exp()),
            2 => (0.6 + x1 * x3 / 25.0).powi(3),
            _ => (20.0 + x2 + x4).powi(2),
        }
    });
    let mut h = DMatrix::from_fn(n, 4, |i, j| {
        let (x1, x2, x3, x4) = (x[(i, 0)], x[(i, 1)], x[(i, 2)], x[(i, 3)]);
        match j {
            0 => (0.5 * x1).exp(),
            1 => x2 * x2,
            2 => x2 * x3,
            _ => (x1 + x4).sin(),
        }
    });
    standardize_columns(&mut z);
    standardize_columns(&mut h);
    CovariateDraw { x, z, h }
}

/// Category probabilities `(cohort 1..G, never)` for one feature row.
pub fn cohort_probabilities(w: &[f64], xi: f64, n_cohorts: usize) -> Vec<f64> {
    let index = -w[0] + 0.5 * w[1] - 0.25 * w[2] - 0.2 * w[3];
    let g = n_cohorts as f64;
    let mut logits: Vec<f64> = (1..=n_cohorts)
        .map(|j| xi * (1.0 - j as f64 / g) * index)
        .collect();
    logits.push(0.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Multinomial draw of entry dates from the features `w` (`N x 4`).
pub fn assign_cohorts<R: Rng>(
    w: &DMatrix<f64>,
    xi: f64,
    n_cohorts: usize,
    first_cohort: usize,
    rng: &mut R,
) -> Vec<EntryDate> {
    (0..w.nrows())
        .map(|i| {
            let row: Vec<f64> = w.row(i).iter().copied().collect();
            let probs = cohort_probabilities(&row, xi, n_cohorts);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut cat = n_cohorts;
            for (j, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    cat = j;
                    break;
                }
            }
            if cat == n_cohorts {
                EntryDate::Never
            } else {
                EntryDate::Period(first_cohort + cat)
            }
        })
        .collect()
}

/// Untreated and treated potential outcomes, observed outcomes and effects,
/// all `N x T` with column `s - 1` holding period `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcomes {
    pub y0: DMatrix<f64>,
    pub y1: DMatrix<f64>,
    pub observed: DMatrix<f64>,
    pub tau: DMatrix<f64>,
}

/// `210 + (t / T)(27.4 w1 + 13.7 (w2 + w3 + w4))`.
pub fn outcome_index(w: &[f64], t: usize, n_periods: usize) -> f64 {
    210.0 + (t as f64 / n_periods as f64) * (27.4 * w[0] + 13.7 * (w[1] + w[2] + w[3]))
}

/// Dynamic effect `max(t - G + 1, 0)(1 + 0.1 x1)`; zero for never-treated.
pub fn treatment_effect(entry: EntryDate, t: usize, x1: f64) -> f64 {
    match entry {
        EntryDate::Period(g) => ((t as f64 - g as f64 + 1.0).max(0.0)) * (1.0 + 0.1 * x1),
        EntryDate::Never => 0.0,
    }
}

pub fn gen_outcomes<R: Rng, S: Rng>(
    design: &McDesign,
    covs: &CovariateDraw,
    first_treat: &[EntryDate],
    alpha_rng: &mut R,
    eps_rng: &mut S,
) -> Outcomes {
    let n = covs.x.nrows();
    let t_max = design.n_periods;
    let w = if design.scenario.hard_outcome() {
        &covs.h
    } else {
        &covs.z
    };
    let alpha: Vec<f64> = first_treat
        .iter()
        .map(|g| {
            let mu = g.period().map_or((t_max + 1) as f64, |p| p as f64);
            let e: f64 = StandardNormal.sample(alpha_rng);
            mu + e
        })
        .collect();
    let mut y0 = DMatrix::zeros(n, t_max);
    let mut tau = DMatrix::zeros(n, t_max);
    for i in 0..n {
        let wi: Vec<f64> = w.row(i).iter().copied().collect();
        let x1 = covs.x[(i, 0)];
        let ever = !first_treat[i].is_never();
        for s in 1..=t_max {
            let drift = if ever {
                design.delta * (s as f64 / t_max as f64) * (1.0 + 0.2 * x1)
            } else {
                0.0
            };
            let e: f64 = StandardNormal.sample(eps_rng);
            y0[(i, s - 1)] = outcome_index(&wi, s, t_max) + s as f64 + alpha[i] + drift + e;
            tau[(i, s - 1)] = treatment_effect(first_treat[i], s, x1);
        }
    }
    let y1 = &y0 + &tau;
    let observed = DMatrix::from_fn(n, t_max, |i, s| {
        if first_treat[i].treated_at(s + 1) {
            y1[(i, s)]
        } else {
            y0[(i, s)]
        }
    });
    Outcomes {
        y0,
        y1,
        observed,
        tau,
    }
}

/// One simulated data set with its latent pieces.
#[derive(Debug, Clone)]
pub struct McReplication {
    pub index: usize,
    pub panel: Panel,
    pub covariates: CovariateDraw,
    pub first_treat: Vec<EntryDate>,
    pub outcomes: Outcomes,
}

pub fn generate_replication(design: &McDesign, r: usize) -> Result<McReplication> {
    design.validate()?;
    let seed = design.replication_seed(r);
    let covs = draw_covariates(design.n_units, design.corr, &mut stream(seed, 0));
    let w = if design.scenario.timing_on_raw() {
        &covs.x
    } else {
        &covs.z
    };
    let first_treat = assign_cohorts(
        w,
        design.xi,
        design.n_cohorts,
        design.first_cohort,
        &mut stream(seed, 1),
    );
    let outcomes = gen_outcomes(
        design,
        &covs,
        &first_treat,
        &mut stream(seed, 2),
        &mut stream(seed, 3),
    );
    let panel = Panel::new(
        outcomes.observed.clone(),
        first_treat.clone(),
        covs.z.clone(),
    )?
    .with_covariate_names(vec!["z1".into(), "z2".into(), "z3".into(), "z4".into()])?;
    Ok(McReplication {
        index: r,
        panel,
        covariates: covs,
        first_treat,
        outcomes,
    })
}

/// Oracle horizon target: mean over the stack's treated entrants of the
/// potential-outcome long-difference gap. The base-operator gap
/// `B(Y(1)) - B(Y(0))` is formed first; it is exactly zero under no
/// anticipation.
pub fn oracle_target(rep: &McReplication, stack: &Stack, rule: &BaseRule) -> Result<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for row in stack.rows.iter().filter(|r| r.treated) {
        let i = row.unit;
        let t = row.entry_date;
        let s = (t as i64 + stack.horizon) as usize;
        let base_gap: f64 = rule
            .pre_periods(t)?
            .iter()
            .map(|&(l, w)| w * rep.outcomes.y1[(i, l - 1)] - w * rep.outcomes.y0[(i, l - 1)])
            .sum();
        sum += (rep.outcomes.y1[(i, s - 1)] - rep.outcomes.y0[(i, s - 1)]) - base_gap;
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyStack {
            horizon: stack.horizon,
        });
    }
    Ok(sum / n as f64)
}

/// Oracle targets for each horizon, on the stacks built with `rule`.
pub fn true_target(rep: &McReplication, horizons: &[i64], rule: &BaseRule) -> Result<Vec<f64>> {
    horizons
        .iter()
        .map(|&h| oracle_target(rep, &build_stack(&rep.panel, h, rule)?, rule))
        .collect()
}

/// Per-replication result of one estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimatorDraw {
    pub estimator: Estimator,
    pub estimate: f64,
    pub se: f64,
    pub truth: f64,
    pub covered: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicationResult {
    pub index: usize,
    pub truth: f64,
    pub draws: Vec<EstimatorDraw>,
    pub failures: Vec<(Estimator, String)>,
}

/// Scores each estimator's average post-treatment effect on one replication.
pub fn score_replication(
    design: &McDesign,
    r: usize,
    estimators: &[Estimator],
    opts: &EstimatorOptions,
    alpha: f64,
) -> Result<ReplicationResult> {
    let rep = generate_replication(design, r)?;
    let rule = BaseRule::last_pre();
    let stacks: Vec<Stack> = design
        .horizons
        .iter()
        .map(|&h| build_stack(&rep.panel, h, &rule))
        .collect::<Result<_>>()?;
    let weights = post_average_weights(&design.horizons);
    let post: Vec<&Stack> = stacks.iter().filter(|s| s.horizon >= 0).collect();
    let truth = post
        .iter()
        .map(|s| oracle_target(&rep, s, &rule))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .sum::<f64>()
        / post.len() as f64;
    let z = normal_quantile(1.0 - alpha / 2.0);
    let mut draws = Vec::new();
    let mut failures = Vec::new();
    for &est in estimators {
        let fits: Result<Vec<HorizonFit>> =
            stacks.iter().map(|s| fit_horizon(s, est, opts)).collect();
        let scored = fits.and_then(|fits| {
            let arr = InfluenceArray::from_fits(&fits, rep.panel.n_clusters());
            linear_contrast(&arr, &weights)
        });
        match scored {
            Ok(c) => draws.push(EstimatorDraw {
                estimator: est,
                estimate: c.estimate,
                se: c.se,
                truth,
                covered: (c.estimate - truth).abs() <= z * c.se,
            }),
            Err(e) => failures.push((est, e.to_string())),
        }
    }
    Ok(ReplicationResult {
        index: r,
        truth,
        draws,
        failures,
    })
}

/// Summary of one estimator across a campaign.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McRow {
    pub scenario: Scenario,
    #[serde(rename = "N")]
    pub n_units: usize,
    pub delta: f64,
    pub estimator: Estimator,
    pub bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub mean_se: f64,
    pub sd_estimate: f64,
    pub replications: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub design: McDesign,
    pub estimators: Vec<Estimator>,
    pub alpha: f64,
    pub rows: Vec<McRow>,
    #[serde(skip)]
    pub runtime_secs: f64,
}

impl McReport {
    pub fn row(&self, estimator: Estimator) -> Option<&McRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }
}

/// Share of failed estimator runs above which a campaign is rejected.
pub const MAX_FAILURE_SHARE: f64 = 0.02;

/// Runs every replication in parallel and summarizes in replication order.
pub fn run_campaign(design: &McDesign, estimators: &[Estimator]) -> Result<McReport> {
    run_campaign_with(design, estimators, &EstimatorOptions::default(), 0.05)
}

pub fn run_campaign_with(
    design: &McDesign,
    estimators: &[Estimator],
    opts: &EstimatorOptions,
    alpha: f64,
) -> Result<McReport> {
    design.validate()?;
    let start = Instant::now();
    let results: Vec<ReplicationResult> = (0..design.replications)
        .into_par_iter()
        .map(|r| score_replication(design, r, estimators, opts, alpha))
        .collect::<Result<_>>()?;
    let attempted = results.len() * estimators.len();
    let failed: usize = results.iter().map(|r| r.failures.len()).sum();
    if failed as f64 > MAX_FAILURE_SHARE * attempted as f64 {
        return Err(Error::CampaignFailed { failed, attempted });
    }
    let rows = estimators
        .iter()
        .map(|&est| {
            let draws: Vec<&EstimatorDraw> = results
                .iter()
                .flat_map(|r| r.draws.iter().filter(move |d| d.estimator == est))
                .collect();
            let n = draws.len() as f64;
            let errs: Vec<f64> = draws.iter().map(|d| d.estimate - d.truth).collect();
            let bias = errs.iter().sum::<f64>() / n;
            let mean_est = draws.iter().map(|d| d.estimate).sum::<f64>() / n;
            McRow {
                scenario: design.scenario,
                n_units: design.n_units,
                delta: design.delta,
                estimator: est,
                bias,
                rmse: (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
                coverage: draws.iter().filter(|d| d.covered).count() as f64 / n,
                mean_se: draws.iter().map(|d| d.se).sum::<f64>() / n,
                sd_estimate: (draws
                    .iter()
                    .map(|d| (d.estimate - mean_est).powi(2))
                    .sum::<f64>()
                    / (n - 1.0).max(1.0))
                .sqrt(),
                replications: draws.len(),
                failures: results.len() - draws.len(),
            }
        })
        .collect();
    Ok(McReport {
        design: design.clone(),
        estimators: estimators.to_vec(),
        alpha,
        rows,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}
