//! Horizon-specific estimator family on a clean-control stack.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregation::{pooled_regression, CellWeighting, PooledFit};
use crate::error::{Error, Result};
use crate::inference::{benchmark_influence, cluster_se, influence, InfluenceArray};
use crate::nuisance::{
    build_basis, fit_ipt, fit_outcome_ols, fit_outcome_wls, odds_summary, odds_weights, Basis,
    CovariateSpec, IptFit, IptOptions, NuisanceDiagnostics, OutcomeFit,
};
use crate::panel::{build_stack, BaseRule, Panel, Stack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Estimator {
    #[serde(rename = "LPDID-RW")]
    LpdidRw,
    #[serde(rename = "LPDID-RW+X")]
    LpdidRwX,
    #[serde(rename = "LPDID-RA")]
    LpdidRa,
    #[serde(rename = "DRLPDID-IPT")]
    DrlpdidIpt,
    #[serde(rename = "DRLPDID")]
    Drlpdid,
}

impl Estimator {
    pub const ALL: [Estimator; 5] = [
        Estimator::LpdidRw,
        Estimator::LpdidRwX,
        Estimator::LpdidRa,
        Estimator::DrlpdidIpt,
        Estimator::Drlpdid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::LpdidRw => "LPDID-RW",
            Estimator::LpdidRwX => "LPDID-RW+X",
            Estimator::LpdidRa => "LPDID-RA",
            Estimator::DrlpdidIpt => "DRLPDID-IPT",
            Estimator::Drlpdid => "DRLPDID",
        }
    }

    /// RA, IPT and DR: estimators built from the nuisance working models.
    pub fn is_semiparametric(self) -> bool {
        matches!(
            self,
            Estimator::LpdidRa | Estimator::DrlpdidIpt | Estimator::Drlpdid
        )
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .collect::<String>()
            .to_uppercase();
        Estimator::ALL
            .into_iter()
            .find(|e| e.name() == norm)
            .ok_or_else(|| format!("unknown estimator `{s}`"))
    }
}

/// Point estimate at one horizon.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonEstimate {
    pub horizon: i64,
    pub estimator: Estimator,
    pub theta: f64,
    pub mu1: f64,
    pub mu0: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub diagnostics: NuisanceDiagnostics,
}

/// Options shared by every estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EstimatorOptions {
    pub covariates: CovariateSpec,
    pub ipt: IptOptions,
    /// Upper bound on control odds weights. Off by default.
    pub odds_cap: Option<f64>,
}

/// Fitted nuisances and estimate for RA, IPT or DR.
#[derive(Debug, Clone)]
pub struct SemiparametricFit {
    pub estimator: Estimator,
    pub basis: Basis,
    pub outcome: Option<OutcomeFit>,
    pub ipt: Option<IptFit>,
    /// Odds weight per stack row (ones when no tilting step is used).
    pub odds: Vec<f64>,
    pub odds_cap: Option<f64>,
    pub estimate: HorizonEstimate,
}

fn diagnostics(
    stack: &Stack,
    basis: &Basis,
    ipt: Option<&IptFit>,
    outcome: Option<&OutcomeFit>,
    odds: Option<&[f64]>,
    cap: Option<f64>,
) -> NuisanceDiagnostics {
    NuisanceDiagnostics {
        basis_columns: basis.names.clone(),
        pruned_columns: basis.pruned.clone(),
        ipt_iterations: ipt.map(|f| f.iterations),
        ipt_residual_norm: ipt.map(|f| f.residual_norm),
        odds_quantiles: odds.and_then(|o| odds_summary(stack, o)),
        outcome_dropped_columns: outcome
            .map(|o| {
                (0..basis.ncols())
                    .filter(|j| !o.active.contains(j))
                    .map(|j| basis.names[j].clone())
                    .collect()
            })
            .unwrap_or_default(),
        odds_cap: cap,
    }
}

fn fitted(basis: &Basis, beta: &DVector<f64>) -> DVector<f64> {
    &basis.matrix * beta
}

/// Regression adjustment: treated mean of `delta - q'b`, with `b` fitted by
/// least squares on the controls.
pub fn fit_ra(stack: &Stack, basis: &Basis) -> Result<SemiparametricFit> {
    let outcome = fit_outcome_ols(stack, basis)?;
    let m = fitted(basis, &outcome.beta);
    let n1 = stack.n_treated();
    if n1 == 0 {
        return Err(Error::EmptyStack {
            horizon: stack.horizon,
        });
    }
    let (mut s1, mut s0) = (0.0, 0.0);
    for (k, r) in stack.rows.iter().enumerate().filter(|(_, r)| r.treated) {
        s1 += r.delta;
        s0 += m[k];
    }
    let (mu1, mu0) = (s1 / n1 as f64, s0 / n1 as f64);
    let estimate = HorizonEstimate {
        horizon: stack.horizon,
        estimator: Estimator::LpdidRa,
        theta: mu1 - mu0,
        mu1,
        mu0,
        n_treated: n1,
        n_control: stack.n_control(),
        diagnostics: diagnostics(stack, basis, None, Some(&outcome), None, None),
    };
    Ok(SemiparametricFit {
        estimator: Estimator::LpdidRa,
        basis: basis.clone(),
        outcome: Some(outcome),
        ipt: None,
        odds: vec![1.0; stack.rows.len()],
        odds_cap: None,
        estimate,
    })
}

/// Treated mean of `resid` minus the odds-weighted control mean of `resid`.
fn weighted_contrast(stack: &Stack, resid: &[f64], odds: &[f64]) -> (f64, f64) {
    let (mut s1, mut n1, mut s0, mut w0) = (0.0, 0.0, 0.0, 0.0);
    for ((r, &e), &o) in stack.rows.iter().zip(resid).zip(odds) {
        if r.treated {
            s1 += e;
            n1 += 1.0;
        } else {
            s0 += o * e;
            w0 += o;
        }
    }
    (s1 / n1, s0 / w0)
}

/// Tilting-weighted contrast with no outcome regression.
pub fn fit_ipt_only(
    stack: &Stack,
    basis: &Basis,
    opts: &EstimatorOptions,
) -> Result<SemiparametricFit> {
    let ipt = fit_ipt(stack, basis, &opts.ipt)?;
    let odds = odds_weights(basis, &ipt.gamma, opts.odds_cap);
    let deltas: Vec<f64> = stack.rows.iter().map(|r| r.delta).collect();
    let (mu1, mu0) = weighted_contrast(stack, &deltas, &odds);
    let estimate = HorizonEstimate {
        horizon: stack.horizon,
        estimator: Estimator::DrlpdidIpt,
        theta: mu1 - mu0,
        mu1,
        mu0,
        n_treated: stack.n_treated(),
        n_control: stack.n_control(),
        diagnostics: diagnostics(stack, basis, Some(&ipt), None, Some(&odds), opts.odds_cap),
    };
    Ok(SemiparametricFit {
        estimator: Estimator::DrlpdidIpt,
        basis: basis.clone(),
        outcome: None,
        ipt: Some(ipt),
        odds,
        odds_cap: opts.odds_cap,
        estimate,
    })
}

/// Doubly robust contrast with tilting odds and an odds-weighted outcome fit.
pub fn fit_dr(stack: &Stack, basis: &Basis, opts: &EstimatorOptions) -> Result<SemiparametricFit> {
    let ipt = fit_ipt(stack, basis, &opts.ipt)?;
    let odds = odds_weights(basis, &ipt.gamma, opts.odds_cap);
    let outcome = fit_outcome_wls(stack, basis, &odds)?;
    let m = fitted(basis, &outcome.beta);
    let resid: Vec<f64> = stack
        .rows
        .iter()
        .enumerate()
        .map(|(k, r)| r.delta - m[k])
        .collect();
    let (mu1, mu0) = weighted_contrast(stack, &resid, &odds);
    let estimate = HorizonEstimate {
        horizon: stack.horizon,
        estimator: Estimator::Drlpdid,
        theta: mu1 - mu0,
        mu1,
        mu0,
        n_treated: stack.n_treated(),
        n_control: stack.n_control(),
        diagnostics: diagnostics(
            stack,
            basis,
            Some(&ipt),
            Some(&outcome),
            Some(&odds),
            opts.odds_cap,
        ),
    };
    Ok(SemiparametricFit {
        estimator: Estimator::Drlpdid,
        basis: basis.clone(),
        outcome: Some(outcome),
        ipt: Some(ipt),
        odds,
        odds_cap: opts.odds_cap,
        estimate,
    })
}

pub fn estimate_ra(stack: &Stack, basis: &Basis) -> Result<HorizonEstimate> {
    fit_ra(stack, basis).map(|f| f.estimate)
}

pub fn estimate_ipt(stack: &Stack, basis: &Basis) -> Result<HorizonEstimate> {
    fit_ipt_only(stack, basis, &EstimatorOptions::default()).map(|f| f.estimate)
}

pub fn estimate_dr(stack: &Stack, basis: &Basis) -> Result<HorizonEstimate> {
    fit_dr(stack, basis, &EstimatorOptions::default()).map(|f| f.estimate)
}

/// RW-weighted pooled regression, optionally with the basis covariates.
pub fn fit_benchmark(stack: &Stack, basis: Option<&Basis>) -> Result<(HorizonEstimate, PooledFit)> {
    let extra = basis.map(Basis::covariate_block).filter(|m| m.ncols() > 0);
    let fit = pooled_regression(stack, &CellWeighting::Rw, extra.as_ref())?;
    let estimator = if basis.is_some() {
        Estimator::LpdidRwX
    } else {
        Estimator::LpdidRw
    };
    let estimate = HorizonEstimate {
        horizon: stack.horizon,
        estimator,
        theta: fit.coefficient,
        mu1: f64::NAN,
        mu0: f64::NAN,
        n_treated: stack.n_treated(),
        n_control: stack.n_control(),
        diagnostics: NuisanceDiagnostics {
            basis_columns: basis.map(|b| b.names.clone()).unwrap_or_default(),
            pruned_columns: basis.map(|b| b.pruned.clone()).unwrap_or_default(),
            ..Default::default()
        },
    };
    Ok((estimate, fit))
}

/// LPDID-RW (`adjusted = false`) or LPDID-RW+X (`adjusted = true`).
pub fn estimate_benchmark(
    stack: &Stack,
    adjusted: bool,
    spec: &CovariateSpec,
) -> Result<HorizonEstimate> {
    let basis = if adjusted {
        Some(build_basis(stack, spec)?)
    } else {
        None
    };
    fit_benchmark(stack, basis.as_ref()).map(|(e, _)| e)
}

/// Estimate plus its per-cluster influence values at one horizon.
#[derive(Debug, Clone)]
pub struct HorizonFit {
    pub estimate: HorizonEstimate,
    /// One value per panel cluster; clusters absent from the stack hold zero.
    pub influence: Vec<f64>,
    pub se: f64,
}

/// Runs one estimator on one stack, including inference.
pub fn fit_horizon(
    stack: &Stack,
    estimator: Estimator,
    opts: &EstimatorOptions,
) -> Result<HorizonFit> {
    let (estimate, influence) = match estimator {
        Estimator::LpdidRw | Estimator::LpdidRwX => {
            let basis = if estimator == Estimator::LpdidRwX {
                Some(build_basis(stack, &opts.covariates)?)
            } else {
                None
            };
            let (est, fit) = fit_benchmark(stack, basis.as_ref())?;
            let inf = benchmark_influence(stack, &fit)?;
            (est, inf)
        }
        _ => {
            let basis = build_basis(stack, &opts.covariates)?;
            let fit = match estimator {
                Estimator::LpdidRa => fit_ra(stack, &basis)?,
                Estimator::DrlpdidIpt => fit_ipt_only(stack, &basis, opts)?,
                _ => fit_dr(stack, &basis, opts)?,
            };
            let inf = influence(stack, &fit)?;
            (fit.estimate, inf)
        }
    };
    let se = cluster_se(&influence, stack.n_clusters)?;
    Ok(HorizonFit {
        estimate,
        influence,
        se,
    })
}

/// Estimates for a set of horizons; failures are kept per horizon.
#[derive(Debug, Clone)]
pub struct EventStudy {
    pub estimator: Estimator,
    pub fits: Vec<HorizonFit>,
    pub failures: Vec<(i64, Error)>,
    pub n_clusters: usize,
}

impl EventStudy {
    pub fn influence_array(&self) -> InfluenceArray {
        InfluenceArray::from_fits(&self.fits, self.n_clusters)
    }

    pub fn estimates(&self) -> Vec<&HorizonEstimate> {
        self.fits.iter().map(|f| &f.estimate).collect()
    }

    pub fn get(&self, h: i64) -> Option<&HorizonFit> {
        self.fits.iter().find(|f| f.estimate.horizon == h)
    }
}

/// Fits every horizon in parallel; each horizon builds its own stack, basis
/// and nuisances.
pub fn event_study(
    panel: &Panel,
    horizons: &[i64],
    rule: &BaseRule,
    estimator: Estimator,
    opts: &EstimatorOptions,
) -> EventStudy {
    let results: Vec<(i64, Result<HorizonFit>)> = horizons
        .par_iter()
        .map(|&h| {
            (
                h,
                build_stack(panel, h, rule).and_then(|s| fit_horizon(&s, estimator, opts)),
            )
        })
        .collect();
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for (h, r) in results {
        match r {
            Ok(f) => fits.push(f),
            Err(e) => {
                log::warn!("{estimator} at horizon {h}: {e}");
                failures.push((h, e));
            }
        }
    }
    EventStudy {
        estimator,
        fits,
        failures,
        n_clusters: panel.n_clusters(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::StackRow;

    fn stack(rows: &[(usize, bool, f64, &[f64])]) -> Stack {
        let k = rows.first().map_or(0, |r| r.3.len());
        let mut dates: Vec<usize> = rows.iter().map(|r| r.0).collect();
        dates.sort();
        dates.dedup();
        Stack {
            horizon: 0,
            rows: rows
                .iter()
                .enumerate()
                .map(|(u, &(t, tr, d, x))| StackRow {
                    unit: u,
                    entry_date: t,
                    treated: tr,
                    delta: d,
                    covariates: x.to_vec(),
                    cluster: u,
                })
                .collect(),
            entry_dates: dates,
            dropped: vec![],
            covariate_names: (1..=k).map(|j| format!("x{j}")).collect(),
            n_clusters: rows.len(),
        }
    }

    fn simple_cell() -> Stack {
        stack(&[
            (3, true, 3.0, &[]),
            (3, true, 5.0, &[]),
            (3, false, 1.0, &[]),
            (3, false, 1.0, &[]),
        ])
    }

    #[test]
    fn single_cell_everything_is_the_contrast() {
        let s = simple_cell();
        let b = build_basis(&s, &CovariateSpec::intercept_only()).unwrap();
        assert!((estimate_ra(&s, &b).unwrap().theta - 3.0).abs() < 1e-12);
        assert!((estimate_ipt(&s, &b).unwrap().theta - 3.0).abs() < 1e-12);
        assert!((estimate_dr(&s, &b).unwrap().theta - 3.0).abs() < 1e-12);
        for adjusted in [false, true] {
            let e = estimate_benchmark(&s, adjusted, &CovariateSpec::default()).unwrap();
            assert!((e.theta - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ra_components() {
        let s = simple_cell();
        let b = build_basis(&s, &CovariateSpec::intercept_only()).unwrap();
        let e = estimate_ra(&s, &b).unwrap();
        assert_eq!((e.mu1, e.n_treated, e.n_control), (4.0, 2, 2));
        assert!((e.mu0 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ra_zero_when_treated_match_fitted_controls() {
        // controls: delta = 2 + x; treated sit on the same line
        let s = stack(&[
            (3, true, 3.0, &[1.0]),
            (3, true, 6.0, &[4.0]),
            (3, false, 2.0, &[0.0]),
            (3, false, 4.0, &[2.0]),
            (3, false, 5.0, &[3.0]),
        ]);
        let b = build_basis(&s, &CovariateSpec::default()).unwrap();
        assert!(estimate_ra(&s, &b).unwrap().theta.abs() < 1e-12);
    }

    #[test]
    fn ipt_weighted_control_mean() {
        // odds (1, 3) arise from tilting on a binary covariate: control rows
        // x = 0 and x = 1 each balance one treated row group.
        let s = stack(&[
            (3, true, 5.0, &[0.0]),
            (3, true, 5.0, &[1.0]),
            (3, true, 5.0, &[1.0]),
            (3, true, 5.0, &[1.0]),
            (3, false, 0.0, &[0.0]),
            (3, false, 4.0, &[1.0]),
        ]);
        let b = build_basis(&s, &CovariateSpec::default()).unwrap();
        let fit = fit_ipt_only(&s, &b, &EstimatorOptions::default()).unwrap();
        assert!((fit.odds[4] - 1.0).abs() < 1e-9 && (fit.odds[5] - 3.0).abs() < 1e-9);
        assert!((fit.estimate.theta - 2.0).abs() < 1e-9);
    }

    #[test]
    fn ipt_and_dr_coincide_under_exact_balance() {
        // weighted residuals vanish against the intercept and the balanced
        // basis means equal the treated means, so both control means agree
        let design = crate::simulation::McDesign {
            n_units: 400,
            ..Default::default()
        };
        let rep = crate::simulation::generate_replication(&design, 5).unwrap();
        for h in [0, 2] {
            let s = build_stack(&rep.panel, h, &BaseRule::last_pre()).unwrap();
            let b = build_basis(&s, &CovariateSpec::default()).unwrap();
            let ipt = estimate_ipt(&s, &b).unwrap();
            let dr = estimate_dr(&s, &b).unwrap();
            let ra = estimate_ra(&s, &b).unwrap();
            assert!((ipt.theta - dr.theta).abs() < 1e-8);
            assert!((ipt.theta - ra.theta).abs() > 1e-6);
        }
    }

    #[test]
    fn estimator_names_round_trip() {
        for e in Estimator::ALL {
            assert_eq!(e.name().parse::<Estimator>().unwrap(), e);
        }
        assert_eq!(
            "lpdid-rw + x".parse::<Estimator>().unwrap(),
            Estimator::LpdidRwX
        );
        assert!("ols".parse::<Estimator>().is_err());
    }
}
