//! Cohort cells, variance-weighted and RW aggregation, and the pooled
//! LP-DiD regression with entry-date intercepts.
//!
//! The closed-form aggregations here and the pooled least-squares fit are
//! computed along separate routes; their agreement is checked in tests.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::weighted_least_squares;
use crate::panel::Stack;

/// Summary of one entry-date cell of a stack.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellStats {
    pub cohort: usize,
    pub horizon: i64,
    pub n_treated: usize,
    pub n_controls: usize,
    pub n_total: usize,
    pub treated_share: f64,
    pub did_contrast: f64,
}

impl CellStats {
    /// `N n (1 - n)`, the cell's share of the residualized treatment variance.
    pub fn variance_mass(&self) -> f64 {
        self.n_total as f64 * self.treated_share * (1.0 - self.treated_share)
    }

    /// RW cell weight `1 / (1 - n)`.
    pub fn rw_lambda(&self) -> f64 {
        1.0 / (1.0 - self.treated_share)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightScheme {
    Vw,
    Rw,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggWeights {
    pub cohorts: Vec<usize>,
    pub weights: Vec<f64>,
    pub scheme: WeightScheme,
}

/// One `CellStats` per entry date; `did_contrast` uses unweighted cell means.
pub fn cell_stats(stack: &Stack) -> Vec<CellStats> {
    stack
        .cells()
        .into_iter()
        .filter_map(|(t, idx)| {
            let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
            for &k in &idx {
                let r = &stack.rows[k];
                if r.treated {
                    s1 += r.delta;
                    n1 += 1;
                } else {
                    s0 += r.delta;
                    n0 += 1;
                }
            }
            if n1 == 0 || n0 == 0 {
                return None;
            }
            Some(CellStats {
                cohort: t,
                horizon: stack.horizon,
                n_treated: n1,
                n_controls: n0,
                n_total: n1 + n0,
                treated_share: n1 as f64 / (n1 + n0) as f64,
                did_contrast: s1 / n1 as f64 - s0 / n0 as f64,
            })
        })
        .collect()
}

fn normalize(cells: &[CellStats], raw: Vec<f64>, scheme: WeightScheme) -> Result<AggWeights> {
    let total: f64 = raw.iter().sum();
    if cells.is_empty() || !(total > 0.0) || !total.is_finite() {
        return Err(Error::NoRetainedCells);
    }
    Ok(AggWeights {
        cohorts: cells.iter().map(|c| c.cohort).collect(),
        weights: raw.into_iter().map(|w| w / total).collect(),
        scheme,
    })
}

/// Implicit weights of the unweighted pooled regression, `∝ N n (1 - n)`.
pub fn vw_weights(cells: &[CellStats]) -> Result<AggWeights> {
    normalize(
        cells,
        cells.iter().map(CellStats::variance_mass).collect(),
        WeightScheme::Vw,
    )
}

/// Treated-entry weights `N_g / sum N_g'`.
pub fn rw_weights(cells: &[CellStats]) -> Result<AggWeights> {
    normalize(
        cells,
        cells.iter().map(|c| c.n_treated as f64).collect(),
        WeightScheme::Rw,
    )
}

/// Aggregation weights implied by cell-constant regression weights `lambda`.
pub fn lambda_weights(cells: &[CellStats], lambda: &[f64]) -> Result<AggWeights> {
    if lambda.len() != cells.len() {
        return Err(Error::AlignmentError(format!(
            "{} cell weights for {} cells",
            lambda.len(),
            cells.len()
        )));
    }
    if lambda.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::AlignmentError(
            "cell weights must be strictly positive".into(),
        ));
    }
    normalize(
        cells,
        cells
            .iter()
            .zip(lambda)
            .map(|(c, l)| l * c.variance_mass())
            .collect(),
        WeightScheme::Custom,
    )
}

/// `sum_g w_g delta_g`.
pub fn aggregate(cells: &[CellStats], weights: &AggWeights) -> Result<f64> {
    if cells.len() != weights.cohorts.len()
        || cells
            .iter()
            .zip(&weights.cohorts)
            .any(|(c, &g)| c.cohort != g)
    {
        return Err(Error::AlignmentError(
            "weights and cells list different cohorts".into(),
        ));
    }
    Ok(cells
        .iter()
        .zip(&weights.weights)
        .map(|(c, w)| w * c.did_contrast)
        .sum())
}

/// Observation weighting for the pooled regression.
#[derive(Debug, Clone, PartialEq)]
pub enum CellWeighting {
    /// Ordinary least squares.
    Unweighted,
    /// `lambda = 1 / (1 - n)` per cell.
    Rw,
    /// One positive weight per entry date, in `stack.entry_dates` order.
    Custom(Vec<f64>),
}

/// A fitted pooled regression `delta ~ D + entry-date intercepts [+ extra]`.
#[derive(Debug, Clone)]
pub struct PooledFit {
    /// Coefficient on the entry indicator.
    pub coefficient: f64,
    pub beta: DVector<f64>,
    pub design: DMatrix<f64>,
    pub weights: DVector<f64>,
    pub residuals: DVector<f64>,
}

/// Per-row observation weights for a weighting scheme.
pub fn row_weights(stack: &Stack, weighting: &CellWeighting) -> Result<DVector<f64>> {
    let mut w = DVector::from_element(stack.rows.len(), 1.0);
    let lambda: Vec<f64> = match weighting {
        CellWeighting::Unweighted => return Ok(w),
        CellWeighting::Rw => {
            let cells = cell_stats(stack);
            if cells.len() != stack.entry_dates.len() {
                return Err(Error::AlignmentError(
                    "cell without treatment variation".into(),
                ));
            }
            cells.iter().map(CellStats::rw_lambda).collect()
        }
        CellWeighting::Custom(l) => {
            if l.len() != stack.entry_dates.len() {
                return Err(Error::AlignmentError(format!(
                    "{} cell weights for {} entry dates",
                    l.len(),
                    stack.entry_dates.len()
                )));
            }
            if l.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::AlignmentError(
                    "cell weights must be strictly positive".into(),
                ));
            }
            l.clone()
        }
    };
    for (pos, (_, idx)) in stack.cells().into_iter().enumerate() {
        for k in idx {
            w[k] = lambda[pos];
        }
    }
    Ok(w)
}

/// Weighted least squares of the long difference on the entry indicator,
/// one intercept per entry date and optional extra regressors.
pub fn pooled_regression(
    stack: &Stack,
    weighting: &CellWeighting,
    extra: Option<&DMatrix<f64>>,
) -> Result<PooledFit> {
    let n = stack.rows.len();
    let n_dates = stack.entry_dates.len();
    let n_extra = extra.map_or(0, |m| m.ncols());
    if let Some(m) = extra {
        if m.nrows() != n {
            return Err(Error::AlignmentError(
                "extra regressors misaligned with stack".into(),
            ));
        }
    }
    let mut x = DMatrix::zeros(n, 1 + n_dates + n_extra);
    for (k, r) in stack.rows.iter().enumerate() {
        x[(k, 0)] = if r.treated { 1.0 } else { 0.0 };
        let pos = stack
            .entry_dates
            .iter()
            .position(|&t| t == r.entry_date)
            .expect("row entry date listed in stack");
        x[(k, 1 + pos)] = 1.0;
        if let Some(m) = extra {
            for j in 0..n_extra {
                x[(k, 1 + n_dates + j)] = m[(k, j)];
            }
        }
    }
    let y = DVector::from_iterator(n, stack.rows.iter().map(|r| r.delta));
    let w = row_weights(stack, weighting)?;
    let beta = weighted_least_squares(&x, &y, Some(&w))?;
    let residuals = &y - &x * &beta;
    Ok(PooledFit {
        coefficient: beta[0],
        beta,
        design: x,
        weights: w,
        residuals,
    })
}

/// Coefficient on `D` in the pooled LP-DiD regression.
pub fn pooled_lpdid_coefficient(stack: &Stack, weighting: &CellWeighting) -> Result<f64> {
    pooled_regression(stack, weighting, None).map(|f| f.coefficient)
}

/// One row of the weight diagnostics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightRow {
    pub cohort: usize,
    pub h: i64,
    pub n_treated: usize,
    pub treated_share: f64,
    pub w_vw: f64,
    pub w_rw: f64,
}

pub fn weight_table(cells: &[CellStats]) -> Result<Vec<WeightRow>> {
    let vw = vw_weights(cells)?;
    let rw = rw_weights(cells)?;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(k, c)| WeightRow {
            cohort: c.cohort,
            h: c.horizon,
            n_treated: c.n_treated,
            treated_share: c.treated_share,
            w_vw: vw.weights[k],
            w_rw: rw.weights[k],
        })
        .collect())
}
