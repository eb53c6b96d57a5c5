//! Shared horizon basis and the two nuisance working models: the
//! inverse-probability-tilting propensity fit and the (odds-weighted)
//! untreated-outcome regression.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{independent_columns, max_abs, weighted_least_squares, RANK_TOL};
use crate::panel::Stack;

/// Which columns enter the horizon basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CovariateSpec {
    /// Indices into the stack's covariate columns; `None` selects all.
    pub columns: Option<Vec<usize>>,
    /// Entry-date indicator columns (reference date dropped).
    pub date_controls: bool,
    /// Covariate x entry-date indicator interactions.
    pub interactions: bool,
}

impl Default for CovariateSpec {
    fn default() -> Self {
        Self {
            columns: None,
            date_controls: true,
            interactions: false,
        }
    }
}

impl CovariateSpec {
    pub fn intercept_only() -> Self {
        Self {
            columns: Some(vec![]),
            date_controls: false,
            interactions: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ColumnKind {
    Intercept,
    Covariate,
    EntryDate,
    Interaction,
}

/// Design matrix `Q` with one row per stack row.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    pub matrix: DMatrix<f64>,
    pub names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    /// Columns removed while building, with the reason.
    pub pruned: Vec<String>,
}

impl Basis {
    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn row(&self, k: usize) -> DVector<f64> {
        self.matrix.row(k).transpose()
    }

    /// Covariate and interaction columns: everything except the intercept
    /// and entry-date indicators.
    pub fn covariate_block(&self) -> DMatrix<f64> {
        let cols: Vec<usize> = (0..self.ncols())
            .filter(|&j| {
                matches!(
                    self.kinds[j],
                    ColumnKind::Covariate | ColumnKind::Interaction
                )
            })
            .collect();
        self.matrix.select_columns(&cols)
    }
}

fn control_rows(stack: &Stack) -> Vec<usize> {
    (0..stack.rows.len())
        .filter(|&k| !stack.rows[k].treated)
        .collect()
}

/// Intercept, selected covariates and entry-date indicators, pruned to full
/// column rank on the stack and on its control rows.
pub fn build_basis(stack: &Stack, spec: &CovariateSpec) -> Result<Basis> {
    let n = stack.rows.len();
    if n == 0 {
        return Err(Error::DegenerateBasis);
    }
    let k = stack.n_covariates();
    let selected: Vec<usize> = match &spec.columns {
        None => (0..k).collect(),
        Some(cols) => {
            if let Some(&bad) = cols.iter().find(|&&c| c >= k) {
                return Err(Error::AlignmentError(format!(
                    "covariate column {bad} out of range"
                )));
            }
            cols.clone()
        }
    };
    let dates: Vec<usize> = if spec.date_controls {
        stack.entry_dates.iter().skip(1).copied().collect()
    } else {
        vec![]
    };

    let mut names = vec!["intercept".to_string()];
    let mut kinds = vec![ColumnKind::Intercept];
    let mut cols: Vec<Vec<f64>> = vec![vec![1.0; n]];
    for &j in &selected {
        kinds.push(ColumnKind::Covariate);
        names.push(
            stack
                .covariate_names
                .get(j)
                .cloned()
                .unwrap_or_else(|| format!("x{}", j + 1)),
        );
        cols.push(stack.rows.iter().map(|r| r.covariates[j]).collect());
    }
    for &t in &dates {
        kinds.push(ColumnKind::EntryDate);
        names.push(format!("date_{t}"));
        cols.push(
            stack
                .rows
                .iter()
                .map(|r| f64::from(u8::from(r.entry_date == t)))
                .collect(),
        );
    }
    if spec.interactions {
        for &t in &dates {
            for &j in &selected {
                kinds.push(ColumnKind::Interaction);
                names.push(format!("{}:date_{t}", stack.covariate_names[j]));
                cols.push(
                    stack
                        .rows
                        .iter()
                        .map(|r| {
                            if r.entry_date == t {
                                r.covariates[j]
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                );
            }
        }
    }

    let mut pruned = Vec::new();
    let mut keep: Vec<usize> = vec![0];
    for (c, col) in cols.iter().enumerate().skip(1) {
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            log::info!("basis column {} is constant on the stack; pruned", names[c]);
            pruned.push(format!("{} (constant)", names[c]));
        } else {
            keep.push(c);
        }
    }
    let full = DMatrix::from_fn(n, keep.len(), |i, j| cols[keep[j]][i]);
    let indep = independent_columns(&full, RANK_TOL);
    for (pos, &c) in keep.iter().enumerate() {
        if !indep.contains(&pos) {
            pruned.push(format!("{} (collinear)", names[c]));
        }
    }
    let keep: Vec<usize> = indep.iter().map(|&p| keep[p]).collect();

    // both nuisance fits need full rank on the control rows
    let ctrl = control_rows(stack);
    let ctrl_mat = DMatrix::from_fn(ctrl.len(), keep.len(), |i, j| cols[keep[j]][ctrl[i]]);
    let ctrl_indep = independent_columns(&ctrl_mat, RANK_TOL);
    for (pos, &c) in keep.iter().enumerate() {
        if !ctrl_indep.contains(&pos) {
            pruned.push(format!("{} (collinear on controls)", names[c]));
        }
    }
    let keep: Vec<usize> = ctrl_indep.iter().map(|&p| keep[p]).collect();
    if keep.is_empty() {
        return Err(Error::DegenerateBasis);
    }
    for note in &pruned {
        log::warn!("horizon {}: basis column {note} removed", stack.horizon);
    }
    Ok(Basis {
        matrix: DMatrix::from_fn(n, keep.len(), |i, j| cols[keep[j]][i]),
        names: keep.iter().map(|&c| names[c].clone()).collect(),
        kinds: keep.iter().map(|&c| kinds[c]).collect(),
        pruned,
    })
}

/// Solver settings for the tilting step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IptOptions {
    /// Convergence threshold on the infinity norm of the summed moments.
    pub tol: f64,
    pub max_iter: usize,
    /// Abort when any control odds weight exceeds this value.
    pub separation_odds: f64,
}

impl Default for IptOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 100,
            separation_odds: 1e8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IptFit {
    pub gamma: DVector<f64>,
    pub iterations: usize,
    /// Infinity norm of the summed tilting moments at `gamma`.
    pub residual_norm: f64,
    /// Objective value after each accepted iterate, starting at `gamma = 0`.
    pub objective_path: Vec<f64>,
}

/// Tilting objective `sum D q'g - (1 - D) exp(q'g)`.
pub fn ipt_objective(stack: &Stack, basis: &Basis, gamma: &DVector<f64>) -> f64 {
    let eta = &basis.matrix * gamma;
    stack
        .rows
        .iter()
        .zip(eta.iter())
        .map(|(r, &e)| if r.treated { e } else { -e.exp() })
        .sum()
}

/// Summed tilting moments `sum q {D - (1 - D) exp(q'g)}`.
pub fn ipt_moments(stack: &Stack, basis: &Basis, gamma: &DVector<f64>) -> DVector<f64> {
    let eta = &basis.matrix * gamma;
    let mut g = DVector::zeros(basis.ncols());
    for (k, r) in stack.rows.iter().enumerate() {
        let f = if r.treated { 1.0 } else { -eta[k].exp() };
        g.axpy(f, &basis.matrix.row(k).transpose(), 1.0);
    }
    g
}

fn newton_parts(
    stack: &Stack,
    basis: &Basis,
    gamma: &DVector<f64>,
) -> (DVector<f64>, DMatrix<f64>, f64) {
    let p = basis.ncols();
    let eta = &basis.matrix * gamma;
    let mut grad = DVector::zeros(p);
    let mut neg_hess = DMatrix::zeros(p, p);
    let mut max_odds: f64 = 0.0;
    for (k, r) in stack.rows.iter().enumerate() {
        let q = basis.matrix.row(k).transpose();
        if r.treated {
            grad += &q;
        } else {
            let e = eta[k].exp();
            max_odds = max_odds.max(e);
            grad.axpy(-e, &q, 1.0);
            neg_hess.ger(e, &q, &q, 1.0);
        }
    }
    (grad, neg_hess, max_odds)
}

/// Damped Newton ascent on the strictly concave tilting objective,
/// started at zero. Once the moment norm is below `tol`, up to two further
/// full Newton steps are taken while they keep shrinking the residual.
pub fn fit_ipt(stack: &Stack, basis: &Basis, opts: &IptOptions) -> Result<IptFit> {
    if stack.n_treated() == 0 || stack.n_control() == 0 {
        return Err(Error::SeparationDetected {
            max_odds: f64::INFINITY,
        });
    }
    let mut gamma = DVector::zeros(basis.ncols());
    let mut obj = ipt_objective(stack, basis, &gamma);
    let mut path = vec![obj];
    for iter in 0..=opts.max_iter {
        let (grad, neg_hess, max_odds) = newton_parts(stack, basis, &gamma);
        if !(max_odds <= opts.separation_odds) {
            return Err(Error::SeparationDetected { max_odds });
        }
        let resid = max_abs(&grad);
        if resid < opts.tol {
            let mut fit = IptFit {
                gamma,
                iterations: iter,
                residual_norm: resid,
                objective_path: path,
            };
            polish(stack, basis, &mut fit, grad, neg_hess);
            return Ok(fit);
        }
        if iter == opts.max_iter {
            return Err(Error::IptDiverged {
                iterations: iter,
                residual: resid,
            });
        }
        let step = neg_hess
            .cholesky()
            .map(|c| c.solve(&grad))
            .ok_or(Error::IptDiverged {
                iterations: iter,
                residual: resid,
            })?;
        let mut scale = 1.0;
        let slack = 1e-12 * (1.0 + obj.abs());
        loop {
            let cand = &gamma + &step * scale;
            let cand_obj = ipt_objective(stack, basis, &cand);
            if cand_obj.is_finite() && cand_obj >= obj - slack {
                gamma = cand;
                obj = cand_obj;
                path.push(obj);
                break;
            }
            scale *= 0.5;
            if scale < 1e-12 {
                return Err(Error::IptDiverged {
                    iterations: iter,
                    residual: resid,
                });
            }
        }
    }
    unreachable!("loop returns on the final iteration")
}

fn polish(
    stack: &Stack,
    basis: &Basis,
    fit: &mut IptFit,
    mut grad: DVector<f64>,
    mut neg_hess: DMatrix<f64>,
) {
    for _ in 0..2 {
        let Some(step) = neg_hess.clone().cholesky().map(|c| c.solve(&grad)) else {
            return;
        };
        let cand = &fit.gamma + step;
        let (g, h, _) = newton_parts(stack, basis, &cand);
        let resid = max_abs(&g);
        if !(resid < fit.residual_norm) {
            return;
        }
        fit.gamma = cand;
        fit.residual_norm = resid;
        fit.objective_path
            .push(ipt_objective(stack, basis, &fit.gamma));
        grad = g;
        neg_hess = h;
    }
}

/// Fitted untreated-outcome regression.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeFit {
    /// Coefficients over the full basis; dropped columns hold zero.
    pub beta: DVector<f64>,
    /// Basis columns actually estimated.
    pub active: Vec<usize>,
}

fn fit_outcome(stack: &Stack, basis: &Basis, odds: Option<&[f64]>) -> Result<OutcomeFit> {
    let ctrl = control_rows(stack);
    let p = basis.ncols();
    let x = DMatrix::from_fn(ctrl.len(), p, |i, j| basis.matrix[(ctrl[i], j)]);
    let y = DVector::from_iterator(ctrl.len(), ctrl.iter().map(|&k| stack.rows[k].delta));
    let w = odds.map(|o| DVector::from_iterator(ctrl.len(), ctrl.iter().map(|&k| o[k])));
    if let Some(w) = &w {
        if w.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::AlignmentError(
                "odds weights must be positive and finite".into(),
            ));
        }
    }
    match weighted_least_squares(&x, &y, w.as_ref()) {
        Ok(beta) => Ok(OutcomeFit {
            beta,
            active: (0..p).collect(),
        }),
        Err(Error::SingularNormalEquations) => {
            let mut xs = x.clone();
            if let Some(w) = &w {
                for i in 0..xs.nrows() {
                    xs.row_mut(i).scale_mut(w[i].sqrt());
                }
            }
            let active = independent_columns(&xs, RANK_TOL);
            if active.is_empty() {
                return Err(Error::SingularNormalEquations);
            }
            log::warn!(
                "outcome regression refit on {} of {p} basis columns",
                active.len()
            );
            let xa = x.select_columns(&active);
            let b = weighted_least_squares(&xa, &y, w.as_ref())?;
            let mut beta = DVector::zeros(p);
            for (pos, &j) in active.iter().enumerate() {
                beta[j] = b[pos];
            }
            Ok(OutcomeFit { beta, active })
        }
        Err(e) => Err(e),
    }
}

/// Least squares of the long difference on the basis over control rows.
pub fn fit_outcome_ols(stack: &Stack, basis: &Basis) -> Result<OutcomeFit> {
    fit_outcome(stack, basis, None)
}

/// Odds-weighted least squares over control rows; `odds` is indexed by
/// stack row (treated entries are ignored).
pub fn fit_outcome_wls(stack: &Stack, basis: &Basis, odds: &[f64]) -> Result<OutcomeFit> {
    if odds.len() != stack.rows.len() {
        return Err(Error::AlignmentError(
            "odds vector misaligned with stack".into(),
        ));
    }
    fit_outcome(stack, basis, Some(odds))
}

/// Odds `exp(q'g)` for every stack row, optionally capped.
pub fn odds_weights(basis: &Basis, gamma: &DVector<f64>, cap: Option<f64>) -> Vec<f64> {
    let eta = &basis.matrix * gamma;
    eta.iter()
        .map(|&e| {
            let o = e.exp();
            cap.map_or(o, |c| o.min(c))
        })
        .collect()
}

/// Diagnostics for one horizon's nuisance fits.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct NuisanceDiagnostics {
    pub basis_columns: Vec<String>,
    pub pruned_columns: Vec<String>,
    pub ipt_iterations: Option<usize>,
    pub ipt_residual_norm: Option<f64>,
    /// min, 25%, median, 75%, max of control odds weights.
    pub odds_quantiles: Option<[f64; 5]>,
    pub outcome_dropped_columns: Vec<String>,
    pub odds_cap: Option<f64>,
}

pub fn odds_summary(stack: &Stack, odds: &[f64]) -> Option<[f64; 5]> {
    let mut v: Vec<f64> = stack
        .rows
        .iter()
        .zip(odds)
        .filter(|(r, _)| !r.treated)
        .map(|(_, &o)| o)
        .collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some([v[0], q(0.25), q(0.5), q(0.75), v[v.len() - 1]])
}
