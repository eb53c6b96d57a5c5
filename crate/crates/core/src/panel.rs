//! Staggered-adoption panels, base-period operators and clean-control stacks.
//!
//! Periods are 1-based throughout the public API: period `s` lives in
//! column `s - 1` of the outcome matrix. Never-treated units carry
//! [`EntryDate::Never`] rather than a large sentinel date.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First treatment date of a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntryDate {
    Period(usize),
    Never,
}

impl EntryDate {
    /// Calendar-time treatment status at period `s` (absorbing).
    pub fn treated_at(self, s: usize) -> bool {
        match self {
            EntryDate::Period(g) => s >= g,
            EntryDate::Never => false,
        }
    }

    pub fn period(self) -> Option<usize> {
        match self {
            EntryDate::Period(g) => Some(g),
            EntryDate::Never => None,
        }
    }

    pub fn is_never(self) -> bool {
        matches!(self, EntryDate::Never)
    }
}

/// Covariate storage: either one row per unit, or one row per unit-period.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariates {
    /// `n_units × k`.
    Static(DMatrix<f64>),
    /// One `n_periods × k` matrix per unit.
    PerPeriod(Vec<DMatrix<f64>>),
}

impl Covariates {
    pub fn n_columns(&self) -> usize {
        match self {
            Covariates::Static(m) => m.ncols(),
            Covariates::PerPeriod(v) => v.first().map_or(0, |m| m.ncols()),
        }
    }
}

/// A balanced unit-by-period panel with an absorbing binary treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    outcome: DMatrix<f64>,
    first_treat: Vec<EntryDate>,
    covariates: Covariates,
    covariate_names: Vec<String>,
    clusters: Vec<usize>,
    cluster_labels: Vec<String>,
    unit_labels: Vec<String>,
}

impl Panel {
    /// Builds a panel with unit-level covariates and unit clusters.
    ///
    /// `outcome` is `n_units × n_periods`; `covariates` is `n_units × k`
    /// (use a `n_units × 0` matrix for none).
    pub fn new(
        outcome: DMatrix<f64>,
        first_treat: Vec<EntryDate>,
        covariates: DMatrix<f64>,
    ) -> Result<Self> {
        Self::with_covariates(outcome, first_treat, Covariates::Static(covariates))
    }

    pub fn with_covariates(
        outcome: DMatrix<f64>,
        first_treat: Vec<EntryDate>,
        covariates: Covariates,
    ) -> Result<Self> {
        let (n, t) = outcome.shape();
        if n == 0 || t == 0 {
            return Err(Error::InvalidPanel(
                "panel has no units or no periods".into(),
            ));
        }
        if first_treat.len() != n {
            return Err(Error::InvalidPanel(format!(
                "first_treat has {} entries for {n} units",
                first_treat.len()
            )));
        }
        for (i, g) in first_treat.iter().enumerate() {
            if let EntryDate::Period(p) = g {
                if *p < 1 || *p > t {
                    return Err(Error::InvalidPanel(format!(
                        "unit {i} has entry date {p} outside 1..={t}"
                    )));
                }
            }
        }
        for i in 0..n {
            for s in 0..t {
                if !outcome[(i, s)].is_finite() {
                    return Err(Error::MissingOutcome {
                        unit: i,
                        period: s + 1,
                    });
                }
            }
        }
        match &covariates {
            Covariates::Static(m) => {
                if m.nrows() != n {
                    return Err(Error::InvalidPanel(format!(
                        "covariate matrix has {} rows for {n} units",
                        m.nrows()
                    )));
                }
            }
            Covariates::PerPeriod(v) => {
                let k = covariates.n_columns();
                if v.len() != n || v.iter().any(|m| m.nrows() != t || m.ncols() != k) {
                    return Err(Error::InvalidPanel(
                        "per-period covariates must be one n_periods x k matrix per unit".into(),
                    ));
                }
            }
        }
        let k = covariates.n_columns();
        let bad_cov = match &covariates {
            Covariates::Static(m) => m.iter().any(|v| !v.is_finite()),
            Covariates::PerPeriod(v) => v.iter().any(|m| m.iter().any(|x| !x.is_finite())),
        };
        if bad_cov {
            return Err(Error::InvalidPanel(
                "covariates contain non-finite values".into(),
            ));
        }
        Ok(Self {
            outcome,
            first_treat,
            covariates,
            covariate_names: (1..=k).map(|j| format!("x{j}")).collect(),
            clusters: (0..n).collect(),
            cluster_labels: (0..n).map(|i| i.to_string()).collect(),
            unit_labels: (0..n).map(|i| i.to_string()).collect(),
        })
    }

    pub fn with_covariate_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.covariates.n_columns() {
            return Err(Error::InvalidPanel("covariate name count mismatch".into()));
        }
        self.covariate_names = names;
        Ok(self)
    }

    pub fn with_unit_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_units() {
            return Err(Error::InvalidPanel("unit label count mismatch".into()));
        }
        self.unit_labels = labels;
        Ok(self)
    }

    /// Assigns cluster labels; units sharing a label form one cluster.
    /// Cluster indices follow order of first appearance.
    pub fn with_cluster_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_units() {
            return Err(Error::InvalidPanel("cluster label count mismatch".into()));
        }
        let mut seen: Vec<String> = Vec::new();
        let mut index = std::collections::HashMap::new();
        self.clusters = labels
            .iter()
            .map(|l| {
                *index.entry(l.clone()).or_insert_with(|| {
                    seen.push(l.clone());
                    seen.len() - 1
                })
            })
            .collect();
        self.cluster_labels = seen;
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.outcome.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.outcome.ncols()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_labels.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.n_columns()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariates(&self) -> &Covariates {
        &self.covariates
    }

    pub fn unit_labels(&self) -> &[String] {
        &self.unit_labels
    }

    pub fn cluster_labels(&self) -> &[String] {
        &self.cluster_labels
    }

    pub fn cluster_of(&self, unit: usize) -> usize {
        self.clusters[unit]
    }

    pub fn first_treat(&self) -> &[EntryDate] {
        &self.first_treat
    }

    pub fn entry_date(&self, unit: usize) -> EntryDate {
        self.first_treat[unit]
    }

    /// Outcome of `unit` at 1-based period `s`.
    pub fn outcome(&self, unit: usize, s: usize) -> f64 {
        self.outcome[(unit, s - 1)]
    }

    pub fn outcome_matrix(&self) -> &DMatrix<f64> {
        &self.outcome
    }

    pub fn treated_at(&self, unit: usize, s: usize) -> bool {
        self.first_treat[unit].treated_at(s)
    }

    /// Covariate row used for a stack observation with entry date `t`.
    ///
    /// Per-period covariates are read at period `t - 1` (clamped to 1).
    pub fn covariate_row(&self, unit: usize, t: usize) -> Vec<f64> {
        match &self.covariates {
            Covariates::Static(m) => m.row(unit).iter().copied().collect(),
            Covariates::PerPeriod(v) => {
                let s = t.saturating_sub(1).max(1);
                v[unit].row(s - 1).iter().copied().collect()
            }
        }
    }

    /// Sorted distinct finite entry dates.
    pub fn cohorts(&self) -> Vec<usize> {
        self.first_treat
            .iter()
            .filter_map(|g| g.period())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Base-period rule: weights over lags `t - lag` relative to the entry date.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseRule {
    lags: Vec<usize>,
    weights: Vec<f64>,
}

impl BaseRule {
    /// The last pre-treatment period, `t - 1`, with weight one.
    pub fn last_pre() -> Self {
        Self {
            lags: vec![1],
            weights: vec![1.0],
        }
    }

    /// Equal-weight mean over the `k` periods preceding the entry date.
    pub fn mean_of_last(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidBaseRule("mean over zero periods".into()));
        }
        Ok(Self {
            lags: (1..=k).collect(),
            weights: vec![1.0 / k as f64; k],
        })
    }

    /// Arbitrary `(lag, weight)` pairs; lags are at least 1, weights are
    /// nonnegative and must sum to one.
    pub fn weighted(pairs: &[(usize, f64)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidBaseRule("no base periods".into()));
        }
        let mut lags = BTreeSet::new();
        for &(lag, w) in pairs {
            if lag == 0 {
                return Err(Error::InvalidBaseRule(
                    "lag 0 is the entry date itself".into(),
                ));
            }
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::InvalidBaseRule(format!(
                    "weight {w} is not nonnegative"
                )));
            }
            if !lags.insert(lag) {
                return Err(Error::InvalidBaseRule(format!("lag {lag} repeated")));
            }
        }
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidBaseRule(format!(
                "weights sum to {total}, not 1"
            )));
        }
        Ok(Self {
            lags: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1).collect(),
        })
    }

    pub fn is_last_pre(&self) -> bool {
        self.lags == [1] && self.weights == [1.0]
    }

    pub fn max_lag(&self) -> usize {
        self.lags.iter().copied().max().unwrap_or(1)
    }

    /// Periods used for the base of entry date `t`, paired with weights.
    pub fn pre_periods(&self, t: usize) -> Result<Vec<(usize, f64)>> {
        if t <= self.max_lag() {
            return Err(Error::InadmissibleBase { t });
        }
        Ok(self
            .lags
            .iter()
            .zip(&self.weights)
            .map(|(&lag, &w)| (t - lag, w))
            .collect())
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn lags(&self) -> &[usize] {
        &self.lags
    }
}

impl Default for BaseRule {
    fn default() -> Self {
        Self::last_pre()
    }
}

/// Base value `sum_l w_l Y_{i,l}` for entry date `t`.
pub fn base_value(panel: &Panel, unit: usize, t: usize, rule: &BaseRule) -> Result<f64> {
    if t > panel.n_periods() {
        return Err(Error::HorizonOutOfRange {
            period: t as i64,
            n_periods: panel.n_periods(),
        });
    }
    let periods = rule.pre_periods(t)?;
    Ok(periods
        .iter()
        .map(|&(s, w)| w * panel.outcome(unit, s))
        .sum())
}

fn target_period(panel: &Panel, t: usize, h: i64) -> Result<usize> {
    let s = t as i64 + h;
    if s < 1 || s > panel.n_periods() as i64 {
        return Err(Error::HorizonOutOfRange {
            period: s,
            n_periods: panel.n_periods(),
        });
    }
    Ok(s as usize)
}

/// Long difference `Y_{i,t+h} - B_{it}`.
pub fn long_diff(panel: &Panel, unit: usize, t: usize, h: i64, rule: &BaseRule) -> Result<f64> {
    let s = target_period(panel, t, h)?;
    let base = base_value(panel, unit, t, rule)?;
    Ok(panel.outcome(unit, s) - base)
}

/// Comparison window: the base periods plus `t + max(h, 0)`.
fn comparison_window(panel: &Panel, t: usize, h: i64, rule: &BaseRule) -> Result<Vec<usize>> {
    let mut window: Vec<usize> = rule.pre_periods(t)?.into_iter().map(|p| p.0).collect();
    window.push(target_period(panel, t, h.max(0))?);
    Ok(window)
}

/// Units untreated throughout the comparison window of `(t, h, rule)`.
///
/// Negative horizons reuse the `h = 0` window.
pub fn clean_control_set(panel: &Panel, t: usize, h: i64, rule: &BaseRule) -> Result<Vec<usize>> {
    let window = comparison_window(panel, t, h, rule)?;
    Ok((0..panel.n_units())
        .filter(|&i| window.iter().all(|&s| !panel.treated_at(i, s)))
        .collect())
}

/// One observation `(i, t)` of a horizon stack.
#[derive(Debug, Clone, PartialEq)]
pub struct StackRow {
    pub unit: usize,
    pub entry_date: usize,
    pub treated: bool,
    pub delta: f64,
    pub covariates: Vec<f64>,
    pub cluster: usize,
}

/// An entry-date cell skipped while building a stack.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DroppedCell {
    pub entry_date: usize,
    pub n_treated: usize,
    pub reason: String,
}

/// Horizon-specific pooled clean-control stack.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub horizon: i64,
    pub rows: Vec<StackRow>,
    pub entry_dates: Vec<usize>,
    pub dropped: Vec<DroppedCell>,
    pub covariate_names: Vec<String>,
    /// Total clusters in the source panel; cluster labels index into it.
    pub n_clusters: usize,
}

impl Stack {
    pub fn n_treated(&self) -> usize {
        self.rows.iter().filter(|r| r.treated).count()
    }

    pub fn n_control(&self) -> usize {
        self.rows.len() - self.n_treated()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    /// Row indices grouped by entry date, in `entry_dates` order.
    pub fn cells(&self) -> Vec<(usize, Vec<usize>)> {
        self.entry_dates
            .iter()
            .map(|&t| {
                let idx = self
                    .rows
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.entry_date == t)
                    .map(|(k, _)| k)
                    .collect();
                (t, idx)
            })
            .collect()
    }

    /// Distinct clusters present in the stack, sorted.
    pub fn clusters(&self) -> Vec<usize> {
        self.rows
            .iter()
            .map(|r| r.cluster)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

/// Pools treated entrants and clean controls over every admissible entry date.
pub fn build_stack(panel: &Panel, h: i64, rule: &BaseRule) -> Result<Stack> {
    let mut rows = Vec::new();
    let mut entry_dates = Vec::new();
    let mut dropped = Vec::new();
    for t in panel.cohorts() {
        let entrants: Vec<usize> = (0..panel.n_units())
            .filter(|&i| panel.entry_date(i) == EntryDate::Period(t))
            .collect();
        let window_end = t as i64 + h.max(0);
        if window_end > panel.n_periods() as i64 || t as i64 + h < 1 {
            continue;
        }
        if rule.pre_periods(t).is_err() {
            dropped.push(DroppedCell {
                entry_date: t,
                n_treated: entrants.len(),
                reason: "no admissible base period".into(),
            });
            continue;
        }
        let controls = clean_control_set(panel, t, h, rule)?;
        if controls.is_empty() {
            log::warn!("horizon {h}: entry date {t} has no clean controls; cell dropped");
            dropped.push(DroppedCell {
                entry_date: t,
                n_treated: entrants.len(),
                reason: "no clean controls".into(),
            });
            continue;
        }
        for (&unit, treated) in entrants
            .iter()
            .map(|u| (u, true))
            .chain(controls.iter().map(|u| (u, false)))
        {
            rows.push(StackRow {
                unit,
                entry_date: t,
                treated,
                delta: long_diff(panel, unit, t, h, rule)?,
                covariates: panel.covariate_row(unit, t),
                cluster: panel.cluster_of(unit),
            });
        }
        entry_dates.push(t);
    }
    if entry_dates.is_empty() {
        return Err(Error::EmptyStack { horizon: h });
    }
    Ok(Stack {
        horizon: h,
        rows,
        entry_dates,
        dropped,
        covariate_names: panel.covariate_names().to_vec(),
        n_clusters: panel.n_clusters(),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// G = (u1:3, u2:5, u3:never, u4:3), T = 6.
    pub(crate) fn four_unit_panel() -> Panel {
        let y = DMatrix::from_fn(4, 6, |i, s| (10 * i + s) as f64);
        let g = vec![
            EntryDate::Period(3),
            EntryDate::Period(5),
            EntryDate::Never,
            EntryDate::Period(3),
        ];
        Panel::new(y, g, DMatrix::zeros(4, 0)).unwrap()
    }

    fn single_unit(y: &[f64]) -> Panel {
        let m = DMatrix::from_row_slice(1, y.len(), y);
        Panel::new(m, vec![EntryDate::Never], DMatrix::zeros(1, 0)).unwrap()
    }

    #[test]
    fn base_value_examples() {
        let p = single_unit(&[1.0, 5.0, 0.0]);
        assert_eq!(base_value(&p, 0, 3, &BaseRule::last_pre()).unwrap(), 5.0);

        let p = single_unit(&[2.0, 4.0, 0.0]);
        let avg = BaseRule::mean_of_last(2).unwrap();
        assert_eq!(base_value(&p, 0, 3, &avg).unwrap(), 3.0);

        // period 1 gets 0.25 (lag 2), period 2 gets 0.75 (lag 1)
        let p = single_unit(&[8.0, 0.0, 0.0]);
        let rule = BaseRule::weighted(&[(2, 0.25), (1, 0.75)]).unwrap();
        assert_eq!(base_value(&p, 0, 3, &rule).unwrap(), 2.0);
    }

    #[test]
    fn base_value_inadmissible() {
        let p = single_unit(&[1.0, 2.0, 3.0]);
        assert_eq!(
            base_value(&p, 0, 1, &BaseRule::last_pre()),
            Err(Error::InadmissibleBase { t: 1 })
        );
        let avg = BaseRule::mean_of_last(2).unwrap();
        assert_eq!(
            base_value(&p, 0, 2, &avg),
            Err(Error::InadmissibleBase { t: 2 })
        );
    }

    #[test]
    fn base_rule_validation() {
        assert!(BaseRule::weighted(&[(1, 0.5), (2, 0.4)]).is_err());
        assert!(BaseRule::weighted(&[(0, 1.0)]).is_err());
        assert!(BaseRule::weighted(&[(1, 1.5), (2, -0.5)]).is_err());
        assert!(BaseRule::mean_of_last(0).is_err());
        assert!(BaseRule::last_pre().is_last_pre());
    }

    #[test]
    fn long_diff_examples() {
        let p = single_unit(&[0.0, 7.0, 0.0, 10.0]);
        assert_eq!(long_diff(&p, 0, 3, 1, &BaseRule::last_pre()).unwrap(), 3.0);
        assert_eq!(long_diff(&p, 0, 3, -1, &BaseRule::last_pre()).unwrap(), 0.0);

        let p = single_unit(&[2.0, 4.0, 0.0, 9.0]);
        let avg = BaseRule::mean_of_last(2).unwrap();
        assert_eq!(long_diff(&p, 0, 3, 1, &avg).unwrap(), 6.0);
    }

    #[test]
    fn long_diff_out_of_range() {
        let p = single_unit(&[0.0, 7.0, 0.0, 10.0]);
        assert!(matches!(
            long_diff(&p, 0, 3, 2, &BaseRule::last_pre()),
            Err(Error::HorizonOutOfRange { period: 5, .. })
        ));
    }

    #[test]
    fn clean_control_examples() {
        let p = four_unit_panel();
        let lp = BaseRule::last_pre();
        assert_eq!(clean_control_set(&p, 3, 1, &lp).unwrap(), vec![1, 2]);
        assert_eq!(clean_control_set(&p, 3, 2, &lp).unwrap(), vec![2]);
        assert_eq!(clean_control_set(&p, 3, -2, &lp).unwrap(), vec![1, 2]);
    }

    #[test]
    fn build_stack_example() {
        let p = four_unit_panel();
        let s = build_stack(&p, 1, &BaseRule::last_pre()).unwrap();
        assert_eq!(s.entry_dates, vec![3, 5]);
        let members: Vec<(usize, usize, bool)> = s
            .rows
            .iter()
            .map(|r| (r.entry_date, r.unit, r.treated))
            .collect();
        assert_eq!(
            members,
            vec![
                (3, 0, true),
                (3, 3, true),
                (3, 1, false),
                (3, 2, false),
                (5, 1, true),
                (5, 2, false)
            ]
        );
        // y = 10 i + (s - 1): long differences are h + 1 = 2 everywhere
        assert!(s.rows.iter().all(|r| r.delta == 2.0));
    }

    #[test]
    fn empty_stack() {
        let p = single_unit(&[1.0, 2.0, 3.0]);
        assert_eq!(
            build_stack(&p, 0, &BaseRule::last_pre()),
            Err(Error::EmptyStack { horizon: 0 })
        );
    }

    #[test]
    fn cell_without_controls_is_dropped() {
        // every unit is treated by period 3
        let y = DMatrix::from_fn(3, 5, |i, s| (i * s) as f64);
        let g = vec![
            EntryDate::Period(2),
            EntryDate::Period(3),
            EntryDate::Period(3),
        ];
        let p = Panel::new(y, g, DMatrix::zeros(3, 0)).unwrap();
        let s = build_stack(&p, 0, &BaseRule::last_pre()).unwrap();
        assert_eq!(s.entry_dates, vec![2]);
        assert_eq!(s.dropped.len(), 1);
        assert_eq!(s.dropped[0].entry_date, 3);
    }

    #[test]
    fn negative_horizon_reuses_membership() {
        let p = four_unit_panel();
        let lp = BaseRule::last_pre();
        let s0 = build_stack(&p, 0, &lp).unwrap();
        let sm1 = build_stack(&p, -1, &lp).unwrap();
        let key = |s: &Stack| {
            s.rows
                .iter()
                .map(|r| (r.entry_date, r.unit, r.treated))
                .collect::<Vec<_>>()
        };
        assert_eq!(key(&s0), key(&sm1));
        assert!(sm1.rows.iter().all(|r| r.delta == 0.0));
    }

    #[test]
    fn panel_rejects_missing_cells() {
        let mut y = DMatrix::from_element(2, 3, 1.0);
        y[(1, 2)] = f64::NAN;
        let err = Panel::new(y, vec![EntryDate::Never; 2], DMatrix::zeros(2, 0)).unwrap_err();
        assert_eq!(err, Error::MissingOutcome { unit: 1, period: 3 });
    }

    #[test]
    fn panel_rejects_entry_out_of_range() {
        let y = DMatrix::from_element(2, 3, 1.0);
        let g = vec![EntryDate::Period(4), EntryDate::Never];
        assert!(matches!(
            Panel::new(y, g, DMatrix::zeros(2, 0)),
            Err(Error::InvalidPanel(_))
        ));
    }

    #[test]
    fn per_period_covariates_read_at_base() {
        let y = DMatrix::from_element(1, 4, 0.0);
        let x = DMatrix::from_fn(4, 1, |s, _| s as f64 + 1.0);
        let p = Panel::with_covariates(y, vec![EntryDate::Never], Covariates::PerPeriod(vec![x]))
            .unwrap();
        assert_eq!(p.covariate_row(0, 3), vec![2.0]);
    }

    #[test]
    fn cluster_labels_merge_units() {
        let y = DMatrix::from_element(3, 3, 0.0);
        let p = Panel::new(y, vec![EntryDate::Never; 3], DMatrix::zeros(3, 0))
            .unwrap()
            .with_cluster_labels(vec!["b".into(), "a".into(), "b".into()])
            .unwrap();
        assert_eq!(p.n_clusters(), 2);
        assert_eq!(
            (p.cluster_of(0), p.cluster_of(1), p.cluster_of(2)),
            (0, 1, 0)
        );
    }

    fn arb_panel() -> impl Strategy<Value = Panel> {
        (2usize..=20, 3usize..=10).prop_flat_map(|(n, t)| {
            (
                proptest::collection::vec(0usize..=t, n),
                proptest::collection::vec(-5.0f64..5.0, n * t),
            )
                .prop_map(move |(g, y)| {
                    let first = g
                        .into_iter()
                        .map(|v| {
                            if v == 0 {
                                EntryDate::Never
                            } else {
                                EntryDate::Period(v)
                            }
                        })
                        .collect();
                    Panel::new(DMatrix::from_vec(n, t, y), first, DMatrix::zeros(n, 0)).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn last_pre_controls_are_untreated_at_target(p in arb_panel(), h in 0i64..4) {
            let lp = BaseRule::last_pre();
            for t in 2..=p.n_periods() {
                if t as i64 + h > p.n_periods() as i64 { continue; }
                let got = clean_control_set(&p, t, h, &lp).unwrap();
                let brute: Vec<usize> = (0..p.n_units())
                    .filter(|&i| match p.entry_date(i) {
                        EntryDate::Never => true,
                        EntryDate::Period(g) => g as i64 > t as i64 + h,
                    })
                    .collect();
                prop_assert_eq!(got, brute);
            }
        }

        #[test]
        fn treatment_status_is_monotone(p in arb_panel()) {
            for i in 0..p.n_units() {
                for s in 2..=p.n_periods() {
                    prop_assert!(p.treated_at(i, s) >= p.treated_at(i, s - 1));
                }
            }
        }

        #[test]
        fn no_unit_is_both_treated_and_control(p in arb_panel(), h in -2i64..4) {
            if let Ok(s) = build_stack(&p, h, &BaseRule::last_pre()) {
                for (_, idx) in s.cells() {
                    let treated: BTreeSet<usize> = idx.iter().filter(|&&k| s.rows[k].treated).map(|&k| s.rows[k].unit).collect();
                    prop_assert!(idx.iter().filter(|&&k| !s.rows[k].treated).all(|&k| !treated.contains(&s.rows[k].unit)));
                    prop_assert!(idx.iter().filter(|&&k| s.rows[k].treated).all(|&k| p.entry_date(s.rows[k].unit) == EntryDate::Period(s.rows[k].entry_date)));
                }
            }
        }

        #[test]
        fn mean_rule_weights_sum_to_one(k in 1usize..12) {
            let r = BaseRule::mean_of_last(k).unwrap();
            let total: f64 = r.weights().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-14);
        }
    }
}
