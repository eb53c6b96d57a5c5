//! Cluster-level influence functions, sandwich standard errors, linear
//! contrasts across horizons and multiplier-bootstrap sup-t bands.
//!
//! For the semiparametric estimators the parameter vector stacks the
//! outcome-regression coefficients, the tilting coefficients and the two
//! means `(mu1, mu0)`; the estimate is `mu1 - mu0`. The per-cluster
//! influence value is `-grad_g' A^{-1} Psi_c`, with `A` the cluster-averaged
//! Jacobian of the stacked moments.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::aggregation::PooledFit;
use crate::error::{Error, Result};
use crate::estimators::{Estimator, HorizonFit, SemiparametricFit};
use crate::linalg::{condition_number, solve_square};
use crate::panel::Stack;

/// Condition number above which the moment Jacobian is treated as singular.
pub const MAX_JACOBIAN_CONDITION: f64 = 1e12;

/// Stacked moment conditions for RA, IPT or DR at one horizon.
pub struct MomentSystem<'a> {
    stack: &'a Stack,
    basis: &'a DMatrix<f64>,
    estimator: Estimator,
    beta_cols: Vec<usize>,
    n_gamma: usize,
    odds_cap: Option<f64>,
}

struct RowTerms {
    q: DVector<f64>,
    qa: DVector<f64>,
    treated: f64,
    control: f64,
    delta: f64,
}

impl<'a> MomentSystem<'a> {
    pub fn new(stack: &'a Stack, fit: &'a SemiparametricFit) -> Self {
        let beta_cols = fit
            .outcome
            .as_ref()
            .map(|o| o.active.clone())
            .unwrap_or_default();
        let n_gamma = if fit.ipt.is_some() {
            fit.basis.ncols()
        } else {
            0
        };
        Self {
            stack,
            basis: &fit.basis.matrix,
            estimator: fit.estimator,
            beta_cols,
            n_gamma,
            odds_cap: fit.odds_cap,
        }
    }

    pub fn dim(&self) -> usize {
        self.beta_cols.len() + self.n_gamma + 2
    }

    fn nb(&self) -> usize {
        self.beta_cols.len()
    }

    fn mu1_idx(&self) -> usize {
        self.nb() + self.n_gamma
    }

    /// Parameter vector at the fitted values.
    pub fn params(&self, fit: &SemiparametricFit) -> DVector<f64> {
        let mut eta = DVector::zeros(self.dim());
        if let Some(o) = &fit.outcome {
            for (pos, &j) in self.beta_cols.iter().enumerate() {
                eta[pos] = o.beta[j];
            }
        }
        if let Some(ipt) = &fit.ipt {
            eta.rows_mut(self.nb(), self.n_gamma).copy_from(&ipt.gamma);
        }
        eta[self.mu1_idx()] = fit.estimate.mu1;
        eta[self.mu1_idx() + 1] = fit.estimate.mu0;
        eta
    }

    /// Gradient of `mu1 - mu0` with respect to the parameters.
    pub fn target_gradient(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.dim());
        g[self.mu1_idx()] = 1.0;
        g[self.mu1_idx() + 1] = -1.0;
        g
    }

    fn row_terms(&self, k: usize) -> RowTerms {
        let r = &self.stack.rows[k];
        let q: DVector<f64> = self.basis.row(k).transpose();
        let qa = DVector::from_iterator(self.nb(), self.beta_cols.iter().map(|&j| q[j]));
        let d = if r.treated { 1.0 } else { 0.0 };
        RowTerms {
            q,
            qa,
            treated: d,
            control: 1.0 - d,
            delta: r.delta,
        }
    }

    /// (fitting odds, weighting odds, weighting odds has a gradient).
    fn odds(&self, q: &DVector<f64>, eta: &DVector<f64>) -> (f64, f64, bool) {
        if self.n_gamma == 0 {
            return (1.0, 1.0, false);
        }
        let e = q.dot(&eta.rows(self.nb(), self.n_gamma)).exp();
        match self.odds_cap {
            Some(c) if e > c => (e, c, false),
            _ => (e, e, true),
        }
    }

    pub fn row_moment(&self, k: usize, eta: &DVector<f64>) -> DVector<f64> {
        let t = self.row_terms(k);
        let nb = self.nb();
        let (mu1, mu0) = (eta[self.mu1_idx()], eta[self.mu1_idx() + 1]);
        let fit_b = t.qa.dot(&eta.rows(0, nb));
        let (e_fit, e_w, _) = self.odds(&t.q, eta);
        let mut psi = DVector::zeros(self.dim());
        match self.estimator {
            Estimator::LpdidRa => {
                psi.rows_mut(0, nb)
                    .copy_from(&(&t.qa * (t.control * (t.delta - fit_b))));
                psi[nb] = t.treated * (t.delta - mu1);
                psi[nb + 1] = t.treated * (fit_b - mu0);
            }
            Estimator::DrlpdidIpt => {
                psi.rows_mut(0, self.n_gamma)
                    .copy_from(&(&t.q * (t.treated - t.control * e_fit)));
                psi[self.n_gamma] = t.treated * (t.delta - mu1);
                psi[self.n_gamma + 1] = t.control * e_w * (t.delta - mu0);
            }
            Estimator::Drlpdid => {
                let r = t.delta - fit_b;
                psi.rows_mut(0, nb)
                    .copy_from(&(&t.qa * (t.control * e_w * r)));
                psi.rows_mut(nb, self.n_gamma)
                    .copy_from(&(&t.q * (t.treated - t.control * e_fit)));
                psi[nb + self.n_gamma] = t.treated * (r - mu1);
                psi[nb + self.n_gamma + 1] = t.control * e_w * (r - mu0);
            }
            Estimator::LpdidRw | Estimator::LpdidRwX => {
                unreachable!("benchmarks have no moment system")
            }
        }
        psi
    }

    pub fn row_jacobian(&self, k: usize, eta: &DVector<f64>) -> DMatrix<f64> {
        let t = self.row_terms(k);
        let nb = self.nb();
        let ng = self.n_gamma;
        let dim = self.dim();
        let (i1, i0) = (self.mu1_idx(), self.mu1_idx() + 1);
        let mu0 = eta[i0];
        let fit_b = t.qa.dot(&eta.rows(0, nb));
        let (e_fit, e_w, live) = self.odds(&t.q, eta);
        let de_w: DVector<f64> = if live {
            &t.q * e_w
        } else {
            DVector::zeros(t.q.len())
        };
        let mut j = DMatrix::zeros(dim, dim);
        match self.estimator {
            Estimator::LpdidRa => {
                j.view_mut((0, 0), (nb, nb))
                    .copy_from(&(&t.qa * t.qa.transpose() * (-t.control)));
                j[(i1, i1)] = -t.treated;
                j.view_mut((i0, 0), (1, nb))
                    .copy_from(&(t.qa.transpose() * t.treated));
                j[(i0, i0)] = -t.treated;
            }
            Estimator::DrlpdidIpt => {
                j.view_mut((0, 0), (ng, ng))
                    .copy_from(&(&t.q * t.q.transpose() * (-t.control * e_fit)));
                j[(i1, i1)] = -t.treated;
                j.view_mut((i0, 0), (1, ng))
                    .copy_from(&(de_w.transpose() * (t.control * (t.delta - mu0))));
                j[(i0, i0)] = -t.control * e_w;
            }
            Estimator::Drlpdid => {
                let r = t.delta - fit_b;
                j.view_mut((0, 0), (nb, nb))
                    .copy_from(&(&t.qa * t.qa.transpose() * (-t.control * e_w)));
                j.view_mut((0, nb), (nb, ng))
                    .copy_from(&(&t.qa * de_w.transpose() * (t.control * r)));
                j.view_mut((nb, nb), (ng, ng))
                    .copy_from(&(&t.q * t.q.transpose() * (-t.control * e_fit)));
                j.view_mut((i1, 0), (1, nb))
                    .copy_from(&(t.qa.transpose() * (-t.treated)));
                j[(i1, i1)] = -t.treated;
                j.view_mut((i0, 0), (1, nb))
                    .copy_from(&(t.qa.transpose() * (-t.control * e_w)));
                j.view_mut((i0, nb), (1, ng))
                    .copy_from(&(de_w.transpose() * (t.control * (r - mu0))));
                j[(i0, i0)] = -t.control * e_w;
            }
            Estimator::LpdidRw | Estimator::LpdidRwX => {
                unreachable!("benchmarks have no moment system")
            }
        }
        j
    }

    /// Sum of the moments over every row.
    pub fn total_moment(&self, eta: &DVector<f64>) -> DVector<f64> {
        (0..self.stack.rows.len()).fold(DVector::zeros(self.dim()), |acc, k| {
            acc + self.row_moment(k, eta)
        })
    }

    /// Cluster sums of the moments: row `c` of the result is `Psi_c`.
    pub fn cluster_moments(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.stack.n_clusters, self.dim());
        for k in 0..self.stack.rows.len() {
            let c = self.stack.rows[k].cluster;
            let psi = self.row_moment(k, eta);
            let mut row = out.row_mut(c);
            row += psi.transpose();
        }
        out
    }

    /// Analytic Jacobian of the cluster-averaged moments.
    pub fn jacobian(&self, eta: &DVector<f64>) -> DMatrix<f64> {
        let sum = (0..self.stack.rows.len())
            .fold(DMatrix::zeros(self.dim(), self.dim()), |acc, k| {
                acc + self.row_jacobian(k, eta)
            });
        sum / self.stack.n_clusters as f64
    }

    /// Central finite-difference Jacobian of the cluster-averaged moments.
    pub fn numeric_jacobian(&self, eta: &DVector<f64>, step: f64) -> DMatrix<f64> {
        let dim = self.dim();
        let nc = self.stack.n_clusters as f64;
        let mut j = DMatrix::zeros(dim, dim);
        for p in 0..dim {
            let h = step * (1.0 + eta[p].abs());
            let mut up = eta.clone();
            let mut dn = eta.clone();
            up[p] += h;
            dn[p] -= h;
            let col = (self.total_moment(&up) - self.total_moment(&dn)) / (2.0 * h * nc);
            j.set_column(p, &col);
        }
        j
    }
}

/// Per-cluster influence values of `theta = mu1 - mu0`.
pub fn influence(stack: &Stack, fit: &SemiparametricFit) -> Result<Vec<f64>> {
    let system = MomentSystem::new(stack, fit);
    let eta = system.params(fit);
    influence_at(&system, &eta, false)
}

/// As [`influence`], optionally using the finite-difference Jacobian.
pub fn influence_at(
    system: &MomentSystem<'_>,
    eta: &DVector<f64>,
    numeric: bool,
) -> Result<Vec<f64>> {
    let a = if numeric {
        system.numeric_jacobian(eta, 1e-6)
    } else {
        system.jacobian(eta)
    };
    let condition = condition_number(&a);
    if !(condition < MAX_JACOBIAN_CONDITION) {
        return Err(Error::SingularJacobian { condition });
    }
    let v = solve_square(&a.transpose(), &system.target_gradient())
        .ok_or(Error::SingularJacobian { condition })?;
    let psi = system.cluster_moments(eta);
    Ok((&psi * v).iter().map(|x| -x).collect())
}

/// Cluster-robust influence values of the coefficient on `D` in a pooled
/// weighted regression (the usual CR0 sandwich).
pub fn benchmark_influence(stack: &Stack, fit: &PooledFit) -> Result<Vec<f64>> {
    let x = &fit.design;
    let mut xwx = DMatrix::zeros(x.ncols(), x.ncols());
    for k in 0..x.nrows() {
        let row = x.row(k).transpose();
        xwx.ger(fit.weights[k], &row, &row, 1.0);
    }
    let mut e0 = DVector::zeros(x.ncols());
    e0[0] = 1.0;
    let v = solve_square(&xwx, &e0).ok_or(Error::SingularNormalEquations)?;
    let nc = stack.n_clusters;
    let mut out = vec![0.0; nc];
    for (k, r) in stack.rows.iter().enumerate() {
        let score = fit.weights[k] * fit.residuals[k] * x.row(k).transpose().dot(&v);
        out[r.cluster] += nc as f64 * score;
    }
    Ok(out)
}

/// `sqrt(V / N_C)` with `V = (1 / N_C) sum_c IF_c^2`.
pub fn cluster_se(influence: &[f64], n_clusters: usize) -> Result<f64> {
    if n_clusters < 2 {
        return Err(Error::TooFewClusters(n_clusters));
    }
    let nc = n_clusters as f64;
    let v: f64 = influence.iter().map(|x| x * x).sum::<f64>() / nc;
    Ok((v / nc).sqrt())
}

/// Stacked influence values: one row per cluster, one column per horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceArray {
    pub horizons: Vec<i64>,
    pub estimates: Vec<f64>,
    pub values: DMatrix<f64>,
    pub n_clusters: usize,
}

impl InfluenceArray {
    pub fn new(horizons: Vec<i64>, estimates: Vec<f64>, values: DMatrix<f64>) -> Result<Self> {
        if horizons.len() != estimates.len() || values.ncols() != horizons.len() {
            return Err(Error::AlignmentError(
                "influence array shape mismatch".into(),
            ));
        }
        let n_clusters = values.nrows();
        Ok(Self {
            horizons,
            estimates,
            values,
            n_clusters,
        })
    }

    pub fn from_fits(fits: &[HorizonFit], n_clusters: usize) -> Self {
        let values = DMatrix::from_fn(n_clusters, fits.len(), |c, h| fits[h].influence[c]);
        Self {
            horizons: fits.iter().map(|f| f.estimate.horizon).collect(),
            estimates: fits.iter().map(|f| f.estimate.theta).collect(),
            values,
            n_clusters,
        }
    }

    pub fn se(&self, col: usize) -> Result<f64> {
        cluster_se(self.values.column(col).as_slice(), self.n_clusters)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Contrast {
    pub estimate: f64,
    pub se: f64,
}

/// Equal weights over the nonnegative horizons present in `horizons`.
pub fn post_average_weights(horizons: &[i64]) -> Vec<(i64, f64)> {
    let post: Vec<i64> = horizons.iter().copied().filter(|&h| h >= 0).collect();
    let w = 1.0 / post.len() as f64;
    post.into_iter().map(|h| (h, w)).collect()
}

/// `sum_h w_h theta_h` with influence values `sum_h w_h IF_{c,h}`.
pub fn linear_contrast(array: &InfluenceArray, weights: &[(i64, f64)]) -> Result<Contrast> {
    if weights.is_empty() {
        return Err(Error::AlignmentError("empty contrast".into()));
    }
    let mut estimate = 0.0;
    let mut inf = vec![0.0; array.n_clusters];
    for &(h, w) in weights {
        let col = array
            .horizons
            .iter()
            .position(|&x| x == h)
            .ok_or_else(|| Error::AlignmentError(format!("horizon {h} was not estimated")))?;
        estimate += w * array.estimates[col];
        for (c, v) in inf.iter_mut().enumerate() {
            *v += w * array.values[(c, col)];
        }
    }
    Ok(Contrast {
        estimate,
        se: cluster_se(&inf, array.n_clusters)?,
    })
}

/// Mean-zero, unit-variance multiplier distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Multiplier {
    #[default]
    Rademacher,
    Mammen,
    Webb,
}

impl Multiplier {
    pub fn draw<R: Rng>(self, rng: &mut R) -> f64 {
        match self {
            Multiplier::Rademacher => {
                if rng.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            Multiplier::Mammen => {
                let s5 = 5f64.sqrt();
                let p = (s5 + 1.0) / (2.0 * s5);
                if rng.random::<f64>() < p {
                    (1.0 - s5) / 2.0
                } else {
                    (1.0 + s5) / 2.0
                }
            }
            Multiplier::Webb => {
                const V: [f64; 3] = [std::f64::consts::FRAC_1_SQRT_2, 1.0, 1.224_744_871_391_589];
                let k = rng.random_range(0..6usize);
                if k < 3 {
                    -V[k]
                } else {
                    V[k - 3]
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandRow {
    pub h: i64,
    pub theta: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub band_lo: f64,
    pub band_hi: f64,
}

/// Pointwise intervals and a simultaneous sup-t band.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Band {
    pub alpha: f64,
    pub scheme: Multiplier,
    #[serde(rename = "B")]
    pub b: usize,
    pub seed: u64,
    pub c_star: f64,
    pub horizons: Vec<BandRow>,
    /// Horizons with zero standard error, left out of the sup statistic.
    pub excluded: Vec<i64>,
}

/// Standard normal quantile.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Sup-t statistics of `B` multiplier draws. Draw `b` uses its own ChaCha
/// stream, so the result does not depend on how draws are scheduled.
pub fn sup_t_draws(
    array: &InfluenceArray,
    ses: &[f64],
    b: usize,
    scheme: Multiplier,
    seed: u64,
) -> Vec<f64> {
    let nc = array.n_clusters;
    let active: Vec<usize> = (0..ses.len()).filter(|&h| ses[h] > 0.0).collect();
    (0..b)
        .into_par_iter()
        .map(|draw| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(draw as u64);
            let xi: Vec<f64> = (0..nc).map(|_| scheme.draw(&mut rng)).collect();
            active
                .iter()
                .map(|&h| {
                    let dev: f64 = array
                        .values
                        .column(h)
                        .iter()
                        .zip(&xi)
                        .map(|(v, x)| v * x)
                        .sum::<f64>()
                        / nc as f64;
                    (dev / ses[h]).abs()
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Empirical `(1 - alpha)` quantile as the `ceil((1 - alpha) B)`-th order
/// statistic.
pub fn upper_quantile(mut draws: Vec<f64>, alpha: f64) -> f64 {
    draws.sort_by(f64::total_cmp);
    let k = ((1.0 - alpha) * draws.len() as f64).ceil() as usize;
    draws[k.clamp(1, draws.len()) - 1]
}

pub fn multiplier_bootstrap(
    array: &InfluenceArray,
    b: usize,
    scheme: Multiplier,
    alpha: f64,
    seed: u64,
) -> Result<Band> {
    if b == 0 {
        return Err(Error::InvalidBootstrap("B must be at least 1".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidBootstrap(format!(
            "alpha = {alpha} outside (0, 1)"
        )));
    }
    let ses: Vec<f64> = (0..array.horizons.len())
        .map(|h| array.se(h))
        .collect::<Result<_>>()?;
    let excluded: Vec<i64> = array
        .horizons
        .iter()
        .zip(&ses)
        .filter(|(_, &s)| !(s > 0.0))
        .map(|(&h, _)| h)
        .collect();
    if excluded.len() == ses.len() {
        return Err(Error::DegenerateBand);
    }
    if !excluded.is_empty() {
        log::warn!("horizons {excluded:?} have zero standard error and are left out of the sup-t statistic");
    }
    let c_star = upper_quantile(sup_t_draws(array, &ses, b, scheme, seed), alpha);
    let z = normal_quantile(1.0 - alpha / 2.0);
    let horizons = array
        .horizons
        .iter()
        .enumerate()
        .map(|(k, &h)| {
            let theta = array.estimates[k];
            let se = ses[k];
            BandRow {
                h,
                theta,
                se,
                ci_lo: theta - z * se,
                ci_hi: theta + z * se,
                band_lo: theta - c_star * se,
                band_hi: theta + c_star * se,
            }
        })
        .collect();
    Ok(Band {
        alpha,
        scheme,
        b,
        seed,
        c_star,
        horizons,
        excluded,
    })
}
