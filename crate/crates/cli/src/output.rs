//! Result files. Every record carries the configuration hash and seed.

use std::fs;
use std::path::{Path, PathBuf};

use drlpdid::aggregation::WeightRow;
use drlpdid::inference::{Band, BandRow, Contrast};
use drlpdid::nuisance::NuisanceDiagnostics;
use drlpdid::panel::DroppedCell;
use drlpdid::simulation::{McReport, McRow};
use drlpdid::{Estimator, HorizonEstimate};
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct Provenance<'a> {
    pub config_hash: &'a str,
    pub seed: u64,
}

/// File-name stem of an estimator, e.g. `lpdid-rw-x`.
pub fn slug(e: Estimator) -> String {
    e.name().to_lowercase().replace('+', "-")
}

#[derive(Debug, Clone, Serialize)]
pub struct EventStudyRow {
    pub h: i64,
    pub theta: f64,
    pub se: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub mu1: Option<f64>,
    pub mu0: Option<f64>,
    pub n_treated: usize,
    pub n_control: usize,
}

impl EventStudyRow {
    pub fn new(est: &HorizonEstimate, band: &BandRow) -> Self {
        let finite = |v: f64| v.is_finite().then_some(v);
        Self {
            h: est.horizon,
            theta: est.theta,
            se: band.se,
            ci_lo: band.ci_lo,
            ci_hi: band.ci_hi,
            mu1: finite(est.mu1),
            mu0: finite(est.mu0),
            n_treated: est.n_treated,
            n_control: est.n_control,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonFailure {
    pub h: i64,
    pub module: &'static str,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct EventStudyFile<'a> {
    #[serde(flatten)]
    pub provenance: Provenance<'a>,
    pub estimator: Estimator,
    pub alpha: f64,
    pub n_units: usize,
    pub n_periods: usize,
    pub n_clusters: usize,
    pub horizons: Vec<EventStudyRow>,
    pub average_post: Option<Contrast>,
    pub failures: Vec<HorizonFailure>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BandFile<'a> {
    #[serde(flatten)]
    pub provenance: Provenance<'a>,
    pub estimator: Estimator,
    #[serde(flatten)]
    pub band: &'a Band,
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonDiagnostics {
    pub h: i64,
    pub n_cells: usize,
    pub dropped_cells: Vec<DroppedCell>,
    pub cell_weights: Vec<WeightRow>,
    pub nuisance: Option<NuisanceDiagnostics>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsFile<'a> {
    #[serde(flatten)]
    pub provenance: Provenance<'a>,
    pub estimator: Estimator,
    pub horizons: Vec<HorizonDiagnostics>,
    pub excluded_from_band: Vec<i64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
struct CsvEventRow<'a> {
    estimator: &'static str,
    h: i64,
    theta: f64,
    se: f64,
    ci_lo: f64,
    ci_hi: f64,
    mu1: Option<f64>,
    mu0: Option<f64>,
    n_treated: usize,
    n_control: usize,
    config_hash: &'a str,
    seed: u64,
}

#[derive(Debug, Clone, Serialize)]
struct PlotRow<'a> {
    h: i64,
    estimate: f64,
    ci_lo: f64,
    ci_hi: f64,
    band_lo: f64,
    band_hi: f64,
    config_hash: &'a str,
    seed: u64,
}

#[derive(Debug, Clone, Serialize)]
struct CsvMcRow<'a> {
    scenario: String,
    #[serde(rename = "N")]
    n_units: usize,
    delta: f64,
    estimator: &'static str,
    bias: f64,
    rmse: f64,
    coverage: f64,
    mean_se: f64,
    sd_estimate: f64,
    replications: usize,
    failures: usize,
    config_hash: &'a str,
    seed: u64,
}

impl<'a> CsvMcRow<'a> {
    fn new(r: &McRow, prov: &Provenance<'a>) -> Self {
        Self {
            scenario: r.scenario.to_string(),
            n_units: r.n_units,
            delta: r.delta,
            estimator: r.estimator.name(),
            bias: r.bias,
            rmse: r.rmse,
            coverage: r.coverage,
            mean_se: r.mean_se,
            sd_estimate: r.sd_estimate,
            replications: r.replications,
            failures: r.failures,
            config_hash: prov.config_hash,
            seed: prov.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct McReportFile<'a> {
    #[serde(flatten)]
    pub provenance: Provenance<'a>,
    #[serde(flatten)]
    pub report: &'a McReport,
}

/// Output directory that records every file it writes.
#[derive(Debug)]
pub struct OutputDir {
    dir: PathBuf,
    pub written: Vec<PathBuf>,
}

impl OutputDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let mut bytes = serde_json::to_vec_pretty(value).expect("output serializes");
        bytes.push(b'\n');
        fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    fn csv<T: Serialize>(
        &mut self,
        name: &str,
        rows: impl IntoIterator<Item = T>,
    ) -> Result<(), CliError> {
        let path = self.dir.join(name);
        let to_io = |e: csv::Error| CliError::io(&path, std::io::Error::other(e));
        let mut w = csv::Writer::from_path(&path).map_err(to_io)?;
        for r in rows {
            w.serialize(r).map_err(to_io)?;
        }
        w.flush().map_err(|e| CliError::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    pub fn event_study_csv(
        &mut self,
        name: &str,
        file: &EventStudyFile<'_>,
    ) -> Result<(), CliError> {
        let (hash, seed) = (file.provenance.config_hash, file.provenance.seed);
        let est = file.estimator.name();
        self.csv(
            name,
            file.horizons.iter().map(|r| CsvEventRow {
                estimator: est,
                h: r.h,
                theta: r.theta,
                se: r.se,
                ci_lo: r.ci_lo,
                ci_hi: r.ci_hi,
                mu1: r.mu1,
                mu0: r.mu0,
                n_treated: r.n_treated,
                n_control: r.n_control,
                config_hash: hash,
                seed,
            }),
        )
    }

    pub fn plot_csv(
        &mut self,
        name: &str,
        band: &Band,
        prov: &Provenance<'_>,
    ) -> Result<(), CliError> {
        self.csv(
            name,
            band.horizons.iter().map(|r| PlotRow {
                h: r.h,
                estimate: r.theta,
                ci_lo: r.ci_lo,
                ci_hi: r.ci_hi,
                band_lo: r.band_lo,
                band_hi: r.band_hi,
                config_hash: prov.config_hash,
                seed: prov.seed,
            }),
        )
    }

    pub fn mc_report_csv(
        &mut self,
        name: &str,
        report: &McReport,
        prov: &Provenance<'_>,
    ) -> Result<(), CliError> {
        self.csv(name, report.rows.iter().map(|r| CsvMcRow::new(r, prov)))
    }
}
