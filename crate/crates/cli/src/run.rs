//! Orchestration of the three subcommands.

use std::path::{Path, PathBuf};

use drlpdid::aggregation::{cell_stats, weight_table};
use drlpdid::estimators::event_study;
use drlpdid::inference::{linear_contrast, multiplier_bootstrap, post_average_weights};
use drlpdid::nuisance::CovariateSpec;
use drlpdid::panel::build_stack;
use drlpdid::simulation::run_campaign_with;
use drlpdid::{EstimatorOptions, Panel};
use serde::Serialize;

use crate::config::{EstimateConfig, Loaded, RunConfig, SimulateConfig};
use crate::error::CliError;
use crate::ingest::{ingest_csv, IngestOptions, IngestedPanel};
use crate::output::{
    slug, BandFile, DiagnosticsFile, EventStudyFile, EventStudyRow, HorizonDiagnostics,
    HorizonFailure, McReportFile, OutputDir, Provenance,
};

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub config_hash: String,
    pub seed: u64,
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    #[serde(flatten)]
    provenance: Provenance<'a>,
    mode: &'static str,
    files: Vec<String>,
}

pub fn run(loaded: &Loaded) -> Result<RunSummary, CliError> {
    let mut out = OutputDir::create(&loaded.out_dir)?;
    let prov = Provenance {
        config_hash: &loaded.hash,
        seed: loaded.seed(),
    };
    let mode = match &loaded.config {
        RunConfig::Estimate(c) => {
            run_estimate(c, &prov, &mut out)?;
            "estimate"
        }
        RunConfig::Simulate(c) => {
            run_simulate(c, &prov, &mut out)?;
            "simulate"
        }
    };
    let files = out
        .written
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    out.json(
        "manifest.json",
        &Manifest {
            provenance: prov.clone(),
            mode,
            files,
        },
    )?;
    Ok(RunSummary {
        config_hash: loaded.hash.clone(),
        seed: loaded.seed(),
        files: out.written,
    })
}

fn estimator_options(c: &EstimateConfig) -> EstimatorOptions {
    if let Some(cap) = c.odds_cap {
        log::warn!("odds weights capped at {cap}; this departs from the uncapped estimator");
    }
    EstimatorOptions {
        covariates: CovariateSpec {
            columns: None,
            date_controls: c.date_controls,
            interactions: c.interactions,
        },
        odds_cap: c.odds_cap,
        ..Default::default()
    }
}

fn stack_diagnostics(
    panel: &Panel,
    horizons: &[i64],
    rule: &drlpdid::BaseRule,
) -> Vec<HorizonDiagnostics> {
    horizons
        .iter()
        .map(|&h| match build_stack(panel, h, rule) {
            Ok(s) => {
                let cells = cell_stats(&s);
                HorizonDiagnostics {
                    h,
                    n_cells: cells.len(),
                    dropped_cells: s.dropped.clone(),
                    cell_weights: weight_table(&cells).unwrap_or_default(),
                    nuisance: None,
                }
            }
            Err(_) => HorizonDiagnostics {
                h,
                n_cells: 0,
                dropped_cells: vec![],
                cell_weights: vec![],
                nuisance: None,
            },
        })
        .collect()
}

pub fn run_estimate(
    c: &EstimateConfig,
    prov: &Provenance<'_>,
    out: &mut OutputDir,
) -> Result<(), CliError> {
    let IngestedPanel { panel, .. } = ingest_csv(
        &c.input,
        &IngestOptions {
            covariates: c.covariates.clone(),
            cluster: c.cluster.clone(),
        },
    )?;
    let rule = c.base_rule.rule()?;
    let horizons = c.horizons.values();
    let opts = estimator_options(c);
    let bs = &c.bootstrap;
    let stacks = stack_diagnostics(&panel, &horizons, &rule);
    for cell in stacks
        .iter()
        .flat_map(|d| d.dropped_cells.iter().map(move |x| (d.h, x)))
    {
        log::warn!(
            "h = {}: dropped entry date {} ({})",
            cell.0,
            cell.1.entry_date,
            cell.1.reason
        );
    }
    for &est in &c.estimators {
        let study = event_study(&panel, &horizons, &rule, est, &opts);
        let failures: Vec<HorizonFailure> = study
            .failures
            .iter()
            .map(|(h, e)| HorizonFailure {
                h: *h,
                module: e.module(),
                error: e.to_string(),
            })
            .collect();
        if study.fits.is_empty() {
            let (_, first) = study
                .failures
                .into_iter()
                .next()
                .expect("at least one horizon requested");
            return Err(first.into());
        }
        let array = study.influence_array();
        let band = multiplier_bootstrap(&array, bs.b, bs.scheme, bs.alpha, bs.seed)?;
        let post_h: Vec<i64> = array.horizons.iter().copied().filter(|&h| h >= 0).collect();
        let average_post = if post_h.is_empty() {
            None
        } else {
            Some(linear_contrast(&array, &post_average_weights(&post_h))?)
        };
        let rows: Vec<EventStudyRow> = study
            .fits
            .iter()
            .zip(&band.horizons)
            .map(|(f, b)| EventStudyRow::new(&f.estimate, b))
            .collect();
        let name = slug(est);
        let file = EventStudyFile {
            provenance: prov.clone(),
            estimator: est,
            alpha: bs.alpha,
            n_units: panel.n_units(),
            n_periods: panel.n_periods(),
            n_clusters: panel.n_clusters(),
            horizons: rows,
            average_post,
            failures: failures.clone(),
        };
        out.json(&format!("event_study_{name}.json"), &file)?;
        out.event_study_csv(&format!("event_study_{name}.csv"), &file)?;
        out.json(
            &format!("band_{name}.json"),
            &BandFile {
                provenance: prov.clone(),
                estimator: est,
                band: &band,
            },
        )?;
        out.plot_csv(&format!("plot_{name}.csv"), &band, prov)?;
        let mut diag = stacks.clone();
        for d in &mut diag {
            d.nuisance = study.get(d.h).map(|f| f.estimate.diagnostics.clone());
        }
        let warnings = failures
            .iter()
            .map(|f| format!("h = {}: {}", f.h, f.error))
            .collect();
        out.json(
            &format!("diagnostics_{name}.json"),
            &DiagnosticsFile {
                provenance: prov.clone(),
                estimator: est,
                horizons: diag,
                excluded_from_band: band.excluded.clone(),
                warnings,
            },
        )?;
    }
    Ok(())
}

pub fn run_simulate(
    c: &SimulateConfig,
    prov: &Provenance<'_>,
    out: &mut OutputDir,
) -> Result<(), CliError> {
    let report = run_campaign_with(
        &c.design,
        &c.estimators,
        &EstimatorOptions::default(),
        c.alpha,
    )?;
    log::info!(
        "{} replications in {:.2}s",
        c.design.replications,
        report.runtime_secs
    );
    out.json(
        "mc_report.json",
        &McReportFile {
            provenance: prov.clone(),
            report: &report,
        },
    )?;
    out.mc_report_csv("mc_report.csv", &report, prov)?;
    Ok(())
}

/// Summary printed by `validate`.
#[derive(Debug, Clone, Serialize)]
pub struct PanelSummary {
    pub rows: usize,
    pub units: usize,
    pub periods: usize,
    pub first_time: i64,
    pub clusters: usize,
    pub cohorts: Vec<i64>,
    pub never_treated: usize,
    pub covariates: Vec<String>,
    pub per_period_covariates: bool,
}

pub fn validate(input: &Path, cluster: Option<String>) -> Result<PanelSummary, CliError> {
    let ing = ingest_csv(
        input,
        &IngestOptions {
            covariates: None,
            cluster,
        },
    )?;
    let p = &ing.panel;
    Ok(PanelSummary {
        rows: ing.n_rows,
        units: p.n_units(),
        periods: p.n_periods(),
        first_time: ing.first_time,
        clusters: p.n_clusters(),
        cohorts: p
            .cohorts()
            .iter()
            .map(|&g| g as i64 + ing.first_time - 1)
            .collect(),
        never_treated: p.first_treat().iter().filter(|g| g.is_never()).count(),
        covariates: p.covariate_names().to_vec(),
        per_period_covariates: ing.per_period_covariates,
    })
}
