//! Long-format CSV panels.
//!
//! Expected columns: `unit_id`, `time`, `outcome`, `first_treat` (empty for
//! never-treated units), an optional cluster column, and covariates. Times
//! must be integers forming a balanced grid; they are mapped to periods
//! `1..=T` starting at the earliest time in the file. Row numbers in errors
//! are file line numbers (the header is line 1).

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use drlpdid::panel::Covariates;
use drlpdid::{EntryDate, Panel};
use nalgebra::DMatrix;
use thiserror::Error;

pub const UNIT: &str = "unit_id";
pub const TIME: &str = "time";
pub const OUTCOME: &str = "outcome";
pub const FIRST_TREAT: &str = "first_treat";
pub const CLUSTER: &str = "cluster";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("cannot open {path}: {source}")]
    Open {
        path: String,
        source: std::io::Error,
    },
    #[error("missing required column `{0}`")]
    MissingColumn(String),
    #[error("configured column `{0}` is not in the input")]
    UnknownColumn(String),
    #[error("input has no data rows")]
    Empty,
    #[error("row {row}: `{value}` in column `{column}` is not an integer")]
    NonInteger {
        row: u64,
        column: String,
        value: String,
    },
    #[error("row {row}: `{value}` in column `{column}` is not a finite number")]
    NonNumeric {
        row: u64,
        column: String,
        value: String,
    },
    #[error("row {row}: duplicate observation for unit `{unit}` at time {time}")]
    DuplicateObservation { row: u64, unit: String, time: i64 },
    #[error("row {row}: unit `{unit}` has no observation at time {time}")]
    Gap { row: u64, unit: String, time: i64 },
    #[error("row {row}: first_treat {value} is outside the sample times {min}..={max}")]
    InvalidEntryDate {
        row: u64,
        value: i64,
        min: i64,
        max: i64,
    },
    #[error("row {row}: `{column}` changes within unit `{unit}`")]
    InconsistentUnitValue {
        row: u64,
        unit: String,
        column: String,
    },
    #[error(transparent)]
    Panel(#[from] drlpdid::Error),
}

impl IngestError {
    /// Errors caused by the configuration rather than the file.
    pub fn is_config(&self) -> bool {
        matches!(self, IngestError::UnknownColumn(_))
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Covariate columns to load; `None` loads every non-reserved column.
    pub covariates: Option<Vec<String>>,
    /// Cluster column; defaults to `cluster` when present, else units.
    pub cluster: Option<String>,
}

#[derive(Debug, Clone)]
pub struct IngestedPanel {
    pub panel: Panel,
    /// Calendar time of period 1.
    pub first_time: i64,
    pub n_rows: usize,
    pub per_period_covariates: bool,
}

pub fn ingest_csv(path: &Path, opts: &IngestOptions) -> Result<IngestedPanel, IngestError> {
    let file = File::open(path).map_err(|source| IngestError::Open {
        path: path.display().to_string(),
        source,
    })?;
    ingest_reader(file, opts)
}

struct UnitMeta {
    first_row: u64,
    /// Row and value of the first non-empty `first_treat`.
    first_treat: Option<(u64, i64)>,
    cluster: String,
}

struct Obs {
    row: u64,
    unit: usize,
    time: i64,
    outcome: f64,
    covs: Vec<f64>,
}

fn parse_int(row: u64, column: &str, raw: &str) -> Result<i64, IngestError> {
    raw.trim().parse().map_err(|_| IngestError::NonInteger {
        row,
        column: column.into(),
        value: raw.into(),
    })
}

fn parse_num(row: u64, column: &str, raw: &str) -> Result<f64, IngestError> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| IngestError::NonNumeric {
            row,
            column: column.into(),
            value: raw.into(),
        })
}

pub fn ingest_reader<R: Read>(
    reader: R,
    opts: &IngestOptions,
) -> Result<IngestedPanel, IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let required = |name: &str| find(name).ok_or_else(|| IngestError::MissingColumn(name.into()));
    let (c_unit, c_time, c_out) = (required(UNIT)?, required(TIME)?, required(OUTCOME)?);
    let c_first = find(FIRST_TREAT);
    let c_cluster = match &opts.cluster {
        Some(name) => Some(find(name).ok_or_else(|| IngestError::UnknownColumn(name.clone()))?),
        None => find(CLUSTER),
    };
    let reserved = [Some(c_unit), Some(c_time), Some(c_out), c_first, c_cluster];
    let cov_cols: Vec<usize> = match &opts.covariates {
        Some(names) => names
            .iter()
            .map(|n| find(n).ok_or_else(|| IngestError::UnknownColumn(n.clone())))
            .collect::<Result<_, _>>()?,
        None => (0..headers.len())
            .filter(|c| !reserved.contains(&Some(*c)))
            .collect(),
    };
    let cov_names: Vec<String> = cov_cols.iter().map(|&c| headers[c].to_string()).collect();

    let mut unit_index: HashMap<String, usize> = HashMap::new();
    let mut unit_labels: Vec<String> = Vec::new();
    let mut unit_meta: Vec<UnitMeta> = Vec::new();
    let mut obs: Vec<Obs> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        let label = record[c_unit].to_string();
        let time = parse_int(row, TIME, &record[c_time])?;
        let outcome = parse_num(row, OUTCOME, &record[c_out])?;
        let first = match c_first.map(|c| &record[c]) {
            None | Some("") => None,
            Some(raw) => Some(parse_int(row, FIRST_TREAT, raw)?),
        };
        let cluster = c_cluster.map_or_else(|| label.clone(), |c| record[c].to_string());
        let covs = cov_cols
            .iter()
            .map(|&c| parse_num(row, headers.get(c).unwrap_or(""), &record[c]))
            .collect::<Result<_, _>>()?;
        let unit = *unit_index.entry(label.clone()).or_insert_with(|| {
            unit_labels.push(label.clone());
            unit_meta.push(UnitMeta {
                first_row: row,
                first_treat: first.map(|f| (row, f)),
                cluster: cluster.clone(),
            });
            unit_labels.len() - 1
        });
        let meta = &unit_meta[unit];
        if meta.first_treat.map(|(_, f)| f) != first {
            return Err(IngestError::InconsistentUnitValue {
                row,
                unit: label,
                column: FIRST_TREAT.into(),
            });
        }
        if meta.cluster != cluster {
            let column = c_cluster.map_or(CLUSTER.to_string(), |c| headers[c].to_string());
            return Err(IngestError::InconsistentUnitValue {
                row,
                unit: label,
                column,
            });
        }
        obs.push(Obs {
            row,
            unit,
            time,
            outcome,
            covs,
        });
    }
    if obs.is_empty() {
        return Err(IngestError::Empty);
    }

    let times: BTreeSet<i64> = obs.iter().map(|o| o.time).collect();
    let (t_min, t_max) = (*times.first().unwrap(), *times.last().unwrap());
    let n_periods = (t_max - t_min + 1) as usize;
    let n_units = unit_labels.len();
    let k = cov_cols.len();
    let mut filled: Vec<Option<u64>> = vec![None; n_units * n_periods];
    let mut y = DMatrix::from_element(n_units, n_periods, f64::NAN);
    let mut x: Vec<DMatrix<f64>> = vec![DMatrix::zeros(n_periods, k); n_units];
    for o in &obs {
        let s = (o.time - t_min) as usize;
        let slot = &mut filled[o.unit * n_periods + s];
        if slot.is_some() {
            return Err(IngestError::DuplicateObservation {
                row: o.row,
                unit: unit_labels[o.unit].clone(),
                time: o.time,
            });
        }
        *slot = Some(o.row);
        y[(o.unit, s)] = o.outcome;
        for (j, v) in o.covs.iter().enumerate() {
            x[o.unit][(s, j)] = *v;
        }
    }
    for (i, label) in unit_labels.iter().enumerate() {
        for s in 0..n_periods {
            if filled[i * n_periods + s].is_none() {
                // point at the unit's next observed row, else its first row
                let row = (s + 1..n_periods)
                    .find_map(|r| filled[i * n_periods + r])
                    .unwrap_or(unit_meta[i].first_row);
                return Err(IngestError::Gap {
                    row,
                    unit: label.clone(),
                    time: t_min + s as i64,
                });
            }
        }
    }

    let first_treat: Vec<EntryDate> = unit_meta
        .iter()
        .map(|m| match m.first_treat {
            None => Ok(EntryDate::Never),
            Some((row, f)) if f < t_min || f > t_max => Err(IngestError::InvalidEntryDate {
                row,
                value: f,
                min: t_min,
                max: t_max,
            }),
            Some((_, f)) => Ok(EntryDate::Period((f - t_min + 1) as usize)),
        })
        .collect::<Result<_, _>>()?;

    let varying = x.iter().any(|m| m.row_iter().any(|r| r != m.row(0)));
    let covariates = if varying {
        log::info!("covariates vary within units; using per-period values read at t - 1");
        Covariates::PerPeriod(x)
    } else {
        Covariates::Static(DMatrix::from_fn(n_units, k, |i, j| x[i][(0, j)]))
    };
    let clusters: Vec<String> = unit_meta.into_iter().map(|m| m.cluster).collect();
    let panel = Panel::with_covariates(y, first_treat, covariates)?
        .with_covariate_names(cov_names)?
        .with_unit_labels(unit_labels)?
        .with_cluster_labels(clusters)?;
    Ok(IngestedPanel {
        panel,
        first_time: t_min,
        n_rows: obs.len(),
        per_period_covariates: varying,
    })
}

/// Writes `panel` in the long format read by [`ingest_reader`]. Floats use
/// the shortest representation that parses back to the same value.
pub fn write_panel_csv<W: Write>(panel: &Panel, first_time: i64, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![
        UNIT.to_string(),
        TIME.into(),
        OUTCOME.into(),
        FIRST_TREAT.into(),
        CLUSTER.into(),
    ];
    header.extend(panel.covariate_names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..panel.n_units() {
        let first = panel
            .entry_date(i)
            .period()
            .map_or(String::new(), |p| (p as i64 + first_time - 1).to_string());
        let cluster = &panel.cluster_labels()[panel.cluster_of(i)];
        for s in 1..=panel.n_periods() {
            let mut rec = vec![
                panel.unit_labels()[i].clone(),
                (s as i64 + first_time - 1).to_string(),
                panel.outcome(i, s).to_string(),
                first.clone(),
                cluster.clone(),
            ];
            // covariate_row reads period t - 1 for an entry date t
            rec.extend(panel.covariate_row(i, s + 1).iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
