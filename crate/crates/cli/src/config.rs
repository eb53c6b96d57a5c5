//! JSON run configuration.
//!
//! The subcommand fixes the mode; a `mode` key in the file is accepted and
//! overridden. `--seed` and `--out` override the file. Relative paths in the
//! file are resolved against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use drlpdid::inference::Multiplier;
use drlpdid::simulation::McDesign;
use drlpdid::{BaseRule, Estimator};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Estimate,
    Simulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Horizons {
    List(Vec<i64>),
    Range { min: i64, max: i64 },
}

impl Horizons {
    pub fn values(&self) -> Vec<i64> {
        match self {
            Horizons::List(v) => v.clone(),
            Horizons::Range { min, max } => (*min..=*max).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseRuleConfig {
    #[default]
    LastPre,
    MeanOfLast(usize),
    /// `(lag, weight)` pairs.
    Weighted(Vec<(usize, f64)>),
}

impl BaseRuleConfig {
    pub fn rule(&self) -> drlpdid::Result<BaseRule> {
        match self {
            BaseRuleConfig::LastPre => Ok(BaseRule::last_pre()),
            BaseRuleConfig::MeanOfLast(k) => BaseRule::mean_of_last(*k),
            BaseRuleConfig::Weighted(pairs) => BaseRule::weighted(pairs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    #[serde(rename = "B")]
    pub b: usize,
    pub scheme: Multiplier,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            b: 999,
            scheme: Multiplier::Rademacher,
            alpha: 0.05,
            seed: 1,
        }
    }
}

fn all_estimators() -> Vec<Estimator> {
    Estimator::ALL.to_vec()
}

fn yes() -> bool {
    true
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateConfig {
    pub input: PathBuf,
    #[serde(default = "all_estimators")]
    pub estimators: Vec<Estimator>,
    /// Covariate columns; all non-reserved columns when absent.
    #[serde(default)]
    pub covariates: Option<Vec<String>>,
    #[serde(default = "yes")]
    pub date_controls: bool,
    #[serde(default)]
    pub interactions: bool,
    pub horizons: Horizons,
    #[serde(default)]
    pub base_rule: BaseRuleConfig,
    #[serde(default)]
    pub cluster: Option<String>,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
    #[serde(default)]
    pub odds_cap: Option<f64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateConfig {
    #[serde(flatten)]
    pub design: McDesign,
    #[serde(default = "all_estimators")]
    pub estimators: Vec<Estimator>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunConfig {
    Estimate(EstimateConfig),
    Simulate(SimulateConfig),
}

/// A resolved configuration with its provenance hash.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub config: RunConfig,
    pub hash: String,
    pub out_dir: PathBuf,
}

impl Loaded {
    pub fn seed(&self) -> u64 {
        match &self.config {
            RunConfig::Estimate(c) => c.bootstrap.seed,
            RunConfig::Simulate(c) => c.design.seed,
        }
    }
}

pub const DEFAULT_OUT: &str = "drlpdid-out";

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn load(path: &Path, mode: Mode, overrides: &Overrides) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse(&text, base, mode, overrides)
}

/// Parses a configuration document; `base` anchors relative paths.
pub fn parse(
    text: &str,
    base: &Path,
    mode: Mode,
    overrides: &Overrides,
) -> Result<Loaded, CliError> {
    let mut value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| CliError::Config("top level must be an object".into()))?;
    if let Some(m) = obj.remove("mode") {
        let declared: Mode =
            serde_json::from_value(m).map_err(|e| CliError::Config(format!("mode: {e}")))?;
        if declared != mode {
            log::warn!("config declares mode {declared:?}; running {mode:?} as requested");
        }
    }
    let bad = |e: serde_json::Error| CliError::Config(e.to_string());
    let (config, file_out) = match mode {
        Mode::Estimate => {
            let mut c: EstimateConfig = serde_json::from_value(value).map_err(bad)?;
            c.input = resolve(base, &c.input);
            if let Some(seed) = overrides.seed {
                c.bootstrap.seed = seed;
            }
            check_estimate(&c)?;
            let out = c.out_dir.as_deref().map(|p| resolve(base, p));
            (RunConfig::Estimate(c), out)
        }
        Mode::Simulate => {
            let mut c: SimulateConfig = serde_json::from_value(value).map_err(bad)?;
            if let Some(seed) = overrides.seed {
                c.design.seed = seed;
            }
            c.design
                .validate()
                .map_err(|e| CliError::Config(e.to_string()))?;
            if c.estimators.is_empty() {
                return Err(CliError::Config("estimator list is empty".into()));
            }
            let out = c.out_dir.as_deref().map(|p| resolve(base, p));
            (RunConfig::Simulate(c), out)
        }
    };
    let out_dir = overrides
        .out
        .clone()
        .or(file_out)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let hash = config_hash(&config);
    Ok(Loaded {
        config,
        hash,
        out_dir,
    })
}

fn check_estimate(c: &EstimateConfig) -> Result<(), CliError> {
    if c.horizons.values().is_empty() {
        return Err(CliError::Config("horizon range is empty".into()));
    }
    if c.estimators.is_empty() {
        return Err(CliError::Config("estimator list is empty".into()));
    }
    c.base_rule
        .rule()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let bs = &c.bootstrap;
    if bs.b == 0 || !(bs.alpha > 0.0 && bs.alpha < 1.0) {
        return Err(CliError::Config(
            "bootstrap needs B >= 1 and alpha in (0, 1)".into(),
        ));
    }
    if c.odds_cap.is_some_and(|cap| cap.is_nan() || cap <= 0.0) {
        return Err(CliError::Config("odds_cap must be positive".into()));
    }
    Ok(())
}

/// SHA-256 of the resolved configuration (after overrides, output
/// directory excluded).
pub fn config_hash(config: &RunConfig) -> String {
    let bytes = match config {
        RunConfig::Estimate(c) => serde_json::to_vec(&(
            Mode::Estimate,
            EstimateConfig {
                out_dir: None,
                ..c.clone()
            },
        )),
        RunConfig::Simulate(c) => serde_json::to_vec(&(
            Mode::Simulate,
            SimulateConfig {
                out_dir: None,
                ..c.clone()
            },
        )),
    }
    .expect("configuration serializes");
    hex::encode(Sha256::digest(&bytes))
}
