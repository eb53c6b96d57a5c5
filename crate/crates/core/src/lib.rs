//! Doubly robust local-projections difference-in-differences.
//!
//! The crate estimates horizon-specific treatment effects for staggered,
//! absorbing binary treatments on clean-control stacks:
//!
//! - [`panel`]: panels, base-period rules, long differences and stacks;
//! - [`aggregation`]: cohort cells, VW/RW aggregation and the pooled regression;
//! - [`nuisance`]: the shared basis, tilting propensity fit and outcome regressions;
//! - [`estimators`]: LPDID-RW, LPDID-RW+X, LPDID-RA, DRLPDID-IPT and DRLPDID;
//! - [`inference`]: influence functions, cluster SEs, contrasts and sup-t bands;
//! - [`simulation`]: the staggered-adoption Monte Carlo harness.

// `!(x > 0.0)` style checks are used on purpose so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod nuisance;
pub mod panel;
pub mod simulation;

pub use error::{Error, Result};
pub use estimators::{event_study, Estimator, EstimatorOptions, EventStudy, HorizonEstimate};
pub use panel::{BaseRule, EntryDate, Panel, Stack};
