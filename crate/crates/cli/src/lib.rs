//! Command-line front end for `drlpdid`: CSV ingestion, JSON run
//! configuration, and result files for event studies and Monte Carlo
//! campaigns.

pub mod config;
pub mod error;
pub mod ingest;
pub mod output;
pub mod run;

pub use config::{load, Loaded, Mode, Overrides, RunConfig};
pub use error::CliError;
pub use ingest::{ingest_csv, ingest_reader, write_panel_csv, IngestError, IngestOptions};
pub use run::run as run_config;
