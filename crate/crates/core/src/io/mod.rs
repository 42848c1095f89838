//! File formats, report emission and command dispatch.

mod bundle;
mod command;
mod config;
mod panel;
mod replicates;
mod report;

pub use bundle::{load_covariance_bundle, parse_covariance_bundle, write_covariance_bundle, CovarianceBundle, RegionNoise};
pub use command::{run_command, Command, EstimateArgs, ReportBundle, RunConfig, ValidateArgs};
pub use config::{load_grid, load_tolerances, parse_grid, read_tolerances};
pub use panel::{load_panel, read_panel, write_panel, write_panel_to, KIND_COLUMN, SIZE_SUFFIX};
pub use replicates::{load_replicates, read_replicates_long, REPLICATE_INDEX_COLUMN};
pub use report::{
    format_float, write_balance, write_estimate, write_folds, write_metrics, write_placebo, write_state_summary,
    write_weights, EstimateReport,
};

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_reader<R: std::io::Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader)
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        row,
        column: String::new(),
        message: e.to_string(),
    }
}

pub(crate) fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64> {
    let value: f64 = cell.parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("'{cell}' is not a number"),
    })?;
    if !value.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("'{cell}' is not finite"),
        });
    }
    Ok(value)
}

pub(crate) fn write_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}
