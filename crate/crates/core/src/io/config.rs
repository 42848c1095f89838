use std::io::Read;
use std::path::Path;

use super::{csv_error, csv_reader, open};
use crate::balancing::{Tier, ToleranceSpec};
use crate::error::{Error, Result};
use crate::simulation::StudyGrid;

/// Covariate name that sets the fallback tolerance.
const DEFAULT_KEY: &str = "*";

pub fn load_tolerances(path: impl AsRef<Path>) -> Result<ToleranceSpec> {
    read_tolerances(open(path.as_ref())?)
}

/// `covariate,tolerance` rows; the tolerance is a number or a tier name, and
/// the covariate `*` sets the default.
pub fn read_tolerances<R: Read>(reader: R) -> Result<ToleranceSpec> {
    let mut rdr = csv_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    if header != ["covariate", "tolerance"] {
        return Err(Error::Schema(format!(
            "tolerance file header must be 'covariate,tolerance', found {header:?}"
        )));
    }
    let mut spec = ToleranceSpec::new();
    let mut seen = std::collections::HashSet::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != 2 {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected 2 fields, found {}", record.len()),
            });
        }
        let name = &record[0];
        if name.is_empty() {
            return Err(Error::Parse {
                row,
                column: "covariate".into(),
                message: "empty covariate name".into(),
            });
        }
        if !seen.insert(name.to_string()) {
            return Err(Error::Schema(format!("tolerance for '{name}' given twice")));
        }
        let delta = match record[1].parse::<f64>() {
            Ok(v) => v,
            Err(_) => record[1].parse::<Tier>().map(|t| t.delta()).map_err(|_| Error::Parse {
                row,
                column: "tolerance".into(),
                message: format!("'{}' is neither a number nor a tier", &record[1]),
            })?,
        };
        if delta.is_nan() || delta < 0.0 {
            return Err(Error::Parse {
                row,
                column: "tolerance".into(),
                message: format!("tolerance must be nonnegative, got {delta}"),
            });
        }
        if name == DEFAULT_KEY {
            spec = spec.with_default(delta);
        } else {
            spec.set(name, delta)?;
        }
    }
    Ok(spec)
}

pub fn load_grid(path: impl AsRef<Path>) -> Result<StudyGrid> {
    let path = path.as_ref();
    let mut text = String::new();
    open(path)?.read_to_string(&mut text).map_err(|e| Error::io(path, e))?;
    parse_grid(&text)
}

/// TOML grid; every key is optional and defaults to the full design.
pub fn parse_grid(text: &str) -> Result<StudyGrid> {
    let grid: StudyGrid = toml::from_str(text).map_err(|e| {
        let row = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        Error::Parse {
            row,
            column: String::new(),
            message: e.message().to_string(),
        }
    })?;
    grid.validate()?;
    Ok(grid)
}
