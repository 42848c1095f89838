use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use super::{create, csv_error, csv_reader, open, parse_number, write_error};
use crate::error::{Error, Result};
use crate::panel::RegionPanel;

/// Suffix marking a sample-size column, e.g. `female:n`.
pub const SIZE_SUFFIX: &str = ":n";
/// Optional label column written by calibration; ignored on input.
pub const KIND_COLUMN: &str = "kind";

const KEY_COLUMNS: [&str; 4] = ["state_id", "region_id", "treatment", "outcome"];

pub fn load_panel(path: impl AsRef<Path>) -> Result<RegionPanel> {
    read_panel(open(path.as_ref())?)
}

/// Panel CSV: `state_id, region_id, treatment, outcome`, then covariates, with
/// optional `<covariate>:n` sample-size columns for every covariate.
pub fn read_panel<R: Read>(reader: R) -> Result<RegionPanel> {
    let mut rdr = csv_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    for (i, name) in KEY_COLUMNS.iter().enumerate() {
        if header.get(i).map(String::as_str) != Some(*name) {
            return Err(Error::Schema(format!(
                "panel column {} must be '{name}', found {:?}",
                i + 1,
                header.get(i)
            )));
        }
    }
    let mut covariates = Vec::new();
    let mut sizes: HashMap<String, usize> = HashMap::new();
    for (i, name) in header.iter().enumerate().skip(KEY_COLUMNS.len()) {
        if name == KIND_COLUMN {
            continue;
        }
        if let Some(base) = name.strip_suffix(SIZE_SUFFIX) {
            if sizes.insert(base.to_string(), i).is_some() {
                return Err(Error::Schema(format!("duplicate sample-size column '{name}'")));
            }
        } else if name.is_empty() {
            return Err(Error::Schema(format!("column {} has an empty name", i + 1)));
        } else {
            covariates.push((name.clone(), i));
        }
    }
    if covariates.is_empty() {
        return Err(Error::Schema("panel has no covariate columns".into()));
    }
    if let Some(orphan) = sizes.keys().find(|k| !covariates.iter().any(|(c, _)| c == *k)) {
        return Err(Error::Schema(format!("sample-size column for unknown covariate '{orphan}'")));
    }
    if !sizes.is_empty() && sizes.len() != covariates.len() {
        let missing: Vec<&str> = covariates
            .iter()
            .filter(|(c, _)| !sizes.contains_key(c))
            .map(|(c, _)| c.as_str())
            .collect();
        return Err(Error::Schema(format!("missing sample-size columns for: {}", missing.join(", "))));
    }

    let q = covariates.len();
    let (mut states, mut regions, mut treated, mut outcome) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut values = Vec::new();
    let mut size_values = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(csv_error)?;
        let row = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != header.len() {
            return Err(Error::Parse {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        states.push(record[0].to_string());
        regions.push(record[1].to_string());
        treated.push(match &record[2] {
            "1" | "true" | "TRUE" => true,
            "0" | "false" | "FALSE" => false,
            other => {
                return Err(Error::Parse {
                    row,
                    column: "treatment".into(),
                    message: format!("'{other}' is not 0 or 1"),
                })
            }
        });
        outcome.push(parse_number(&record[3], row, "outcome")?);
        for (name, i) in &covariates {
            values.push(parse_number(&record[*i], row, name)?);
        }
        if !sizes.is_empty() {
            for (name, _) in &covariates {
                let col = format!("{name}{SIZE_SUFFIX}");
                size_values.push(parse_number(&record[sizes[name]], row, &col)?);
            }
        }
    }
    let n = states.len();
    if n == 0 {
        return Err(Error::Schema("panel has no rows".into()));
    }
    let sample_sizes = (!sizes.is_empty()).then(|| DMatrix::from_row_slice(n, q, &size_values));
    RegionPanel::new(
        covariates.into_iter().map(|(c, _)| c).collect(),
        states,
        regions,
        treated,
        outcome,
        DMatrix::from_row_slice(n, q, &values),
        sample_sizes,
    )
}

pub fn write_panel(panel: &RegionPanel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = create(path)?;
    write_panel_to(panel, None, &mut out).map_err(|e| write_error(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Write `panel`, optionally tagging every row with a `kind` column.
pub fn write_panel_to<W: Write>(panel: &RegionPanel, kind: Option<&str>, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = KEY_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend(panel.covariate_names().iter().cloned());
    if panel.sample_sizes().is_some() {
        header.extend(panel.covariate_names().iter().map(|c| format!("{c}{SIZE_SUFFIX}")));
    }
    if kind.is_some() {
        header.push(KIND_COLUMN.into());
    }
    w.write_record(&header)?;
    let f = super::format_float;
    for i in 0..panel.len() {
        let (s, r) = panel.key(i);
        let mut rec = vec![
            s.to_string(),
            r.to_string(),
            if panel.treated()[i] { "1" } else { "0" }.to_string(),
            f(panel.outcome()[i]),
        ];
        rec.extend(panel.covariates().row(i).iter().map(|v| f(*v)));
        if let Some(sizes) = panel.sample_sizes() {
            rec.extend(sizes.row(i).iter().map(|v| f(*v)));
        }
        if let Some(k) = kind {
            rec.push(k.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_panel() {
        let p = read_panel("state_id,region_id,treatment,outcome,x\na,1,1,2.5,3\nb,1,0,1,4\n".as_bytes()).unwrap();
        assert_eq!(p.treated_indices().len(), 1);
        assert_eq!(p.control_indices().len(), 1);
        assert!(p.sample_sizes().is_none());
    }

    #[test]
    fn bad_cell_reports_row_and_column() {
        let err = read_panel("state_id,region_id,treatment,outcome,x\na,1,1,2.5,3\nb,1,0,1,abc\n".as_bytes()).unwrap_err();
        match err {
            Error::Parse { row, column, .. } => assert_eq!((row, column.as_str()), (3, "x")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mixed_treatment_names_state() {
        let err = read_panel("state_id,region_id,treatment,outcome,x\nca,1,1,2,3\nca,2,0,1,4\n".as_bytes()).unwrap_err();
        assert!(matches!(&err, Error::Integrity(m) if m.contains("ca")), "{err}");
    }

    #[test]
    fn sizes_must_cover_every_covariate() {
        let text = "state_id,region_id,treatment,outcome,x,y,x:n\na,1,1,2,3,1,10\nb,1,0,1,4,1,10\n";
        assert!(matches!(read_panel(text.as_bytes()), Err(Error::Schema(_))));
        let text = "state_id,region_id,treatment,outcome,x,x:n,kind\na,1,1,2,3,10,homogeneous\nb,1,0,1,4,20,homogeneous\n";
        let p = read_panel(text.as_bytes()).unwrap();
        assert_eq!(p.sample_sizes().unwrap()[(1, 0)], 20.0);
    }
}
