use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use super::{csv_error, csv_reader, open, parse_number, SIZE_SUFFIX};
use crate::calibration::ReplicateSet;
use crate::error::{Error, Result};

/// Column holding the replicate number in the single-file layout.
pub const REPLICATE_INDEX_COLUMN: &str = "replicate_index";

const IGNORED: [&str; 3] = ["treatment", "outcome", "kind"];

type Key = (String, String);

struct Table {
    names: Vec<String>,
    rows: Vec<(Key, Vec<f64>)>,
}

/// Replicate estimates from either one long CSV with a `replicate_index`
/// column or a glob matching one CSV per replicate (sorted by path).
pub fn load_replicates(spec: &str) -> Result<ReplicateSet> {
    let path = Path::new(spec);
    if path.is_file() {
        let mut text = String::new();
        open(path)?
            .read_to_string(&mut text)
            .map_err(|e| Error::io(path, e))?;
        let first = text.lines().next().unwrap_or("");
        if first.split(',').any(|c| c.trim() == REPLICATE_INDEX_COLUMN) {
            return read_replicates_long(text.as_bytes());
        }
    }
    let mut paths: Vec<PathBuf> = glob::glob(spec)
        .map_err(|e| Error::Schema(format!("bad replicate pattern '{spec}': {e}")))?
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::io(e.path().to_path_buf(), e.into()))?;
    paths.sort();
    if paths.is_empty() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no replicate files match"),
        ));
    }
    let tables = paths
        .iter()
        .map(|p| read_table(open(p)?, false).map(|(t, _)| t))
        .collect::<Result<Vec<_>>>()?;
    assemble(tables)
}

/// Single-file layout: `replicate_index, state_id, region_id, covariates...`.
pub fn read_replicates_long<R: Read>(reader: R) -> Result<ReplicateSet> {
    let (table, index) = read_table(reader, true)?;
    let mut groups: BTreeMap<i64, Vec<(Key, Vec<f64>)>> = BTreeMap::new();
    for (row, b) in table.rows.into_iter().zip(index) {
        groups.entry(b).or_default().push(row);
    }
    let tables = groups
        .into_values()
        .map(|rows| Table {
            names: table.names.clone(),
            rows,
        })
        .collect();
    assemble(tables)
}

fn read_table<R: Read>(reader: R, long: bool) -> Result<(Table, Vec<i64>)> {
    let mut rdr = csv_reader(reader);
    let header: Vec<String> = rdr.headers().map_err(csv_error)?.iter().map(str::to_string).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("replicate file lacks column '{name}'")))
    };
    let (state_col, region_col) = (find("state_id")?, find("region_id")?);
    let index_col = if long { Some(find(REPLICATE_INDEX_COLUMN)?) } else { None };
    let value_cols: Vec<usize> = (0..header.len())
        .filter(|&i| {
            i != state_col
                && i != region_col
                && Some(i) != index_col
                && header[i] != REPLICATE_INDEX_COLUMN
                && !IGNORED.contains(&header[i].as_str())
                && !header[i].ends_with(SIZE_SUFFIX)
        })
        .collect();
    if value_cols.is_empty() {
        return Err(Error::Schema("replicate file has no covariate columns".into()));
    }
    let names: Vec<String> = value_cols.iter().map(|&i| header[i].clone()).collect();
    let mut rows = Vec::new();
    let mut index = Vec::new();
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
        if let Some(c) = index_col {
            let b: i64 = record[c].parse().map_err(|_| Error::Parse {
                row,
                column: REPLICATE_INDEX_COLUMN.into(),
                message: format!("'{}' is not an integer", &record[c]),
            })?;
            index.push(b);
        }
        let values = value_cols
            .iter()
            .map(|&i| parse_number(&record[i], row, &header[i]))
            .collect::<Result<Vec<_>>>()?;
        rows.push(((record[state_col].to_string(), record[region_col].to_string()), values));
    }
    Ok((Table { names, rows }, index))
}

/// Align every table to the key order of the first one.
fn assemble(tables: Vec<Table>) -> Result<ReplicateSet> {
    let first = tables
        .first()
        .ok_or_else(|| Error::Schema("no replicates found".into()))?;
    let names = first.names.clone();
    let keys: Vec<Key> = first.rows.iter().map(|(k, _)| k.clone()).collect();
    if keys.is_empty() {
        return Err(Error::Schema("replicate 1 has no rows".into()));
    }
    let q = names.len();
    let mut matrices = Vec::with_capacity(tables.len());
    for (b, table) in tables.iter().enumerate() {
        if table.names != names {
            return Err(Error::Schema(format!(
                "replicate {} has columns {:?}, expected {:?}",
                b + 1,
                table.names,
                names
            )));
        }
        let mut index: HashMap<&Key, usize> = HashMap::new();
        for (pos, (key, _)) in table.rows.iter().enumerate() {
            if index.insert(key, pos).is_some() {
                return Err(Error::Schema(format!(
                    "replicate {} repeats key ({}, {})",
                    b + 1,
                    key.0,
                    key.1
                )));
            }
        }
        let missing: Vec<String> = keys
            .iter()
            .filter(|k| !index.contains_key(k))
            .map(|(s, r)| format!("({s}, {r})"))
            .collect();
        let extra: Vec<String> = table
            .rows
            .iter()
            .filter(|(k, _)| !keys.contains(k))
            .map(|((s, r), _)| format!("({s}, {r})"))
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::Schema(format!(
                "replicate {} keys differ from replicate 1; missing: [{}], unexpected: [{}]",
                b + 1,
                missing.join(", "),
                extra.join(", ")
            )));
        }
        let mut m = DMatrix::zeros(keys.len(), q);
        for (i, key) in keys.iter().enumerate() {
            let values = &table.rows[index[key]].1;
            for j in 0..q {
                m[(i, j)] = values[j];
            }
        }
        matrices.push(m);
    }
    ReplicateSet::new(names, keys, matrices)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_format_counts_replicates() {
        let mut text = String::from("replicate_index,state_id,region_id,x\n");
        for b in 1..=80 {
            text.push_str(&format!("{b},a,1,{b}\n{b},b,1,0.5\n"));
        }
        let set = read_replicates_long(text.as_bytes()).unwrap();
        assert_eq!(set.count(), 80);
        assert_eq!(set.replicates()[79][(0, 0)], 80.0);
    }

    #[test]
    fn shuffled_rows_align_by_key() {
        let text = "replicate_index,state_id,region_id,x\n1,a,1,1\n1,b,1,2\n2,b,1,4\n2,a,1,3\n";
        let set = read_replicates_long(text.as_bytes()).unwrap();
        assert_eq!(set.replicates()[1][(0, 0)], 3.0);
        assert_eq!(set.replicates()[1][(1, 0)], 4.0);
    }

    #[test]
    fn missing_key_is_listed() {
        let text = "replicate_index,state_id,region_id,x\n1,a,1,1\n1,b,1,2\n2,a,1,3\n";
        let err = read_replicates_long(text.as_bytes()).unwrap_err();
        assert!(matches!(&err, Error::Schema(m) if m.contains("(b, 1)")), "{err}");
    }
}
