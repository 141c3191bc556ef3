use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::{Column, ColumnData, ColumnKind, Dataset};
use crate::{Error, Result};

/// Loads a headered, comma-delimited CSV. See [`read_csv`].
pub fn load_csv(path: impl AsRef<Path>, response_column: &str) -> Result<Dataset> {
    load_csv_with(path, response_column, &HashMap::new())
}

pub fn load_csv_with(
    path: impl AsRef<Path>,
    response_column: &str,
    overrides: &HashMap<String, ColumnKind>,
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_csv(file, response_column, overrides).map_err(|e| match e {
        Error::EmptyFile(_) => Error::EmptyFile(path.to_path_buf()),
        other => other,
    })
}

/// Reads a dataset from CSV text.
///
/// A column is numeric iff every non-empty cell parses as a finite decimal
/// number, otherwise it is categorical; `overrides` force a kind. Empty
/// predictor cells are missing values. Lines starting with `#` are skipped.
pub fn read_csv<R: Read>(
    reader: R,
    response_column: &str,
    overrides: &HashMap<String, ColumnKind>,
) -> Result<Dataset> {
    let (columns, response) = read_table(reader, Some(response_column), overrides)?;
    Dataset::new(columns, response.expect("response requested"), response_column)
}

/// Reads every column of a CSV as a predictor, with the typing rules of
/// [`read_csv`]. Used for prediction inputs that may lack a response.
pub fn read_predictors<R: Read>(reader: R, overrides: &HashMap<String, ColumnKind>) -> Result<Vec<Column>> {
    let (columns, _) = read_table(reader, None, overrides)?;
    if columns.first().is_none_or(|c| c.data.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    Ok(columns)
}

pub fn load_predictors(path: impl AsRef<Path>, overrides: &HashMap<String, ColumnKind>) -> Result<Vec<Column>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_predictors(file, overrides).map_err(|e| match e {
        Error::EmptyFile(_) => Error::EmptyFile(path.to_path_buf()),
        other => other,
    })
}

fn read_table<R: Read>(
    reader: R,
    response_column: Option<&str>,
    overrides: &HashMap<String, ColumnKind>,
) -> Result<(Vec<Column>, Option<Vec<f64>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyFile(Default::default()));
    }
    for name in overrides.keys() {
        if !headers.contains(name) {
            return Err(Error::UnknownColumn(name.clone()));
        }
    }
    let response_idx = response_column
        .map(|name| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingResponseColumn(name.to_string()))
        })
        .transpose()?;

    let mut cells: Vec<Vec<String>> = vec![Vec::new(); headers.len()];
    for record in rdr.records() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths {
                pos,
                expected_len,
                len,
            } => Error::RaggedRow {
                line: pos.as_ref().map_or(0, |p| p.line()),
                expected: *expected_len as usize,
                found: *len as usize,
            },
            _ => Error::Csv(e),
        })?;
        for (k, field) in record.iter().enumerate() {
            cells[k].push(field.to_string());
        }
    }

    let response = response_idx
        .map(|idx| {
            cells[idx]
                .iter()
                .enumerate()
                .map(|(row, s)| match parse_number(s) {
                    Some(v) => Ok(v),
                    None => Err(Error::NonNumericResponse {
                        row,
                        value: s.clone(),
                    }),
                })
                .collect::<Result<Vec<f64>>>()
        })
        .transpose()?;

    let mut columns = Vec::with_capacity(headers.len());
    for (k, name) in headers.iter().enumerate() {
        if Some(k) == response_idx {
            continue;
        }
        let raw = &cells[k];
        let kind = match overrides.get(name) {
            Some(kind) => *kind,
            None if raw.iter().all(|s| s.is_empty() || parse_number(s).is_some()) => ColumnKind::Numeric,
            None => ColumnKind::Categorical,
        };
        let data = match kind {
            ColumnKind::Numeric => {
                let mut values = Vec::with_capacity(raw.len());
                for (row, s) in raw.iter().enumerate() {
                    if s.is_empty() {
                        values.push(f64::NAN);
                    } else {
                        values.push(parse_number(s).ok_or_else(|| Error::NonNumericCell {
                            column: name.clone(),
                            row,
                            value: s.clone(),
                        })?);
                    }
                }
                ColumnData::Numeric(values)
            }
            ColumnKind::Categorical => ColumnData::categorical_from_strings(raw),
        };
        columns.push(Column {
            name: name.clone(),
            data,
        });
    }
    Ok((columns, response))
}

fn parse_number(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Writes predictors in column order followed by the response.
pub fn write_csv<W: Write>(dataset: &Dataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = dataset.columns().iter().map(|c| c.name.as_str()).collect();
    header.push(dataset.response_name());
    wtr.write_record(&header)?;
    let mut record: Vec<String> = Vec::with_capacity(header.len());
    for row in 0..dataset.n_rows() {
        record.clear();
        for c in dataset.columns() {
            record.push(match &c.data {
                ColumnData::Numeric(v) if v[row].is_nan() => String::new(),
                ColumnData::Numeric(v) => v[row].to_string(),
                ColumnData::Categorical { levels, codes } => codes[row]
                    .map(|code| levels[code as usize].clone())
                    .unwrap_or_default(),
            });
        }
        record.push(dataset.response()[row].to_string());
        wtr.write_record(&record)?;
    }
    wtr.flush().map_err(|e| Error::io("writing csv", e))?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_csv(dataset, std::io::BufWriter::new(file))
}
