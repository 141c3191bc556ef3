//! Columnar datasets, CSV ingestion and model persistence.

mod csv_io;
mod model;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use csv_io::{load_csv, load_csv_with, load_predictors, read_csv, read_predictors, save_csv, write_csv};
pub use model::{load_model, model_from_json, model_to_json, save_model, MODEL_FORMAT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

/// Storage for one predictor column. Missing numeric cells are `NaN`,
/// missing categorical cells are `None`.
#[derive(Clone, Debug)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    Categorical {
        /// Sorted, distinct category names.
        levels: Vec<String>,
        codes: Vec<Option<u32>>,
    },
}

impl PartialEq for ColumnData {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (ColumnData::Numeric(a), ColumnData::Numeric(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (
                ColumnData::Categorical { levels: la, codes: ca },
                ColumnData::Categorical { levels: lb, codes: cb },
            ) => la == lb && ca == cb,
            _ => false,
        }
    }
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn kind(&self) -> ColumnKind {
        match self {
            ColumnData::Numeric(_) => ColumnKind::Numeric,
            ColumnData::Categorical { .. } => ColumnKind::Categorical,
        }
    }

    /// Builds a categorical column from raw strings; empty strings are missing.
    pub fn categorical_from_strings<S: AsRef<str>>(cells: &[S]) -> Self {
        let levels: Vec<String> = cells
            .iter()
            .map(|c| c.as_ref())
            .filter(|c| !c.is_empty())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(str::to_string)
            .collect();
        let codes = cells
            .iter()
            .map(|c| {
                let c = c.as_ref();
                if c.is_empty() {
                    None
                } else {
                    levels
                        .binary_search_by(|l| l.as_str().cmp(c))
                        .ok()
                        .map(|i| i as u32)
                }
            })
            .collect();
        ColumnData::Categorical { levels, codes }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
}

impl Column {
    pub fn value(&self, row: usize) -> FeatureValue<'_> {
        match &self.data {
            ColumnData::Numeric(v) => {
                let x = v[row];
                if x.is_nan() {
                    FeatureValue::Missing
                } else {
                    FeatureValue::Numeric(x)
                }
            }
            ColumnData::Categorical { levels, codes } => match codes[row] {
                Some(c) => FeatureValue::Category(&levels[c as usize]),
                None => FeatureValue::Missing,
            },
        }
    }
}

/// A single predictor cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FeatureValue<'a> {
    Numeric(f64),
    Category(&'a str),
    Missing,
}

/// Predictor columns plus one real-valued response.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    columns: Vec<Column>,
    response: Vec<f64>,
    response_name: String,
}

impl Dataset {
    pub fn new(columns: Vec<Column>, response: Vec<f64>, response_name: impl Into<String>) -> Result<Self> {
        let response_name = response_name.into();
        if response.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some((row, y)) = response.iter().enumerate().find(|(_, y)| !y.is_finite()) {
            return Err(Error::NonNumericResponse {
                row,
                value: y.to_string(),
            });
        }
        let mut seen = BTreeSet::new();
        for c in &columns {
            if c.data.len() != response.len() {
                return Err(Error::SchemaMismatch(format!(
                    "column '{}' has {} rows, response has {}",
                    c.name,
                    c.data.len(),
                    response.len()
                )));
            }
            if c.name == response_name || !seen.insert(c.name.as_str()) {
                return Err(Error::SchemaMismatch(format!("duplicate column name '{}'", c.name)));
            }
            if let ColumnData::Numeric(v) = &c.data {
                if v.iter().any(|x| x.is_infinite()) {
                    return Err(Error::SchemaMismatch(format!(
                        "column '{}' has an infinite value",
                        c.name
                    )));
                }
            }
        }
        Ok(Dataset {
            columns,
            response,
            response_name,
        })
    }

    /// Dataset of numeric predictors given column-major values.
    pub fn from_numeric(
        names: &[&str],
        values: Vec<Vec<f64>>,
        response: Vec<f64>,
        response_name: &str,
    ) -> Result<Self> {
        if names.len() != values.len() {
            return Err(Error::SchemaMismatch(format!(
                "{} names for {} columns",
                names.len(),
                values.len()
            )));
        }
        let columns = names
            .iter()
            .zip(values)
            .map(|(name, v)| Column {
                name: name.to_string(),
                data: ColumnData::Numeric(v),
            })
            .collect();
        Dataset::new(columns, response, response_name)
    }

    pub fn n_rows(&self) -> usize {
        self.response.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, k: usize) -> &Column {
        &self.columns[k]
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn response(&self) -> &[f64] {
        &self.response
    }

    pub fn response_name(&self) -> &str {
        &self.response_name
    }

    pub fn value(&self, row: usize, k: usize) -> FeatureValue<'_> {
        self.columns[k].value(row)
    }

    /// All predictor cells of one row, in column order.
    pub fn row(&self, row: usize) -> Vec<FeatureValue<'_>> {
        (0..self.columns.len()).map(|k| self.value(row, k)).collect()
    }

    /// New dataset with the given rows (repetition allowed), keeping the
    /// category tables unchanged.
    pub fn take_rows(&self, rows: &[usize]) -> Dataset {
        let columns = self
            .columns
            .iter()
            .map(|c| Column {
                name: c.name.clone(),
                data: match &c.data {
                    ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&r| v[r]).collect()),
                    ColumnData::Categorical { levels, codes } => ColumnData::Categorical {
                        levels: levels.clone(),
                        codes: rows.iter().map(|&r| codes[r]).collect(),
                    },
                },
            })
            .collect();
        Dataset {
            columns,
            response: rows.iter().map(|&r| self.response[r]).collect(),
            response_name: self.response_name.clone(),
        }
    }

    /// First missing predictor cell, if any.
    pub fn first_missing(&self) -> Option<(usize, usize)> {
        for (k, c) in self.columns.iter().enumerate() {
            let row = match &c.data {
                ColumnData::Numeric(v) => v.iter().position(|x| x.is_nan()),
                ColumnData::Categorical { codes, .. } => codes.iter().position(Option::is_none),
            };
            if let Some(row) = row {
                return Some((row, k));
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn categorical_levels_are_sorted() {
        let c = ColumnData::categorical_from_strings(&["b", "a", "", "b"]);
        match c {
            ColumnData::Categorical { levels, codes } => {
                assert_eq!(levels, vec!["a", "b"]);
                assert_eq!(codes, vec![Some(1), Some(0), None, Some(1)]);
            }
            _ => panic!("expected categorical"),
        }
    }

    #[test]
    fn dataset_validation() {
        assert!(matches!(
            Dataset::from_numeric(&["x"], vec![vec![]], vec![], "y"),
            Err(Error::EmptyDataset)
        ));
        assert!(Dataset::from_numeric(&["x"], vec![vec![1.0]], vec![1.0, 2.0], "y").is_err());
        assert!(Dataset::from_numeric(&["y"], vec![vec![1.0]], vec![1.0], "y").is_err());
        assert!(Dataset::from_numeric(&["x"], vec![vec![1.0]], vec![f64::NAN], "y").is_err());
    }

    #[test]
    fn take_rows_repeats() {
        let ds = Dataset::from_numeric(&["x"], vec![vec![1.0, 2.0, 3.0]], vec![10.0, 20.0, 30.0], "y").unwrap();
        let t = ds.take_rows(&[2, 2, 0]);
        assert_eq!(t.response(), &[30.0, 30.0, 10.0]);
        assert_eq!(t.value(1, 0), FeatureValue::Numeric(3.0));
    }
}
