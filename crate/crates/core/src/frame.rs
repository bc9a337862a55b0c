//! Column-oriented table shared by the estimators.
//!
//! Numeric columns store `f64` with `NaN` marking a missing value;
//! categorical columns store integer codes.

use std::collections::HashMap;
use std::io::{Read, Write};

use indexmap::IndexMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("column `{0}` not found")]
    MissingColumn(String),
    #[error("column `{name}` has {got} rows, frame has {expected}")]
    Length { name: String, got: usize, expected: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}, column `{column}`: cannot parse `{value}`")]
    Parse { row: usize, column: String, value: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Frame {
    n_rows: usize,
    numeric: IndexMap<String, Vec<f64>>,
    categorical: IndexMap<String, Vec<i64>>,
}

impl Frame {
    pub fn new(n_rows: usize) -> Self {
        Self { n_rows, ..Self::default() }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn push_numeric(&mut self, name: impl Into<String>, values: Vec<f64>) {
        let name = name.into();
        assert_eq!(values.len(), self.n_rows, "column `{name}` length mismatch");
        self.numeric.insert(name, values);
    }

    pub fn push_categorical(&mut self, name: impl Into<String>, values: Vec<i64>) {
        let name = name.into();
        assert_eq!(values.len(), self.n_rows, "column `{name}` length mismatch");
        self.categorical.insert(name, values);
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.numeric.contains_key(name) || self.categorical.contains_key(name)
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64], FrameError> {
        self.numeric
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| FrameError::MissingColumn(name.to_string()))
    }

    /// Numeric view of any column; categorical codes are converted.
    pub fn values(&self, name: &str) -> Result<Vec<f64>, FrameError> {
        if let Some(v) = self.numeric.get(name) {
            return Ok(v.clone());
        }
        self.categorical
            .get(name)
            .map(|v| v.iter().map(|&c| c as f64).collect())
            .ok_or_else(|| FrameError::MissingColumn(name.to_string()))
    }

    /// Integer codes of a column. Numeric columns are accepted when every
    /// value is integral; missing values map to `None`.
    pub fn codes(&self, name: &str) -> Result<Vec<Option<i64>>, FrameError> {
        if let Some(v) = self.categorical.get(name) {
            return Ok(v.iter().map(|&c| Some(c)).collect());
        }
        let v = self.numeric(name)?;
        Ok(v.iter().map(|&x| if x.is_finite() && x.fract() == 0.0 { Some(x as i64) } else { None }).collect())
    }

    pub fn numeric_names(&self) -> impl Iterator<Item = &str> {
        self.numeric.keys().map(String::as_str)
    }

    pub fn categorical_names(&self) -> impl Iterator<Item = &str> {
        self.categorical.keys().map(String::as_str)
    }

    /// Rows where `keep` is true, in their original order.
    pub fn filter(&self, keep: &[bool]) -> Frame {
        assert_eq!(keep.len(), self.n_rows);
        let n = keep.iter().filter(|&&k| k).count();
        let pick_f = |v: &Vec<f64>| v.iter().zip(keep).filter(|(_, &k)| k).map(|(x, _)| *x).collect();
        let pick_i = |v: &Vec<i64>| v.iter().zip(keep).filter(|(_, &k)| k).map(|(x, _)| *x).collect();
        Frame {
            n_rows: n,
            numeric: self.numeric.iter().map(|(k, v)| (k.clone(), pick_f(v))).collect(),
            categorical: self.categorical.iter().map(|(k, v)| (k.clone(), pick_i(v))).collect(),
        }
    }

    /// Reads a headered CSV. Columns listed in `categorical` become integer
    /// codes (non-numeric labels are interned in first-seen order); every
    /// other column is numeric and empty cells are missing.
    pub fn from_csv<R: Read>(reader: R, categorical: &[&str]) -> Result<Frame, FrameError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let is_cat: Vec<bool> = headers.iter().map(|h| categorical.contains(&h.as_str())).collect();
        let mut num_cols: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
        let mut cat_cols: Vec<Vec<i64>> = vec![Vec::new(); headers.len()];
        let mut labels: Vec<HashMap<String, i64>> = vec![HashMap::new(); headers.len()];
        let mut n = 0;
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            for (c, field) in record.iter().enumerate().take(headers.len()) {
                if is_cat[c] {
                    let code = match field.parse::<i64>() {
                        Ok(v) => v,
                        Err(_) => {
                            let next = -(labels[c].len() as i64) - 1;
                            *labels[c].entry(field.to_string()).or_insert(next)
                        }
                    };
                    cat_cols[c].push(code);
                } else if field.is_empty() || field.eq_ignore_ascii_case("na") {
                    num_cols[c].push(f64::NAN);
                } else {
                    let v = field.parse::<f64>().map_err(|_| FrameError::Parse {
                        row: row + 1,
                        column: headers[c].clone(),
                        value: field.to_string(),
                    })?;
                    num_cols[c].push(v);
                }
            }
            n += 1;
        }
        let mut frame = Frame::new(n);
        for (c, name) in headers.into_iter().enumerate() {
            if is_cat[c] {
                frame.push_categorical(name, std::mem::take(&mut cat_cols[c]));
            } else {
                frame.push_numeric(name, std::mem::take(&mut num_cols[c]));
            }
        }
        Ok(frame)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), FrameError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.categorical.keys().map(String::as_str).collect();
        header.extend(self.numeric.keys().map(String::as_str));
        wtr.write_record(&header)?;
        for i in 0..self.n_rows {
            let mut rec: Vec<String> = self.categorical.values().map(|v| v[i].to_string()).collect();
            rec.extend(self.numeric.values().map(|v| if v[i].is_nan() { String::new() } else { v[i].to_string() }));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}
