//! Longitudinal dataset container and CSV ingestion.
//!
//! CSV layout: a header row with the required columns `subject_id` and `y`,
//! an optional `time` column, and any number of numeric covariate columns.
//! Rows are grouped by `subject_id` in order of first appearance; within a
//! subject the file order is kept.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// One subject (cluster) of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    pub y: DVector<f64>,
    pub times: Option<Vec<f64>>,
    /// `n_i × n_cov`, columns ordered as [`LongitudinalDataset::covariate_names`].
    pub covariates: DMatrix<f64>,
}

impl Subject {
    pub fn n_obs(&self) -> usize {
        self.y.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    pub covariate_names: Vec<String>,
    pub subjects: Vec<Subject>,
}

impl LongitudinalDataset {
    pub fn new(covariate_names: Vec<String>, subjects: Vec<Subject>) -> Result<Self> {
        let ds = LongitudinalDataset {
            covariate_names,
            subjects,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::InvalidInput("dataset has no subjects".into()));
        }
        let ncov = self.covariate_names.len();
        for s in &self.subjects {
            let ni = s.y.len();
            if ni == 0 {
                return Err(Error::InvalidInput(format!("subject `{}` has no observations", s.id)));
            }
            if s.covariates.nrows() != ni || s.covariates.ncols() != ncov {
                return Err(Error::DimensionMismatch(format!(
                    "subject `{}`: covariates are {}x{}, expected {}x{}",
                    s.id,
                    s.covariates.nrows(),
                    s.covariates.ncols(),
                    ni,
                    ncov
                )));
            }
            if let Some(t) = &s.times {
                if t.len() != ni {
                    return Err(Error::DimensionMismatch(format!(
                        "subject `{}`: {} times for {} observations",
                        s.id,
                        t.len(),
                        ni
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(Subject::n_obs).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.subjects.iter().map(Subject::n_obs).collect()
    }

    /// Starting row of each subject in the stacked (subject-major) layout.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.subjects
            .iter()
            .map(|s| {
                let o = acc;
                acc += s.n_obs();
                o
            })
            .collect()
    }

    pub fn covariate_index(&self, name: &str) -> Result<usize> {
        self.covariate_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingCovariate(name.to_string()))
    }

    /// Stacked response vector `Y`.
    pub fn response(&self) -> DVector<f64> {
        let mut y = DVector::zeros(self.n_obs());
        let mut row = 0;
        for s in &self.subjects {
            y.rows_mut(row, s.n_obs()).copy_from(&s.y);
            row += s.n_obs();
        }
        y
    }

    /// Stacked values of one covariate.
    pub fn covariate_column(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.covariate_index(name)?;
        Ok(self
            .subjects
            .iter()
            .flat_map(|s| s.covariates.column(j).iter().copied().collect::<Vec<_>>())
            .collect())
    }

    /// Stacked observation times; errors when any subject lacks them.
    pub fn time_column(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.n_obs());
        for s in &self.subjects {
            match &s.times {
                Some(t) => out.extend_from_slice(t),
                None => return Err(Error::MissingCovariate("time".into())),
            }
        }
        Ok(out)
    }

    /// Copy with every response replaced, keeping subject structure.
    pub fn with_response(&self, y: &DVector<f64>) -> Result<Self> {
        if y.len() != self.n_obs() {
            return Err(Error::DimensionMismatch(format!(
                "response has {} entries, dataset has {} observations",
                y.len(),
                self.n_obs()
            )));
        }
        let mut out = self.clone();
        let mut row = 0;
        for s in &mut out.subjects {
            let ni = s.n_obs();
            s.y.copy_from(&y.rows(row, ni));
            row += ni;
        }
        Ok(out)
    }

    /// Subset by subject indices (repeats allowed, as in a cluster bootstrap).
    pub fn select_subjects(&self, idx: &[usize]) -> Self {
        LongitudinalDataset {
            covariate_names: self.covariate_names.clone(),
            subjects: idx.iter().map(|&i| self.subjects[i].clone()).collect(),
        }
    }

    /// Drop subjects with fewer than `min_obs` observations; returns the number dropped.
    pub fn filter_min_obs(&mut self, min_obs: usize) -> usize {
        let before = self.subjects.len();
        self.subjects.retain(|s| s.n_obs() >= min_obs);
        before - self.subjects.len()
    }

    pub fn has_times(&self) -> bool {
        self.subjects.iter().all(|s| s.times.is_some())
    }
}

/// Result of reading a CSV file.
#[derive(Debug, Clone)]
pub struct ParsedDataset {
    pub dataset: LongitudinalDataset,
    pub dropped_subjects: usize,
}

pub fn parse_dataset(path: impl AsRef<Path>, min_obs: usize) -> Result<ParsedDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    parse_dataset_from_reader(file, min_obs)
}

pub fn parse_dataset_from_reader<R: Read>(reader: R, min_obs: usize) -> Result<ParsedDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);
    let id_col = find("subject_id")
        .ok_or_else(|| Error::InvalidInput("missing required column `subject_id`".into()))?;
    let y_col = find("y").ok_or_else(|| Error::InvalidInput("missing required column `y`".into()))?;
    let time_col = find("time");
    let cov_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| c != id_col && c != y_col && Some(c) != time_col)
        .collect();
    let covariate_names: Vec<String> = cov_cols.iter().map(|&c| headers[c].clone()).collect();

    struct Acc {
        y: Vec<f64>,
        t: Vec<f64>,
        x: Vec<f64>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Acc> = HashMap::new();
    let parse = |s: &str, what: &str, line: usize| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Parse(format!("line {line}: non-numeric {what} `{s}`")))
    };
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let id = rec.get(id_col).unwrap_or("").trim().to_string();
        let y = parse(rec.get(y_col).unwrap_or(""), "y", line)?;
        let acc = groups.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Acc {
                y: Vec::new(),
                t: Vec::new(),
                x: Vec::new(),
            }
        });
        acc.y.push(y);
        if let Some(tc) = time_col {
            acc.t.push(parse(rec.get(tc).unwrap_or(""), "time", line)?);
        }
        for &c in &cov_cols {
            acc.x.push(parse(rec.get(c).unwrap_or(""), &headers[c], line)?);
        }
    }
    if order.is_empty() {
        return Err(Error::InvalidInput("empty file".into()));
    }
    let ncov = cov_cols.len();
    let subjects = order
        .into_iter()
        .map(|id| {
            let acc = groups.remove(&id).expect("group exists");
            let ni = acc.y.len();
            Subject {
                id,
                y: DVector::from_vec(acc.y),
                times: time_col.map(|_| acc.t),
                covariates: DMatrix::from_row_slice(ni, ncov, &acc.x),
            }
        })
        .collect();
    let mut dataset = LongitudinalDataset::new(covariate_names, subjects)?;
    let dropped_subjects = dataset.filter_min_obs(min_obs);
    if dataset.subjects.is_empty() {
        return Err(Error::InvalidInput("no subjects left after --min-obs filter".into()));
    }
    Ok(ParsedDataset {
        dataset,
        dropped_subjects,
    })
}

pub fn write_dataset<W: Write>(dataset: &LongitudinalDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let with_time = dataset.has_times();
    let mut header = vec!["subject_id".to_string(), "y".to_string()];
    if with_time {
        header.push("time".into());
    }
    header.extend(dataset.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for s in &dataset.subjects {
        for j in 0..s.n_obs() {
            let mut rec = vec![s.id.clone(), s.y[j].to_string()];
            if let (true, Some(t)) = (with_time, &s.times) {
                rec.push(t[j].to_string());
            }
            rec.extend(s.covariates.row(j).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
