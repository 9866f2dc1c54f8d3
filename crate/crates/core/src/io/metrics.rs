//! Comma-separated metric tables: one header row, then one row per logged
//! step. Every row is flushed as soon as it is written.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}

/// Formats a value so that parsing it back gives the same bits.
pub fn format_value(v: f64) -> String {
    format!("{v:?}")
}

pub struct MetricsWriter {
    path: PathBuf,
    width: usize,
    out: csv::Writer<File>,
}

impl MetricsWriter {
    /// Creates (or truncates) `path` and writes the header.
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.into(),
            width: header.len(),
            out: csv::Writer::from_writer(file),
        };
        w.write(header)?;
        Ok(w)
    }

    /// Reopens an existing table for appending after dropping every row whose
    /// first column exceeds `keep_through`.
    pub fn resume(path: &Path, header: &[&str], keep_through: f64) -> Result<Self> {
        let table = read_table(path)?;
        if table.header != header {
            return Err(Error::InvalidInput(format!(
                "{}: header {:?} does not match {:?}",
                path.display(),
                table.header,
                header
            )));
        }
        let mut w = Self::create(path, header)?;
        for row in table.raw.iter().zip(&table.rows) {
            if row.1[0] <= keep_through {
                w.write(row.0)?;
            }
        }
        Ok(w)
    }

    fn write<S: AsRef<[u8]>>(&mut self, fields: &[S]) -> Result<()> {
        self.out.write_record(fields).map_err(|e| csv_error(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn append(&mut self, fields: &[String]) -> Result<()> {
        if fields.len() != self.width {
            return Err(Error::shape("metrics row", self.width, fields.len()));
        }
        self.write(fields)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// A numeric table read back from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    raw: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let file = OpenOptions::new().read(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    let mut raw = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let values = record
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| {
                    Error::InvalidInput(format!("{}: row {}: `{f}` is not a number", path.display(), line + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(values);
        raw.push(record.iter().map(str::to_string).collect());
    }
    Ok(Table { header, rows, raw })
}
