use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use mghl_core::trainer::MetricsRow;

use crate::CliError;

/// Appends rows to `metrics.csv`, flushing after each one.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        inner.write_record(MetricsRow::HEADER)?;
        inner.flush().map_err(|e| CliError::io(path, e))?;
        Ok(Self { inner })
    }

    pub fn push(&mut self, row: &MetricsRow) -> Result<(), CliError> {
        self.inner.serialize(row)?;
        self.inner.flush().map_err(|e| CliError::Io { path: "metrics.csv".into(), source: e })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != MetricsRow::HEADER {
        return Err(CliError::Config(format!("{}: unexpected header {header:?}", path.display())));
    }
    rdr.deserialize().map(|r| r.map_err(CliError::from)).collect()
}

/// Writes a CSV table from a header and rows of already formatted cells.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Renders `rows` as an aligned plain-text table.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec());
    for r in rows {
        line(r.iter().map(String::as_str).collect());
    }
    out
}
