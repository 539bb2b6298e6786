//! CSV input and output.
//!
//! Dialect: comma separator, `.` decimal point, optional single header row,
//! empty field = missing value. Parse errors name the offending line.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// A parsed CSV table of optional numeric cells.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub cells: Vec<Vec<Option<f64>>>,
    pub header: Option<Vec<String>>,
}

impl CsvTable {
    pub fn nrows(&self) -> usize {
        self.cells.len()
    }

    pub fn ncols(&self) -> usize {
        self.cells.first().map_or(0, |r| r.len())
    }

    /// Dense matrix; any missing cell is an error.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let (n, p) = (self.nrows(), self.ncols());
        let mut out = DMatrix::zeros(n, p);
        for (i, row) in self.cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                out[(i, j)] = cell.ok_or_else(|| {
                    Error::Io(format!("missing value at row {}, column {}", i + 1, j + 1))
                })?;
            }
        }
        Ok(out)
    }

    /// Matrix plus row-major observed mask; missing cells become 0.0.
    pub fn to_matrix_with_mask(&self) -> (DMatrix<f64>, Vec<bool>) {
        let (n, p) = (self.nrows(), self.ncols());
        let mut out = DMatrix::zeros(n, p);
        let mut mask = vec![false; n * p];
        for (i, row) in self.cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                if let Some(v) = cell {
                    out[(i, j)] = *v;
                    mask[i * p + j] = true;
                }
            }
        }
        (out, mask)
    }

    /// The column indices that are observed in every row. Errors unless the
    /// missing-column set is identical across rows.
    pub fn shared_observed_columns(&self) -> Result<Vec<usize>> {
        let p = self.ncols();
        let observed: Vec<usize> = (0..p)
            .filter(|&j| self.cells.iter().all(|row| row[j].is_some()))
            .collect();
        for (i, row) in self.cells.iter().enumerate() {
            for (j, cell) in row.iter().enumerate() {
                let expected = observed.contains(&j);
                if cell.is_some() != expected {
                    return Err(Error::Io(format!(
                        "row {} breaks the shared missing-column pattern at column {}",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(observed)
    }
}

/// Read a CSV file. With `has_header`, the first row is kept as labels.
pub fn read_csv(path: &Path, has_header: bool) -> Result<CsvTable> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("cannot open {}: {e}", path.display())))?;
    let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
    let mut header = None;
    let mut width: Option<usize> = None;
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            Error::Io(format!("{}: malformed CSV near line {}: {e}", path.display(), idx + 1))
        })?;
        let line = record.position().map_or(idx as u64 + 1, |p| p.line());
        if idx == 0 && has_header {
            header = Some(record.iter().map(|s| s.to_string()).collect());
            continue;
        }
        if record.len() == 1 && record.get(0) == Some("") {
            continue; // blank line
        }
        let mut row = Vec::with_capacity(record.len());
        for (j, field) in record.iter().enumerate() {
            if field.is_empty() {
                row.push(None);
            } else {
                let value = field.parse::<f64>().map_err(|_| {
                    Error::Io(format!(
                        "{}: line {}: column {} is not a number: '{}'",
                        path.display(),
                        line,
                        j + 1,
                        field
                    ))
                })?;
                if !value.is_finite() {
                    return Err(Error::Io(format!(
                        "{}: line {}: column {} is not finite",
                        path.display(),
                        line,
                        j + 1
                    )));
                }
                row.push(Some(value));
            }
        }
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Io(format!(
                    "{}: line {}: expected {} fields, found {}",
                    path.display(),
                    line,
                    w,
                    row.len()
                )));
            }
            _ => {}
        }
        cells.push(row);
    }
    if cells.is_empty() {
        return Err(Error::Io(format!("{}: no data rows", path.display())));
    }
    Ok(CsvTable { cells, header })
}

/// Read a fully dense numeric CSV into a matrix.
pub fn read_matrix_csv(path: &Path, has_header: bool) -> Result<DMatrix<f64>> {
    read_csv(path, has_header)?.to_matrix()
}

/// Write a matrix as CSV with an optional header row.
pub fn write_matrix_csv(path: &Path, header: Option<&[String]>, m: &DMatrix<f64>) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .from_path(path)
        .map_err(|e| Error::Io(format!("cannot create {}: {e}", path.display())))?;
    if let Some(h) = header {
        writer.write_record(h).map_err(|e| Error::Io(e.to_string()))?;
    }
    for i in 0..m.nrows() {
        let record: Vec<String> = (0..m.ncols()).map(|j| format!("{}", m[(i, j)])).collect();
        writer.write_record(&record).map_err(|e| Error::Io(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}
