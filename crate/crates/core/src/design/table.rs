use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// Named numeric columns of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct DataTable {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
}

impl DataTable {
    pub fn new(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::Schema("column/name count mismatch".into()));
        }
        if let Some(first) = columns.first() {
            if columns.iter().any(|c| c.len() != first.len()) {
                return Err(Error::Schema("columns have unequal lengths".into()));
            }
        }
        Ok(Self { names, columns })
    }

    /// Reads a CSV with a header row. Every cell must parse as a number;
    /// empty cells are rejected as missing values.
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let names: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut columns = vec![Vec::new(); names.len()];
        for (row, record) in rdr.records().enumerate() {
            let record = record?;
            for (j, cell) in record.iter().enumerate() {
                if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                    return Err(Error::Schema(format!(
                        "missing value in column `{}` at row {}",
                        names[j],
                        row + 1
                    )));
                }
                let v: f64 = cell.parse().map_err(|_| {
                    Error::Schema(format!(
                        "non-numeric value `{cell}` in column `{}` at row {}",
                        names[j],
                        row + 1
                    ))
                })?;
                columns[j].push(v);
            }
        }
        Self::new(names, columns)
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.names)?;
        for i in 0..self.nrows() {
            w.write_record(self.columns.iter().map(|c| format!("{}", c[i])))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn nrows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    }
}
