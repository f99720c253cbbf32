//! Schema-free in-memory tables, CSV I/O and column-type inference.

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(String),
    #[error("row {0} has the wrong number of fields")]
    RaggedRow(usize),
    #[error("table has no columns")]
    EmptyTable,
    #[error("column has no non-missing values")]
    AllMissing,
    #[error("invalid column name {0:?}")]
    InvalidName(String),
    #[error("duplicate column name {0:?}")]
    DuplicateColumn(String),
    #[error("not a permutation of {0} columns")]
    InvalidPermutation(usize),
    #[error("unknown column {0:?}")]
    UnknownColumn(String),
    #[error("dropping would leave no columns")]
    WouldBeEmpty,
}

/// Column data type; the integer codes index the type embedding table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataType {
    Numerical = 0,
    Categorical = 1,
    Textual = 2,
}

impl DataType {
    pub const ALL: [DataType; 3] = [
        DataType::Numerical,
        DataType::Categorical,
        DataType::Textual,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub dtype: DataType,
}

impl Column {
    pub fn new(name: impl Into<String>, dtype: DataType) -> Self {
        Self {
            name: name.into(),
            dtype,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Cell {
    Value(String),
    Missing,
}

impl Cell {
    pub fn value(s: impl Into<String>) -> Self {
        Cell::Value(s.into())
    }

    pub fn is_missing(&self) -> bool {
        matches!(self, Cell::Missing)
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Cell::Value(s) => Some(s),
            Cell::Missing => None,
        }
    }
}

pub type Row = Vec<Cell>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    schema: Vec<Column>,
    rows: Vec<Row>,
}

/// A finite decimal literal: optional sign, digits with an optional
/// fractional part, optional exponent. No thousands separators.
pub fn parse_decimal(s: &str) -> Option<f64> {
    let t = s.trim();
    let b = t.as_bytes();
    let mut i = 0;
    if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
        i += 1;
    }
    let int_start = i;
    while i < b.len() && b[i].is_ascii_digit() {
        i += 1;
    }
    let mut digits = i - int_start;
    if i < b.len() && b[i] == b'.' {
        i += 1;
        let frac_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        digits += i - frac_start;
    }
    if digits == 0 {
        return None;
    }
    if i < b.len() && (b[i] == b'e' || b[i] == b'E') {
        i += 1;
        if i < b.len() && (b[i] == b'+' || b[i] == b'-') {
            i += 1;
        }
        let exp_start = i;
        while i < b.len() && b[i].is_ascii_digit() {
            i += 1;
        }
        if i == exp_start {
            return None;
        }
    }
    if i != b.len() {
        return None;
    }
    t.parse::<f64>().ok().filter(|x| x.is_finite())
}

/// Numerical if every non-missing value is a finite decimal; otherwise
/// Categorical when the distinct count is at most `max(20, 5%)` of the
/// non-missing values; otherwise Textual.
pub fn infer_dtype<'a>(
    values: impl IntoIterator<Item = Option<&'a str>>,
) -> Result<DataType, TableError> {
    let present: Vec<&str> = values.into_iter().flatten().collect();
    if present.is_empty() {
        return Err(TableError::AllMissing);
    }
    if present.iter().all(|v| parse_decimal(v).is_some()) {
        return Ok(DataType::Numerical);
    }
    let distinct: HashSet<&str> = present.iter().copied().collect();
    let limit = 20usize.max((present.len() as f64 * 0.05).floor() as usize);
    if distinct.len() <= limit {
        Ok(DataType::Categorical)
    } else {
        Ok(DataType::Textual)
    }
}

impl Table {
    pub fn new(schema: Vec<Column>, rows: Vec<Row>) -> Result<Self, TableError> {
        if schema.is_empty() {
            return Err(TableError::EmptyTable);
        }
        let mut seen = HashSet::new();
        for c in &schema {
            if c.name.trim().is_empty() {
                return Err(TableError::InvalidName(c.name.clone()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(TableError::DuplicateColumn(c.name.clone()));
            }
        }
        if let Some(i) = rows.iter().position(|r| r.len() != schema.len()) {
            return Err(TableError::RaggedRow(i));
        }
        Ok(Self { schema, rows })
    }

    /// Builds a table from raw string rows, inferring each column's type.
    /// Empty strings become [`Cell::Missing`]; all-missing columns are Textual.
    pub fn from_strings(names: Vec<String>, raw: Vec<Vec<String>>) -> Result<Self, TableError> {
        if let Some(i) = raw.iter().position(|r| r.len() != names.len()) {
            return Err(TableError::RaggedRow(i));
        }
        let rows: Vec<Row> = raw
            .into_iter()
            .map(|r| {
                r.into_iter()
                    .map(|s| {
                        if s.is_empty() {
                            Cell::Missing
                        } else {
                            Cell::Value(s)
                        }
                    })
                    .collect()
            })
            .collect();
        let schema = names
            .into_iter()
            .enumerate()
            .map(|(j, name)| {
                let dtype =
                    infer_dtype(rows.iter().map(|r| r[j].as_str())).unwrap_or(DataType::Textual);
                Column { name, dtype }
            })
            .collect();
        Self::new(schema, rows)
    }

    pub fn schema(&self) -> &[Column] {
        &self.schema
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &Row {
        &self.rows[i]
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn num_cols(&self) -> usize {
        self.schema.len()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|c| c.name == name)
    }

    pub fn column_values(&self, j: usize) -> impl Iterator<Item = &Cell> {
        self.rows.iter().map(move |r| &r[j])
    }

    /// Overrides a declared column type.
    pub fn set_dtype(&mut self, name: &str, dtype: DataType) -> Result<(), TableError> {
        let j = self
            .column_index(name)
            .ok_or_else(|| TableError::UnknownColumn(name.into()))?;
        self.schema[j].dtype = dtype;
        Ok(())
    }

    pub fn set_cell(&mut self, row: usize, col: usize, cell: Cell) {
        self.rows[row][col] = cell;
    }

    pub fn count_missing(&self) -> usize {
        self.rows
            .iter()
            .flatten()
            .filter(|c| c.is_missing())
            .count()
    }

    /// Keeps the rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Table {
        Table {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Reorders columns so that new column `k` is old column `perm[k]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Result<Table, TableError> {
        let n = self.num_cols();
        let mut seen = vec![false; n];
        if perm.len() != n {
            return Err(TableError::InvalidPermutation(n));
        }
        for &p in perm {
            if p >= n || seen[p] {
                return Err(TableError::InvalidPermutation(n));
            }
            seen[p] = true;
        }
        Ok(Table {
            schema: perm.iter().map(|&p| self.schema[p].clone()).collect(),
            rows: self
                .rows
                .iter()
                .map(|r| perm.iter().map(|&p| r[p].clone()).collect())
                .collect(),
        })
    }

    pub fn drop_columns<S: AsRef<str>>(&self, names: &[S]) -> Result<Table, TableError> {
        let mut drop = vec![false; self.num_cols()];
        for name in names {
            let j = self
                .column_index(name.as_ref())
                .ok_or_else(|| TableError::UnknownColumn(name.as_ref().into()))?;
            drop[j] = true;
        }
        let keep: Vec<usize> = (0..self.num_cols()).filter(|&j| !drop[j]).collect();
        if keep.is_empty() {
            return Err(TableError::WouldBeEmpty);
        }
        Ok(Table {
            schema: keep.iter().map(|&j| self.schema[j].clone()).collect(),
            rows: self
                .rows
                .iter()
                .map(|r| keep.iter().map(|&j| r[j].clone()).collect())
                .collect(),
        })
    }

    pub fn from_csv_reader<R: Read>(reader: R, header: bool) -> Result<Table, TableError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(reader);
        let mut records = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| TableError::Csv(e.to_string()))?;
            records.push(rec.iter().map(str::to_string).collect::<Vec<_>>());
        }
        let (names, body): (Vec<String>, Vec<Vec<String>>) = if header {
            let mut it = records.into_iter();
            let names = it.next().ok_or(TableError::EmptyTable)?;
            (
                names.into_iter().map(|s| s.trim().to_string()).collect(),
                it.collect(),
            )
        } else {
            let width = records
                .first()
                .map(Vec::len)
                .ok_or(TableError::EmptyTable)?;
            ((0..width).map(|j| format!("c{j}")).collect(), records)
        };
        if names.is_empty() || (names.len() == 1 && names[0].is_empty()) {
            return Err(TableError::EmptyTable);
        }
        if let Some(i) = body.iter().position(|r| r.len() != names.len()) {
            // data rows are numbered from 1 after the header
            return Err(TableError::RaggedRow(i + 1));
        }
        Table::from_strings(names, body)
    }

    pub fn load_csv(path: impl AsRef<Path>, header: bool) -> Result<Table, TableError> {
        Table::from_csv_reader(File::open(path)?, header)
    }

    pub fn write_csv_to<W: Write>(&self, writer: W) -> Result<(), TableError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        let csv_err = |e: csv::Error| TableError::Csv(e.to_string());
        w.write_record(self.schema.iter().map(|c| c.name.as_str()))
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|c| c.as_str().unwrap_or("")))
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), TableError> {
        self.write_csv_to(File::create(path)?)
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv_to(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}
