//! Rectangular tables and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(i64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Self::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Self::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Self::Int(v as i64)
    }
}

impl From<i64> for Cell {
    fn from(v: i64) -> Self {
        Self::Int(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Self::Text(v.to_string())
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Self::Text(v.to_owned())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Self::Text(v)
    }
}

/// Shortest decimal that parses back to the same bits. Plain notation for
/// magnitudes in [1e-5, 1e16), scientific outside.
pub fn format_float(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let a = x.abs();
    if a == 0.0 || (1e-5..1e16).contains(&a) {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

impl Cell {
    pub fn render(&self) -> String {
        match self {
            Self::Float(v) => format_float(*v),
            Self::Int(v) => v.to_string(),
            Self::Text(s) => s.clone(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self { header: header.into_iter().map(Into::into).collect(), rows: Vec::new() }
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn rows(&self) -> &[Vec<Cell>] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Panics on a row of the wrong width; tables are built by code, not input.
    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "row width does not match header {:?}", self.header);
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, CliError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.into_inner().map_err(|e| CliError::Io(e.into_error()))
    }

    /// Fixed-width text rendering for terminal summaries.
    pub fn to_text(&self) -> String {
        let cells: Vec<Vec<String>> = self.rows.iter().map(|r| r.iter().map(Cell::render).collect()).collect();
        let widths: Vec<usize> =
            (0..self.header.len()).map(|j| cells.iter().map(|r| r[j].len()).chain([self.header[j].len()]).max().unwrap_or(0)).collect();
        let mut out = String::new();
        let line = |out: &mut String, r: &[String]| {
            for (j, c) in r.iter().enumerate() {
                let _ = write!(out, "{c:<w$}  ", w = widths[j]);
            }
            out.push('\n');
        };
        line(&mut out, &self.header);
        for r in &cells {
            line(&mut out, r);
        }
        out
    }
}

pub fn emit_csv(table: &Table, path: &Path) -> Result<(), CliError> {
    std::fs::write(path, table.to_csv()?).map_err(CliError::Io)
}

/// Header plus raw string records.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = r.headers()?.iter().map(str::to_owned).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_owned).collect());
    }
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn float_formatting() {
        assert_eq!(format_float(1.5), "1.5");
        assert_eq!(format_float(0.0), "0");
        assert_eq!(format_float(-2.0), "-2");
        assert_eq!(format_float(1e-7), "1e-7");
        assert_eq!(format_float(0.1 + 0.2), "0.30000000000000004");
    }

    #[test]
    fn empty_table_is_header_only() {
        let t = Table::new(["a", "b"]);
        assert_eq!(t.to_csv().unwrap(), b"a,b\n");
    }

    #[test]
    fn text_is_quoted() {
        let mut t = Table::new(["k"]);
        t.push(vec!["x,y".into()]);
        assert_eq!(t.to_csv().unwrap(), b"k\n\"x,y\"\n");
    }

    proptest! {
        #[test]
        fn floats_round_trip_bitwise(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let y: f64 = format_float(x).parse().unwrap();
            prop_assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Table::new(["x", "n"]);
        let xs = [1.5, -3.25e-9, 123456.789, f64::MIN_POSITIVE];
        for (i, x) in xs.iter().enumerate() {
            t.push(vec![(*x).into(), i.into()]);
        }
        let p = dir.path().join("t.csv");
        emit_csv(&t, &p).unwrap();
        let (h, rows) = read_csv(&p).unwrap();
        assert_eq!(h, ["x", "n"]);
        for (r, x) in rows.iter().zip(xs) {
            assert_eq!(r[0].parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }
}
