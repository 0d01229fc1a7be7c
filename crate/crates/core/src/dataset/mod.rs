//! Tabular dataset store.
//!
//! Datasets are ingested from CSV in the normalized long indicator layout
//! (`country,country_code,series,series_code,year,value`), from wide
//! indicator exports with `YYYY [YRYYYY]` year columns, or from any
//! rectangular CSV. Each field gets a kind (temporal, categorical or
//! numerical) which later drives SQL execution and fact validation.

mod ingest;
pub mod sql;
mod store;

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use ingest::{ingest_dataset, SourceFormat};
pub use sql::{
    execute_query, validate_query, QueryError, QueryErrorCode, QueryIssue, QueryValidationReport,
};
pub use store::DatasetStore;

/// Maximum rows in a sub-table.
pub const MAX_SUBTABLE_ROWS: usize = 10;
/// Maximum columns in a sub-table.
pub const MAX_SUBTABLE_FIELDS: usize = 50;
/// Number of example cells kept on each field descriptor.
pub const SAMPLE_VALUES: usize = 5;

/// Header of the normalized long format.
pub const LONG_HEADER: [&str; 6] = ["country", "country_code", "series", "series_code", "year", "value"];

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("source has no header or no data rows")]
    EmptySource,
    #[error("row {row} has {found} cells, expected {expected}")]
    RaggedRows { row: usize, expected: usize, found: usize },
    #[error("duplicate field name {0:?}")]
    DuplicateField(String),
    #[error("dataset has no numerical or temporal field")]
    NoMeasurableField,
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("corrupt dataset directory {path}: {message}")]
    Corrupt { path: String, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::EmptySource => "EMPTY_SOURCE",
            StoreError::RaggedRows { .. } => "RAGGED_ROWS",
            StoreError::DuplicateField(_) => "DUPLICATE_FIELD",
            StoreError::NoMeasurableField => "NO_MEASURABLE_FIELD",
            StoreError::UnknownDataset(_) => "UNKNOWN_DATASET",
            StoreError::Corrupt { .. } => "CORRUPT_DATASET",
            StoreError::Csv(_) => "CSV",
            StoreError::Io(_) => "IO",
            StoreError::Json(_) => "JSON",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Temporal,
    Categorical,
    Numerical,
}

impl fmt::Display for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FieldKind::Temporal => "temporal",
            FieldKind::Categorical => "categorical",
            FieldKind::Numerical => "numerical",
        })
    }
}

/// One table cell. Numerical fields hold numbers, everything else text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Null,
    Number(f64),
    Text(String),
}

impl Cell {
    pub fn is_null(&self) -> bool {
        matches!(self, Cell::Null)
    }

    /// Numeric view of the cell; text cells are parsed.
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Null => None,
            Cell::Number(n) => Some(*n),
            Cell::Text(t) => parse_number(t),
        }
    }

    /// Text used for CSV persistence and group keys. Null renders empty.
    pub fn render(&self) -> String {
        match self {
            Cell::Null => String::new(),
            Cell::Number(n) => format_f64(*n),
            Cell::Text(t) => t.clone(),
        }
    }

    /// Total order used for sorting: nulls last, numbers before text,
    /// numeric-looking text compared numerically.
    pub fn sort_cmp(&self, other: &Cell) -> Ordering {
        match (self, other) {
            (Cell::Null, Cell::Null) => Ordering::Equal,
            (Cell::Null, _) => Ordering::Greater,
            (_, Cell::Null) => Ordering::Less,
            (Cell::Number(a), Cell::Number(b)) => a.total_cmp(b),
            (Cell::Number(_), Cell::Text(_)) => Ordering::Less,
            (Cell::Text(_), Cell::Number(_)) => Ordering::Greater,
            (Cell::Text(a), Cell::Text(b)) => match (parse_number(a), parse_number(b)) {
                (Some(x), Some(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
                _ => a.cmp(b),
            },
        }
    }

    /// Equality against a filter literal as written by the model: numbers
    /// compare numerically, text compares exactly (case-insensitively as a
    /// fallback).
    pub fn matches_literal(&self, literal: &Literal) -> bool {
        match (self, literal) {
            (Cell::Null, _) => false,
            (Cell::Number(n), Literal::Number(m)) => n == m,
            (Cell::Number(n), Literal::Text(s)) => parse_number(s).is_some_and(|m| *n == m),
            (Cell::Text(t), Literal::Text(s)) => t == s || t.eq_ignore_ascii_case(s.trim()),
            (Cell::Text(t), Literal::Number(m)) => parse_number(t).is_some_and(|n| n == *m),
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// A literal value as it appears in a filter clause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Number(f64),
    Text(String),
}

impl Literal {
    pub fn render(&self) -> String {
        match self {
            Literal::Number(n) => format_f64(*n),
            Literal::Text(t) => t.clone(),
        }
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Shortest round-trip representation, without a trailing `.0`.
pub fn format_f64(n: f64) -> String {
    if n == 0.0 {
        return "0".to_string();
    }
    format!("{n}")
}

/// Parses a finite plain decimal. Rejects `inf`, `NaN` and friends.
pub fn parse_number(s: &str) -> Option<f64> {
    let t = s.trim();
    if t.is_empty()
        || !t
            .bytes()
            .all(|b| b.is_ascii_digit() || matches!(b, b'.' | b'-' | b'+' | b'e' | b'E'))
        || !t.bytes().any(|b| b.is_ascii_digit())
    {
        return None;
    }
    t.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// `Some(year)` for a 4-digit year in 1800..=2100.
pub fn parse_year(s: &str) -> Option<i64> {
    let t = s.trim();
    if t.len() == 4 && t.bytes().all(|b| b.is_ascii_digit()) {
        let y: i64 = t.parse().ok()?;
        (1800..=2100).contains(&y).then_some(y)
    } else {
        None
    }
}

/// Days since 1970-01-01 for an ISO `YYYY-MM-DD` date.
pub fn parse_iso_date(s: &str) -> Option<i64> {
    let t = s.trim();
    let b = t.as_bytes();
    if b.len() != 10 || b[4] != b'-' || b[7] != b'-' {
        return None;
    }
    let y: i64 = t[0..4].parse().ok()?;
    let m: u32 = t[5..7].parse().ok()?;
    let d: u32 = t[8..10].parse().ok()?;
    if !(1..=12).contains(&m) || d == 0 || d > days_in_month(y, m) {
        return None;
    }
    Some(days_from_civil(y, m, d))
}

fn days_in_month(y: i64, m: u32) -> u32 {
    match m {
        1 | 3 | 5 | 7 | 8 | 10 | 12 => 31,
        4 | 6 | 9 | 11 => 30,
        _ if (y % 4 == 0 && y % 100 != 0) || y % 400 == 0 => 29,
        _ => 28,
    }
}

// Howard Hinnant's days_from_civil.
fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let m = m as i64;
    let doy = (153 * (if m > 2 { m - 3 } else { m + 9 }) + 2) / 5 + d as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

/// Numeric time axis for a temporal value: years map to themselves, ISO
/// dates to days since the epoch.
pub fn time_ordinal(s: &str) -> Option<f64> {
    parse_year(s)
        .map(|y| y as f64)
        .or_else(|| parse_iso_date(s).map(|d| d as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDescriptor {
    pub name: String,
    pub kind: FieldKind,
    pub dataset_id: String,
    #[serde(default)]
    pub sample_values: Vec<Cell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub id: String,
    pub name: String,
    pub fields: Vec<FieldDescriptor>,
    pub rows: Vec<Vec<Cell>>,
    pub provenance: String,
}

impl Dataset {
    /// Case-insensitive field lookup.
    pub fn field_index(&self, name: &str) -> Option<usize> {
        field_position(&self.fields, name)
    }

    pub fn field(&self, name: &str) -> Option<&FieldDescriptor> {
        self.field_index(name).map(|i| &self.fields[i])
    }

    /// Distinct non-null values of a field in first-appearance order.
    pub fn distinct_values(&self, name: &str) -> Vec<Cell> {
        let Some(i) = self.field_index(name) else {
            return Vec::new();
        };
        let mut out: Vec<Cell> = Vec::new();
        for row in &self.rows {
            let c = &row[i];
            if !c.is_null() && !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }
}

pub(crate) fn field_position(fields: &[FieldDescriptor], name: &str) -> Option<usize> {
    let name = name.trim();
    fields.iter().position(|f| f.name.eq_ignore_ascii_case(name))
}

/// A filtered, projected slice of one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubTable {
    pub source_dataset: String,
    pub fields: Vec<FieldDescriptor>,
    pub rows: Vec<Vec<Cell>>,
    pub generating_query: String,
}

impl SubTable {
    pub fn field_index(&self, name: &str) -> Option<usize> {
        field_position(&self.fields, name)
    }

    pub fn field(&self, name: &str) -> Option<&FieldDescriptor> {
        self.field_index(name).map(|i| &self.fields[i])
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Plain CSV-style rendering for prompts.
    pub fn to_text(&self) -> String {
        let mut out = self
            .fields
            .iter()
            .map(|f| f.name.as_str())
            .collect::<Vec<_>>()
            .join(",");
        for row in &self.rows {
            out.push('\n');
            out.push_str(
                &row.iter()
                    .map(|c| csv_escape(&c.render()))
                    .collect::<Vec<_>>()
                    .join(","),
            );
        }
        out
    }
}

fn csv_escape(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Lowercase identifier made of `[a-z0-9_]`.
pub fn slugify(name: &str) -> String {
    let mut out = String::new();
    let mut last_us = true;
    for ch in name.trim().chars() {
        if ch.is_ascii_alphanumeric() {
            out.push(ch.to_ascii_lowercase());
            last_us = false;
        } else if !last_us {
            out.push('_');
            last_us = true;
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    if out.is_empty() {
        out.push_str("dataset");
    }
    if out.as_bytes()[0].is_ascii_digit() {
        out.insert(0, 't');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn number_parsing_rejects_specials() {
        assert_eq!(parse_number("1.5"), Some(1.5));
        assert_eq!(parse_number(" -2e3 "), Some(-2000.0));
        assert_eq!(parse_number("inf"), None);
        assert_eq!(parse_number("NaN"), None);
        assert_eq!(parse_number(".."), None);
        assert_eq!(parse_number("x"), None);
    }

    #[test]
    fn years_and_dates() {
        assert_eq!(parse_year("2012"), Some(2012));
        assert_eq!(parse_year("1799"), None);
        assert_eq!(parse_iso_date("1970-01-01"), Some(0));
        assert_eq!(parse_iso_date("2000-03-01"), Some(11017));
        assert_eq!(parse_iso_date("2023-02-29"), None);
        assert_eq!(time_ordinal("2023"), Some(2023.0));
    }

    #[test]
    fn cell_render_is_shortest() {
        assert_eq!(Cell::Number(6_037_000.0).render(), "6037000");
        assert_eq!(Cell::Number(24.64).render(), "24.64");
        assert_eq!(Cell::Null.render(), "");
    }

    #[test]
    fn slug() {
        assert_eq!(slugify("Gini index (WDI)"), "gini_index_wdi");
        assert_eq!(slugify("2020 data"), "t2020_data");
    }

    #[test]
    fn literal_matching() {
        assert!(Cell::Text("2012".into()).matches_literal(&Literal::Number(2012.0)));
        assert!(Cell::Number(3.0).matches_literal(&Literal::Text("3".into())));
        assert!(Cell::Text("Japan".into()).matches_literal(&Literal::Text("japan".into())));
        assert!(!Cell::Null.matches_literal(&Literal::Text("".into())));
    }
}
