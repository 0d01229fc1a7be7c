use std::io::Read;
use std::sync::OnceLock;

use regex::Regex;

use super::{
    parse_iso_date, parse_number, parse_year, slugify, Cell, Dataset, FieldDescriptor, FieldKind,
    StoreError, LONG_HEADER, SAMPLE_VALUES,
};

/// Layout of an incoming CSV stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceFormat {
    /// Already long (the normalized header) or any other rectangular table.
    #[default]
    Table,
    /// Wide indicator export with one column per year.
    WideWdi,
}

/// Share of non-null cells that must parse as numbers for a numerical field.
const NUMERIC_THRESHOLD: f64 = 0.9;

fn year_header() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d{4})(?:\s*\[YR(\d{4})\])?\s*$").unwrap())
}

fn is_null_token(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t == ".."
}

/// Reads a CSV stream into a [`Dataset`].
///
/// Kinds are inferred per column unless the header is exactly the
/// normalized long header, in which case the canonical kinds apply.
pub fn ingest_dataset<R: Read>(
    source: R,
    name: &str,
    provenance: &str,
    format: SourceFormat,
) -> Result<Dataset, StoreError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(source);
    let mut records = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        records.push(rec.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    }
    let mut iter = records.into_iter();
    let Some(header) = iter.next() else {
        return Err(StoreError::EmptySource);
    };
    let mut header: Vec<String> = header.into_iter().map(|h| h.trim().to_string()).collect();
    if let Some(first) = header.first_mut() {
        // UTF-8 BOM from spreadsheet exports.
        *first = first.trim_start_matches('\u{feff}').to_string();
    }
    let mut body: Vec<Vec<String>> = Vec::new();
    for row in iter {
        if row.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        if format == SourceFormat::WideWdi && row.iter().skip(1).all(|c| c.trim().is_empty()) {
            break; // "Data from database: ..." footer
        }
        body.push(row);
    }

    let (header, body) = match format {
        SourceFormat::Table => (header, body),
        SourceFormat::WideWdi => pivot_wide(header, body)?,
    };
    if body.is_empty() {
        return Err(StoreError::EmptySource);
    }
    for (i, row) in body.iter().enumerate() {
        if row.len() != header.len() {
            return Err(StoreError::RaggedRows {
                row: i + 1,
                expected: header.len(),
                found: row.len(),
            });
        }
    }
    for (i, h) in header.iter().enumerate() {
        if header[..i].iter().any(|o| o.eq_ignore_ascii_case(h)) {
            return Err(StoreError::DuplicateField(h.clone()));
        }
    }

    let id = slugify(name);
    let canonical = header.len() == LONG_HEADER.len()
        && header.iter().zip(LONG_HEADER).all(|(h, c)| h == c);
    let mut kinds = Vec::with_capacity(header.len());
    for (col, h) in header.iter().enumerate() {
        let kind = if canonical {
            match h.as_str() {
                "year" => FieldKind::Temporal,
                "value" => FieldKind::Numerical,
                _ => FieldKind::Categorical,
            }
        } else {
            infer_kind(body.iter().map(|r| r[col].as_str()))
        };
        kinds.push(kind);
    }
    if !kinds.iter().any(|k| *k != FieldKind::Categorical) {
        return Err(StoreError::NoMeasurableField);
    }

    let rows: Vec<Vec<Cell>> = body
        .into_iter()
        .map(|r| {
            r.into_iter()
                .zip(&kinds)
                .map(|(raw, kind)| to_cell(&raw, *kind))
                .collect()
        })
        .collect();
    let fields = header
        .into_iter()
        .zip(&kinds)
        .enumerate()
        .map(|(col, (name, kind))| FieldDescriptor {
            name,
            kind: *kind,
            dataset_id: id.clone(),
            sample_values: sample_values(&rows, col),
        })
        .collect();
    Ok(Dataset {
        id,
        name: name.to_string(),
        fields,
        rows,
        provenance: provenance.to_string(),
    })
}

pub(crate) fn to_cell(raw: &str, kind: FieldKind) -> Cell {
    if is_null_token(raw) {
        return Cell::Null;
    }
    match kind {
        FieldKind::Numerical => parse_number(raw).map_or(Cell::Null, Cell::Number),
        FieldKind::Temporal => {
            let t = raw.trim();
            match year_header().captures(t) {
                Some(c) => Cell::Text(c[1].to_string()),
                None => Cell::Text(t.to_string()),
            }
        }
        FieldKind::Categorical => Cell::Text(raw.trim().to_string()),
    }
}

pub(crate) fn sample_values(rows: &[Vec<Cell>], col: usize) -> Vec<Cell> {
    let mut out: Vec<Cell> = Vec::new();
    for row in rows {
        let c = &row[col];
        if !c.is_null() && !out.contains(c) {
            out.push(c.clone());
            if out.len() == SAMPLE_VALUES {
                break;
            }
        }
    }
    out
}

fn infer_kind<'a>(values: impl Iterator<Item = &'a str>) -> FieldKind {
    let non_null: Vec<&str> = values.filter(|v| !is_null_token(v)).collect();
    if non_null.is_empty() {
        return FieldKind::Categorical;
    }
    if non_null
        .iter()
        .all(|v| parse_year(v).is_some() || parse_iso_date(v).is_some() || is_yr_token(v))
    {
        return FieldKind::Temporal;
    }
    let numeric = non_null.iter().filter(|v| parse_number(v).is_some()).count();
    if numeric as f64 / non_null.len() as f64 >= NUMERIC_THRESHOLD {
        FieldKind::Numerical
    } else {
        FieldKind::Categorical
    }
}

fn is_yr_token(v: &str) -> bool {
    year_header()
        .captures(v)
        .is_some_and(|c| c.get(2).is_some() && parse_year(&c[1]).is_some())
}

fn long_name(header: &str) -> String {
    match header.trim().to_ascii_lowercase().as_str() {
        "country name" | "country" | "economy" => "country".into(),
        "country code" | "economy code" => "country_code".into(),
        "series name" | "series" | "indicator name" => "series".into(),
        "series code" | "indicator code" => "series_code".into(),
        other => slugify(other),
    }
}

/// Pivots wide year columns into `(…, year, value)` rows. Identifier
/// columns are renamed to their long-format names and kept in their
/// canonical order.
fn pivot_wide(
    header: Vec<String>,
    body: Vec<Vec<String>>,
) -> Result<(Vec<String>, Vec<Vec<String>>), StoreError> {
    let mut id_cols: Vec<(usize, String)> = Vec::new();
    let mut year_cols: Vec<(usize, String)> = Vec::new();
    for (i, h) in header.iter().enumerate() {
        match year_header().captures(h) {
            Some(c) if parse_year(&c[1]).is_some() => year_cols.push((i, c[1].to_string())),
            _ => id_cols.push((i, long_name(h))),
        }
    }
    let rank = |n: &str| LONG_HEADER.iter().position(|c| *c == n).unwrap_or(LONG_HEADER.len());
    id_cols.sort_by_key(|(i, n)| (rank(n), *i));

    let mut out_header: Vec<String> = id_cols.iter().map(|(_, n)| n.clone()).collect();
    out_header.push("year".into());
    out_header.push("value".into());

    let mut out = Vec::with_capacity(body.len() * year_cols.len());
    for (r, row) in body.into_iter().enumerate() {
        if row.len() != header.len() {
            return Err(StoreError::RaggedRows {
                row: r + 1,
                expected: header.len(),
                found: row.len(),
            });
        }
        for (yc, year) in &year_cols {
            let mut long: Vec<String> = id_cols.iter().map(|(i, _)| row[*i].trim().to_string()).collect();
            long.push(year.clone());
            long.push(row[*yc].trim().to_string());
            out.push(long);
        }
    }
    Ok((out_header, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds(d: &Dataset) -> Vec<(&str, FieldKind)> {
        d.fields.iter().map(|f| (f.name.as_str(), f.kind)).collect()
    }

    #[test]
    fn wide_wdi_pivots_to_long() {
        let csv = "Country Name,Series Name,2012 [YR2012],2023 [YR2023]\n\
                   Japan,Population ages 65 and above (% of total population),24.64,30.07\n\
                   \n\
                   Data from database: World Development Indicators,,,\n";
        let d = ingest_dataset(csv.as_bytes(), "aging", "test", SourceFormat::WideWdi).unwrap();
        assert_eq!(
            kinds(&d),
            vec![
                ("country", FieldKind::Categorical),
                ("series", FieldKind::Categorical),
                ("year", FieldKind::Temporal),
                ("value", FieldKind::Numerical),
            ]
        );
        assert_eq!(d.rows.len(), 2);
        assert_eq!(d.rows[1][2], Cell::Text("2023".into()));
        assert_eq!(d.rows[1][3], Cell::Number(30.07));
    }

    #[test]
    fn below_numeric_threshold_is_categorical() {
        let csv = "label,amount\n1.5,1\n2.0,2\nx,3\n";
        let d = ingest_dataset(csv.as_bytes(), "t", "test", SourceFormat::Table).unwrap();
        assert_eq!(d.fields[0].kind, FieldKind::Categorical);
        assert_eq!(d.fields[1].kind, FieldKind::Numerical);
    }

    #[test]
    fn errors() {
        assert!(matches!(
            ingest_dataset("".as_bytes(), "t", "", SourceFormat::Table),
            Err(StoreError::EmptySource)
        ));
        assert!(matches!(
            ingest_dataset("a,b\n".as_bytes(), "t", "", SourceFormat::Table),
            Err(StoreError::EmptySource)
        ));
        assert!(matches!(
            ingest_dataset("a,b\n1,2\n3\n".as_bytes(), "t", "", SourceFormat::Table),
            Err(StoreError::RaggedRows { row: 2, expected: 2, found: 1 })
        ));
        assert!(matches!(
            ingest_dataset("a,A\n1,2\n".as_bytes(), "t", "", SourceFormat::Table),
            Err(StoreError::DuplicateField(_))
        ));
        assert!(matches!(
            ingest_dataset("a,b\nx,y\n".as_bytes(), "t", "", SourceFormat::Table),
            Err(StoreError::NoMeasurableField)
        ));
    }

    #[test]
    fn wdi_missing_marker_is_null() {
        let csv = "country,country_code,series,series_code,year,value\nChad,TCD,Gini,SI.POV.GINI,2011,..\n";
        let d = ingest_dataset(csv.as_bytes(), "g", "", SourceFormat::Table).unwrap();
        assert!(d.rows[0][5].is_null());
    }

    #[test]
    fn year_values_infer_temporal() {
        let csv = "when,amount\n2001,3\n2002,4\n";
        let d = ingest_dataset(csv.as_bytes(), "t", "", SourceFormat::Table).unwrap();
        assert_eq!(d.fields[0].kind, FieldKind::Temporal);
    }

    #[test]
    fn samples_capped_and_distinct() {
        let mut csv = String::from("k,v\n");
        for i in 0..20 {
            csv.push_str(&format!("k{},{}\n", i % 7, i));
        }
        let d = ingest_dataset(csv.as_bytes(), "t", "", SourceFormat::Table).unwrap();
        assert_eq!(d.fields[0].sample_values.len(), SAMPLE_VALUES);
    }
}
