//! The data fact five-tuple and its validity rules.
//!
//! A fact is `{type, subspace, breakdown, measure, focus}` plus a short
//! description. Facts come from the model as JSON in the shape requested by
//! the extraction prompt; [`parse_fact`] normalizes that shape and
//! [`validate_fact`] checks it against the sub-table it was extracted from.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::dataset::{Cell, FieldKind, Literal, SubTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactType {
    Value,
    Difference,
    Proportion,
    Trend,
    Categorization,
    Distribution,
    Rank,
    Association,
    Extreme,
    Outlier,
}

impl FactType {
    pub const ALL: [FactType; 10] = [
        FactType::Value,
        FactType::Difference,
        FactType::Proportion,
        FactType::Trend,
        FactType::Categorization,
        FactType::Distribution,
        FactType::Rank,
        FactType::Association,
        FactType::Extreme,
        FactType::Outlier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FactType::Value => "value",
            FactType::Difference => "difference",
            FactType::Proportion => "proportion",
            FactType::Trend => "trend",
            FactType::Categorization => "categorization",
            FactType::Distribution => "distribution",
            FactType::Rank => "rank",
            FactType::Association => "association",
            FactType::Extreme => "extreme",
            FactType::Outlier => "outlier",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let s = s.trim().to_ascii_lowercase();
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Allowed number of focus clauses.
    fn focus_range(self) -> (usize, usize) {
        match self {
            FactType::Difference => (2, 2),
            FactType::Proportion => (1, 1),
            FactType::Rank | FactType::Extreme | FactType::Outlier => (0, 2),
            _ => (0, 1),
        }
    }
}

impl fmt::Display for FactType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregate {
    None,
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

impl Aggregate {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.trim().to_ascii_lowercase().as_str() {
            "" | "none" => Aggregate::None,
            "count" => Aggregate::Count,
            "sum" | "total" => Aggregate::Sum,
            "avg" | "average" | "mean" => Aggregate::Avg,
            "min" | "minimum" => Aggregate::Min,
            "max" | "maximum" => Aggregate::Max,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregate::None => "none",
            Aggregate::Count => "count",
            Aggregate::Sum => "sum",
            Aggregate::Avg => "avg",
            Aggregate::Min => "min",
            Aggregate::Max => "max",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measure {
    pub aggregate: Aggregate,
    pub field: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterClause {
    pub field: String,
    pub value: Literal,
}

impl FilterClause {
    pub fn new(field: impl Into<String>, value: impl Into<Literal>) -> Self {
        Self { field: field.into(), value: value.into() }
    }
}

impl From<&str> for Literal {
    fn from(s: &str) -> Self {
        Literal::Text(s.to_string())
    }
}

impl From<f64> for Literal {
    fn from(n: f64) -> Self {
        Literal::Number(n)
    }
}

/// The five-tuple plus description. Field order matches the canonical
/// serialization requested from the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataFact {
    #[serde(rename = "type")]
    pub fact_type: FactType,
    pub measure: Vec<Measure>,
    pub breakdown: Vec<String>,
    pub subspace: Vec<FilterClause>,
    pub focus: Vec<FilterClause>,
    pub description: String,
}

impl DataFact {
    pub fn breakdown_field(&self) -> Option<&str> {
        self.breakdown.first().map(|s| s.as_str())
    }

    pub fn to_json(&self) -> Json {
        serde_json::to_value(self).expect("fact serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FactParseError {
    #[error("malformed fact: {0}")]
    Malformed(String),
    #[error("unknown fact type {0:?}")]
    UnknownType(String),
    #[error("unknown aggregate {0:?}")]
    UnknownAggregate(String),
}

impl FactParseError {
    pub fn code(&self) -> &'static str {
        match self {
            FactParseError::Malformed(_) => "MALFORMED",
            FactParseError::UnknownType(_) => "UNKNOWN_TYPE",
            FactParseError::UnknownAggregate(_) => "UNKNOWN_AGGREGATE",
        }
    }
}

const KEYS: [&str; 6] = ["type", "measure", "breakdown", "subspace", "focus", "description"];

fn malformed(msg: impl Into<String>) -> FactParseError {
    FactParseError::Malformed(msg.into())
}

/// Parses one fact object from model output.
pub fn parse_fact(raw: &Json) -> Result<DataFact, FactParseError> {
    let obj = raw.as_object().ok_or_else(|| malformed("fact is not an object"))?;
    let get = |k: &str| obj.iter().find(|(key, _)| key.trim().eq_ignore_ascii_case(k)).map(|(_, v)| v);
    for key in obj.keys() {
        if !KEYS.iter().any(|k| key.trim().eq_ignore_ascii_case(k)) {
            return Err(malformed(format!("unknown key {key:?}")));
        }
    }

    let fact_type = match get("type") {
        Some(Json::String(s)) => FactType::parse(s).ok_or_else(|| FactParseError::UnknownType(s.clone()))?,
        Some(_) => return Err(malformed("type must be a string")),
        None => return Err(malformed("missing type")),
    };
    let measure = match get("measure") {
        Some(Json::Array(items)) => items.iter().map(parse_measure).collect::<Result<Vec<_>, _>>()?,
        Some(obj @ Json::Object(_)) => vec![parse_measure(obj)?],
        Some(_) => return Err(malformed("measure must be a list")),
        None => return Err(malformed("missing measure")),
    };
    let breakdown = match get("breakdown") {
        Some(Json::Array(items)) => items
            .iter()
            .map(|v| match v {
                Json::String(s) => Ok(s.trim().to_string()),
                _ => Err(malformed("breakdown entries must be strings")),
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(Json::String(s)) => vec![s.trim().to_string()],
        Some(_) => return Err(malformed("breakdown must be a list")),
        None => return Err(malformed("missing breakdown")),
    };
    let subspace = parse_filters(get("subspace"), "subspace")?;
    let focus = parse_filters(get("focus"), "focus")?;
    let description = match get("description") {
        Some(Json::String(s)) => s.trim().to_string(),
        Some(Json::Null) | None => String::new(),
        Some(_) => return Err(malformed("description must be a string")),
    };
    Ok(DataFact { fact_type, measure, breakdown, subspace, focus, description })
}

/// Parses the canonical JSON text form.
pub fn parse_fact_str(raw: &str) -> Result<DataFact, FactParseError> {
    let v: Json = serde_json::from_str(raw).map_err(|e| malformed(e.to_string()))?;
    parse_fact(&v)
}

fn parse_measure(v: &Json) -> Result<Measure, FactParseError> {
    let obj = v.as_object().ok_or_else(|| malformed("measure entries must be objects"))?;
    let mut field = None;
    let mut aggregate = Aggregate::None;
    for (k, val) in obj {
        match k.trim().to_ascii_lowercase().as_str() {
            "field" => match val {
                Json::String(s) => field = Some(s.trim().to_string()),
                _ => return Err(malformed("measure field must be a string")),
            },
            "aggregate" => match val {
                Json::String(s) => {
                    aggregate = Aggregate::parse(s).ok_or_else(|| FactParseError::UnknownAggregate(s.clone()))?
                }
                Json::Null => {}
                _ => return Err(malformed("aggregate must be a string")),
            },
            other => return Err(malformed(format!("unknown measure key {other:?}"))),
        }
    }
    Ok(Measure {
        aggregate,
        field: field.ok_or_else(|| malformed("measure without field"))?,
    })
}

fn parse_filters(v: Option<&Json>, what: &str) -> Result<Vec<FilterClause>, FactParseError> {
    let items = match v {
        None | Some(Json::Null) => return Ok(Vec::new()),
        Some(Json::Array(items)) => items.as_slice(),
        Some(obj @ Json::Object(_)) => std::slice::from_ref(obj),
        Some(_) => return Err(malformed(format!("{what} must be a list"))),
    };
    items
        .iter()
        .map(|item| {
            let obj = item
                .as_object()
                .ok_or_else(|| malformed(format!("{what} entries must be objects")))?;
            let mut field = None;
            let mut value = None;
            for (k, val) in obj {
                match k.trim().to_ascii_lowercase().as_str() {
                    "field" => match val {
                        Json::String(s) => field = Some(s.trim().to_string()),
                        _ => return Err(malformed(format!("{what} field must be a string"))),
                    },
                    "value" => {
                        value = Some(match val {
                            Json::String(s) => Literal::Text(s.clone()),
                            Json::Number(n) => Literal::Number(
                                n.as_f64().ok_or_else(|| malformed("number out of range"))?,
                            ),
                            _ => return Err(malformed(format!("{what} value must be text or number"))),
                        })
                    }
                    other => return Err(malformed(format!("unknown {what} key {other:?}"))),
                }
            }
            Ok(FilterClause {
                field: field.ok_or_else(|| malformed(format!("{what} entry without field")))?,
                value: value.ok_or_else(|| malformed(format!("{what} entry without value")))?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FactRule {
    BreakdownCount,
    BreakdownKind,
    UnknownField,
    MeasureCount,
    AssociationNeedsTwoMeasures,
    MeasureNotNumerical,
    AggregateRequired,
    TrendNeedsTemporal,
    TrendSubspaceCount,
    SubspaceCount,
    DifferenceNeedsTwoFocus,
    ProportionNeedsOneFocus,
    FocusCount,
    ValueNotInDomain,
    EmptySubspace,
    ValueNotPinned,
    FocusOutsideSubspace,
    FocusAmbiguous,
}

impl fmt::Display for FactRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("rule serializes");
        f.write_str(s.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub rule: FactRule,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactValidationReport {
    pub ok: bool,
    pub violations: Vec<Violation>,
}

impl FactValidationReport {
    pub fn rules(&self) -> BTreeSet<FactRule> {
        self.violations.iter().map(|v| v.rule).collect()
    }

    pub fn has(&self, rule: FactRule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }
}

/// Maximum subspace clauses for types other than trend and value.
pub const MAX_SUBSPACE: usize = 3;

/// Rows of `table` matching every subspace clause.
pub fn subspace_rows<'t>(table: &'t SubTable, subspace: &[FilterClause]) -> Option<Vec<&'t Vec<Cell>>> {
    let idx: Vec<(usize, &Literal)> = subspace
        .iter()
        .map(|c| table.field_index(&c.field).map(|i| (i, &c.value)))
        .collect::<Option<_>>()?;
    Some(
        table
            .rows
            .iter()
            .filter(|row| idx.iter().all(|(i, lit)| row[*i].matches_literal(lit)))
            .collect(),
    )
}

/// Breakdown keys of `rows` that a focus clause selects.
pub fn focus_groups(rows: &[&Vec<Cell>], breakdown: usize, focus_field: usize, value: &Literal) -> Vec<String> {
    let mut keys: Vec<String> = Vec::new();
    for row in rows {
        if row[focus_field].matches_literal(value) && !row[breakdown].is_null() {
            let k = row[breakdown].render();
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
    }
    keys
}

/// Checks a fact against the sub-table it describes.
pub fn validate_fact(fact: &DataFact, table: &SubTable) -> FactValidationReport {
    let mut v: Vec<Violation> = Vec::new();
    let mut push = |rule: FactRule, message: String| v.push(Violation { rule, message });
    let ty = fact.fact_type;

    // Breakdown.
    let mut breakdown_idx = None;
    if fact.breakdown.len() != 1 {
        push(FactRule::BreakdownCount, format!("expected exactly one breakdown, got {}", fact.breakdown.len()));
    }
    if let Some(b) = fact.breakdown.first() {
        match table.field(b) {
            None => push(FactRule::UnknownField, format!("breakdown field {b:?} does not exist")),
            Some(f) => {
                breakdown_idx = table.field_index(b);
                if ty == FactType::Trend && f.kind != FieldKind::Temporal {
                    push(
                        FactRule::TrendNeedsTemporal,
                        format!("trend breakdown {b:?} is {}, must be temporal", f.kind),
                    );
                } else if f.kind == FieldKind::Numerical {
                    push(FactRule::BreakdownKind, format!("breakdown {b:?} must be temporal or categorical"));
                }
            }
        }
    }

    // Measures.
    match (ty, fact.measure.len()) {
        (FactType::Association, 2) => {}
        (FactType::Association, n) => push(
            FactRule::AssociationNeedsTwoMeasures,
            format!("association needs two measures, got {n}"),
        ),
        (_, 1) => {}
        (_, n) => push(FactRule::MeasureCount, format!("{ty} needs exactly one measure, got {n}")),
    }
    for m in &fact.measure {
        match table.field(&m.field) {
            None => push(FactRule::UnknownField, format!("measure field {:?} does not exist", m.field)),
            Some(f) if f.kind != FieldKind::Numerical && m.aggregate != Aggregate::Count => push(
                FactRule::MeasureNotNumerical,
                format!("measure {:?} is {}, must be numerical unless counted", m.field, f.kind),
            ),
            _ => {}
        }
    }

    // Subspace cardinality and domains.
    match ty {
        FactType::Trend if fact.subspace.len() != 1 => push(
            FactRule::TrendSubspaceCount,
            format!("trend needs exactly one subspace clause, got {}", fact.subspace.len()),
        ),
        FactType::Trend | FactType::Value => {}
        _ if fact.subspace.len() > MAX_SUBSPACE => push(
            FactRule::SubspaceCount,
            format!("at most {MAX_SUBSPACE} subspace clauses, got {}", fact.subspace.len()),
        ),
        _ => {}
    }
    let (lo, hi) = ty.focus_range();
    let n_focus = fact.focus.len();
    if n_focus < lo || n_focus > hi {
        let rule = match ty {
            FactType::Difference => FactRule::DifferenceNeedsTwoFocus,
            FactType::Proportion => FactRule::ProportionNeedsOneFocus,
            _ => FactRule::FocusCount,
        };
        let expect = if lo == hi { format!("{lo}") } else { format!("{lo}..{hi}") };
        push(rule, format!("{ty} takes {expect} focus clauses, got {n_focus}"));
    }

    let mut filters_ok = true;
    for (what, clause) in fact
        .subspace
        .iter()
        .map(|c| ("subspace", c))
        .chain(fact.focus.iter().map(|c| ("focus", c)))
    {
        match table.field_index(&clause.field) {
            None => {
                filters_ok = false;
                push(FactRule::UnknownField, format!("{what} field {:?} does not exist", clause.field));
            }
            Some(i) => {
                if !table.rows.iter().any(|r| r[i].matches_literal(&clause.value)) {
                    filters_ok = false;
                    push(
                        FactRule::ValueNotInDomain,
                        format!("{what} value {} not found in field {:?}", clause.value, clause.field),
                    );
                }
            }
        }
    }

    // Row-level checks need resolvable filters and breakdown.
    if let (true, Some(bi)) = (filters_ok, breakdown_idx) {
        let rows = subspace_rows(table, &fact.subspace).expect("filters resolved");
        if rows.is_empty() {
            push(FactRule::EmptySubspace, "no rows satisfy the subspace".into());
        } else {
            let mut group_sizes: Vec<(String, usize)> = Vec::new();
            for r in &rows {
                if r[bi].is_null() {
                    continue;
                }
                let k = r[bi].render();
                match group_sizes.iter_mut().find(|(g, _)| *g == k) {
                    Some((_, n)) => *n += 1,
                    None => group_sizes.push((k, 1)),
                }
            }
            if ty == FactType::Value && group_sizes.len() != 1 {
                push(
                    FactRule::ValueNotPinned,
                    format!("value facts must pin the subspace to one group, found {}", group_sizes.len()),
                );
            }
            if fact.measure.iter().any(|m| m.aggregate == Aggregate::None)
                && group_sizes.iter().any(|(_, n)| *n > 1)
            {
                push(
                    FactRule::AggregateRequired,
                    "aggregate none needs one row per group; choose count, sum, avg, min or max".into(),
                );
            }
            for clause in &fact.focus {
                let fi = table.field_index(&clause.field).expect("resolved");
                let keys = focus_groups(&rows, bi, fi, &clause.value);
                if keys.is_empty() {
                    push(
                        FactRule::FocusOutsideSubspace,
                        format!("focus {}={} is outside the subspace", clause.field, clause.value),
                    );
                } else if keys.len() > 1 && matches!(ty, FactType::Difference | FactType::Proportion) {
                    push(
                        FactRule::FocusAmbiguous,
                        format!("focus {}={} matches {} groups", clause.field, clause.value, keys.len()),
                    );
                }
            }
        }
    }

    FactValidationReport { ok: v.is_empty(), violations: v }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{execute_query, ingest_dataset, SourceFormat};
    use serde_json::json;

    fn table() -> SubTable {
        let csv = "country,year,gini,share\n\
            South Africa,2014,63,10\nBrazil,2014,52.8,20\nJapan,2013,32.9,30\nChile,2013,45.6,40\n";
        let d = ingest_dataset(csv.as_bytes(), "t", "", SourceFormat::Table).unwrap();
        execute_query("SELECT * FROM t", &d).unwrap()
    }

    #[test]
    fn parse_prompt_shaped_trend() {
        let raw = json!({
            "type": "trend",
            "measure": [{"aggregate": "none", "field": "value"}],
            "breakdown": ["year"],
            "subspace": [{"field": "country", "value": "Japan"}],
            "focus": [],
            "description": "Japan's elderly share rose."
        });
        let f = parse_fact(&raw).unwrap();
        assert_eq!(f.fact_type, FactType::Trend);
        assert_eq!(f.measure, vec![Measure { aggregate: Aggregate::None, field: "value".into() }]);
    }

    #[test]
    fn parse_errors() {
        let bad_type = json!({"type": "growth", "measure": [], "breakdown": ["year"]});
        assert!(matches!(parse_fact(&bad_type), Err(FactParseError::UnknownType(t)) if t == "growth"));
        let missing = json!({"type": "trend", "measure": []});
        assert!(matches!(parse_fact(&missing), Err(FactParseError::Malformed(_))));
        let agg = json!({"type": "value", "measure": [{"aggregate": "median", "field": "v"}], "breakdown": ["k"]});
        assert!(matches!(parse_fact(&agg), Err(FactParseError::UnknownAggregate(_))));
        let extra = json!({"type": "value", "measure": [], "breakdown": ["k"], "why": "x"});
        assert!(matches!(parse_fact(&extra), Err(FactParseError::Malformed(_))));
    }

    #[test]
    fn aggregate_names_normalized() {
        let raw = json!({"type": "Extreme", "measure": [{"aggregate": "Maximum", "field": "gini"}],
                         "breakdown": "country", "subspace": [], "focus": []});
        let f = parse_fact(&raw).unwrap();
        assert_eq!(f.measure[0].aggregate, Aggregate::Max);
        assert_eq!(f.breakdown, vec!["country".to_string()]);
        assert_eq!(Aggregate::parse("average"), Some(Aggregate::Avg));
        assert_eq!(Aggregate::parse("minimum"), Some(Aggregate::Min));
    }

    #[test]
    fn canonical_round_trip() {
        let f = DataFact {
            fact_type: FactType::Difference,
            measure: vec![Measure { aggregate: Aggregate::Avg, field: "gini".into() }],
            breakdown: vec!["country".into()],
            subspace: vec![],
            focus: vec![FilterClause::new("country", "Japan"), FilterClause::new("year", 2013.0)],
            description: "d".into(),
        };
        let text = serde_json::to_string(&f).unwrap();
        assert!(text.starts_with(r#"{"type":"difference","measure":[{"aggregate":"avg","field":"gini"}]"#));
        assert_eq!(parse_fact_str(&text).unwrap(), f);
    }

    fn fact(ty: FactType, measure: &[&str], breakdown: &str) -> DataFact {
        DataFact {
            fact_type: ty,
            measure: measure
                .iter()
                .map(|m| Measure { aggregate: Aggregate::None, field: m.to_string() })
                .collect(),
            breakdown: vec![breakdown.into()],
            subspace: vec![],
            focus: vec![],
            description: String::new(),
        }
    }

    #[test]
    fn trend_needs_temporal_breakdown() {
        let mut f = fact(FactType::Trend, &["gini"], "country");
        f.subspace = vec![FilterClause::new("year", 2014.0)];
        let r = validate_fact(&f, &table());
        assert!(r.has(FactRule::TrendNeedsTemporal), "{r:?}");
    }

    #[test]
    fn association_needs_two_measures() {
        let f = fact(FactType::Association, &["gini"], "country");
        assert_eq!(
            validate_fact(&f, &table()).rules(),
            BTreeSet::from([FactRule::AssociationNeedsTwoMeasures])
        );
    }

    #[test]
    fn extreme_ok() {
        let mut f = fact(FactType::Extreme, &["gini"], "country");
        f.measure[0].aggregate = Aggregate::Max;
        f.focus = vec![FilterClause::new("country", "South Africa")];
        let r = validate_fact(&f, &table());
        assert!(r.ok, "{r:?}");
    }

    #[test]
    fn aggregate_none_over_multirow_groups() {
        let f = fact(FactType::Rank, &["gini"], "year");
        assert!(validate_fact(&f, &table()).has(FactRule::AggregateRequired));
    }

    #[test]
    fn count_allows_categorical_measure() {
        let mut f = fact(FactType::Categorization, &["country"], "year");
        f.measure[0].aggregate = Aggregate::Count;
        assert!(validate_fact(&f, &table()).ok);
    }

    #[test]
    fn validation_is_deterministic() {
        let f = fact(FactType::Difference, &["nope"], "gini");
        let t = table();
        assert_eq!(validate_fact(&f, &t), validate_fact(&f, &t));
    }
}
