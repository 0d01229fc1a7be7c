//! Deterministic computation of data facts over sub-tables.
//!
//! [`compute_fact`] filters a sub-table by the fact's subspace, groups the
//! surviving rows by the breakdown field, aggregates each group and derives
//! the type-specific result. [`chart_spec`] turns a result into a chart
//! description and [`check_description`] compares free-text captions with
//! the computed numbers.

mod chart;
mod consistency;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::{time_ordinal, Cell, FieldKind, SubTable};
use crate::fact::{focus_groups, subspace_rows, Aggregate, DataFact, FactType, Measure};

pub use chart::{chart_spec, Axis, ChartDatum, ChartSpec, Mark};
pub use consistency::{
    canonical_description, check_description, format_number, ConsistencyReport, Mismatch, MismatchKind,
};

/// Relative movement over the whole span below which a trend is flat.
pub const FLAT_THRESHOLD: f64 = 0.01;
/// Absolute z-score above which a group is an outlier.
pub const OUTLIER_Z: f64 = 2.5;
/// Minimum number of groups for outlier detection.
pub const OUTLIER_MIN_GROUPS: usize = 4;
/// Minimum number of time points for a trend.
pub const TREND_MIN_POINTS: usize = 3;

const EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EngineError {
    #[error("no rows satisfy the subspace")]
    EmptySubspace,
    #[error("degenerate fact: {0}")]
    Degenerate(String),
    #[error("fact does not fit the table: {0}")]
    Structural(String),
}

impl EngineError {
    pub fn code(&self) -> &'static str {
        match self {
            EngineError::EmptySubspace => "EMPTY_SUBSPACE",
            EngineError::Degenerate(_) => "DEGENERATE",
            EngineError::Structural(_) => "STRUCTURAL",
        }
    }
}

fn degenerate<T>(msg: impl Into<String>) -> Result<T, EngineError> {
    Err(EngineError::Degenerate(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub key: String,
    pub value: f64,
    /// Second measure, for association facts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increasing,
    Decreasing,
    Flat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtremeKind {
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Derived {
    Value {
        scalar: f64,
    },
    Difference {
        a: f64,
        b: f64,
        abs_diff: f64,
        rel_diff: f64,
    },
    Proportion {
        share: f64,
        total: f64,
    },
    Trend {
        slope: f64,
        direction: Direction,
        start: f64,
        end: f64,
        start_key: String,
        end_key: String,
    },
    Categorization {
        categories: Vec<String>,
        counts: Vec<usize>,
    },
    Distribution {
        mean: f64,
        std: f64,
        min: f64,
        max: f64,
    },
    Rank {
        ordering: Vec<String>,
        focus_position: Option<usize>,
    },
    Association {
        pearson_r: f64,
    },
    Extreme {
        extreme: ExtremeKind,
        key: String,
        value: f64,
    },
    Outlier {
        outlier_keys: Vec<String>,
    },
}

impl Derived {
    /// Every number the record carries.
    pub fn numbers(&self) -> Vec<f64> {
        match self {
            Derived::Value { scalar } => vec![*scalar],
            Derived::Difference { a, b, abs_diff, rel_diff } => vec![*a, *b, *abs_diff, *rel_diff],
            Derived::Proportion { share, total } => vec![*share, *total],
            Derived::Trend { slope, start, end, .. } => vec![*slope, *start, *end],
            Derived::Categorization { counts, .. } => {
                let mut v: Vec<f64> = counts.iter().map(|c| *c as f64).collect();
                v.push(counts.len() as f64);
                v
            }
            Derived::Distribution { mean, std, min, max } => vec![*mean, *std, *min, *max],
            Derived::Rank { ordering, focus_position } => {
                let mut v = vec![ordering.len() as f64];
                v.extend(focus_position.map(|p| p as f64));
                v
            }
            Derived::Association { pearson_r } => vec![*pearson_r],
            Derived::Extreme { value, .. } => vec![*value],
            Derived::Outlier { outlier_keys } => vec![outlier_keys.len() as f64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactResult {
    pub fact: DataFact,
    pub groups: Vec<Group>,
    pub derived: Derived,
    pub focus_keys: Vec<String>,
    pub breakdown_kind: FieldKind,
}

/// Sum in the order given by a pairing of opposite ends, so that reversing
/// the input negates or preserves the result bit for bit.
fn symmetric_sum(values: &[f64]) -> f64 {
    let n = values.len();
    let mut total = 0.0;
    for k in 0..n / 2 {
        total += values[k] + values[n - 1 - k];
    }
    if n % 2 == 1 {
        total += values[n / 2];
    }
    total
}

fn mean(values: &[f64]) -> f64 {
    symmetric_sum(values) / values.len() as f64
}

/// Least-squares slope of `ys` against `xs`.
pub fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let dx: Vec<f64> = xs.iter().map(|x| x - mx).collect();
    let num: Vec<f64> = dx.iter().zip(ys).map(|(d, y)| d * (y - my)).collect();
    let den: Vec<f64> = dx.iter().map(|d| d * d).collect();
    let den = symmetric_sum(&den);
    if den == 0.0 {
        return 0.0;
    }
    symmetric_sum(&num) / den
}

/// Pearson correlation; `None` when either side has zero variance.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let mx = mean(xs);
    let my = mean(ys);
    let dx: Vec<f64> = xs.iter().map(|x| x - mx).collect();
    let dy: Vec<f64> = ys.iter().map(|y| y - my).collect();
    let sxy = symmetric_sum(&dx.iter().zip(&dy).map(|(a, b)| a * b).collect::<Vec<_>>());
    let sxx = symmetric_sum(&dx.iter().map(|a| a * a).collect::<Vec<_>>());
    let syy = symmetric_sum(&dy.iter().map(|b| b * b).collect::<Vec<_>>());
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Population standard deviation.
pub fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - m) * (v - m)).collect();
    (symmetric_sum(&sq) / values.len() as f64).sqrt()
}

/// Aggregates the non-null cells of one group. `None` when the aggregate
/// is undefined (no numbers).
fn aggregate(cells: &[&Cell], agg: Aggregate) -> Result<Option<f64>, EngineError> {
    if agg == Aggregate::Count {
        return Ok(Some(cells.iter().filter(|c| !c.is_null()).count() as f64));
    }
    let mut nums: Vec<f64> = cells.iter().filter_map(|c| c.as_f64()).collect();
    if nums.is_empty() {
        return Ok(None);
    }
    nums.sort_by(f64::total_cmp);
    Ok(Some(match agg {
        Aggregate::None => {
            if nums.len() > 1 {
                return Err(EngineError::Structural(
                    "aggregate none over a group with several values".into(),
                ));
            }
            nums[0]
        }
        Aggregate::Sum => nums.iter().sum(),
        Aggregate::Avg => nums.iter().sum::<f64>() / nums.len() as f64,
        Aggregate::Min => nums[0],
        Aggregate::Max => nums[nums.len() - 1],
        Aggregate::Count => unreachable!(),
    }))
}

fn resolve(t: &SubTable, field: &str) -> Result<usize, EngineError> {
    t.field_index(field)
        .ok_or_else(|| EngineError::Structural(format!("unknown field {field:?}")))
}

/// Natural ordering of group keys: numbers numerically, then text.
fn key_cmp(a: &str, b: &str) -> Ordering {
    Cell::Text(a.to_string()).sort_cmp(&Cell::Text(b.to_string()))
}

/// Ordering by value descending, ties by key.
fn value_desc(a: &Group, b: &Group) -> Ordering {
    b.value.total_cmp(&a.value).then_with(|| key_cmp(&a.key, &b.key))
}

/// Computes the derived result of `fact` over `t`.
pub fn compute_fact(fact: &DataFact, t: &SubTable) -> Result<FactResult, EngineError> {
    let ty = fact.fact_type;
    let [breakdown] = fact.breakdown.as_slice() else {
        return Err(EngineError::Structural("exactly one breakdown required".into()));
    };
    let bi = resolve(t, breakdown)?;
    let breakdown_kind = t.fields[bi].kind;
    let measures: &[Measure] = &fact.measure;
    let expected = if ty == FactType::Association { 2 } else { 1 };
    if measures.len() != expected {
        return Err(EngineError::Structural(format!("{ty} needs {expected} measures")));
    }
    let mi: Vec<usize> = measures.iter().map(|m| resolve(t, &m.field)).collect::<Result<_, _>>()?;
    for c in fact.subspace.iter().chain(&fact.focus) {
        resolve(t, &c.field)?;
    }
    if ty == FactType::Trend && breakdown_kind != FieldKind::Temporal {
        return Err(EngineError::Structural("trend breakdown must be temporal".into()));
    }

    let rows = subspace_rows(t, &fact.subspace).expect("fields resolved");
    if rows.is_empty() {
        return Err(EngineError::EmptySubspace);
    }

    // Group rows by breakdown key.
    let mut buckets: Vec<(String, Vec<&Vec<Cell>>)> = Vec::new();
    for row in &rows {
        if row[bi].is_null() {
            continue;
        }
        let key = row[bi].render();
        match buckets.iter_mut().find(|(k, _)| *k == key) {
            Some((_, rs)) => rs.push(row),
            None => buckets.push((key, vec![row])),
        }
    }
    let mut counts: Vec<(String, usize)> = buckets.iter().map(|(k, rs)| (k.clone(), rs.len())).collect();
    let mut groups: Vec<Group> = Vec::new();
    for (key, rs) in &buckets {
        let first: Vec<&Cell> = rs.iter().map(|r| &r[mi[0]]).collect();
        let Some(value) = aggregate(&first, measures[0].aggregate)? else {
            continue;
        };
        let paired = match mi.get(1) {
            Some(&j) => {
                let second: Vec<&Cell> = rs.iter().map(|r| &r[j]).collect();
                match aggregate(&second, measures[1].aggregate)? {
                    Some(v) => Some(v),
                    None => continue,
                }
            }
            None => None,
        };
        if !value.is_finite() || paired.is_some_and(|p| !p.is_finite()) {
            return degenerate(format!("non-finite aggregate for group {key}"));
        }
        groups.push(Group { key: key.clone(), value, paired });
    }
    if groups.is_empty() {
        return degenerate("no group has a defined aggregate");
    }

    // Deterministic group order.
    if breakdown_kind == FieldKind::Temporal {
        let ord = |k: &str| time_ordinal(k).unwrap_or(f64::INFINITY);
        groups.sort_by(|a, b| ord(&a.key).total_cmp(&ord(&b.key)).then_with(|| key_cmp(&a.key, &b.key)));
        counts.sort_by(|a, b| ord(&a.0).total_cmp(&ord(&b.0)).then_with(|| key_cmp(&a.0, &b.0)));
    } else if matches!(ty, FactType::Rank | FactType::Extreme) {
        groups.sort_by(value_desc);
        counts.sort_by(|a, b| key_cmp(&a.0, &b.0));
    } else {
        groups.sort_by(|a, b| key_cmp(&a.key, &b.key));
        counts.sort_by(|a, b| key_cmp(&a.0, &b.0));
    }

    // Focus clauses resolve to breakdown keys inside the subspace.
    let mut per_clause: Vec<Vec<String>> = Vec::new();
    for c in &fact.focus {
        let fi = resolve(t, &c.field)?;
        per_clause.push(focus_groups(&rows, bi, fi, &c.value));
    }
    let mut focus_keys: Vec<String> = Vec::new();
    for k in per_clause.iter().flatten() {
        if !focus_keys.contains(k) {
            focus_keys.push(k.clone());
        }
    }
    let value_of = |key: &str| groups.iter().find(|g| g.key == key).map(|g| g.value);
    let single_focus = |i: usize| -> Result<&String, EngineError> {
        match per_clause.get(i).map(|v| v.as_slice()) {
            Some([k]) => Ok(k),
            Some([]) => Err(EngineError::Structural("focus is outside the subspace".into())),
            Some(_) => Err(EngineError::Structural("focus matches several groups".into())),
            None => Err(EngineError::Structural("missing focus clause".into())),
        }
    };

    let values: Vec<f64> = groups.iter().map(|g| g.value).collect();
    let derived = match ty {
        FactType::Value => {
            if groups.len() != 1 || buckets.len() != 1 {
                return Err(EngineError::Structural("value fact does not pin a single group".into()));
            }
            Derived::Value { scalar: groups[0].value }
        }
        FactType::Difference => {
            let (ka, kb) = (single_focus(0)?, single_focus(1)?);
            let (Some(a), Some(b)) = (value_of(ka), value_of(kb)) else {
                return degenerate("a focus group has no value");
            };
            if b == 0.0 {
                return degenerate("relative difference with zero denominator");
            }
            Derived::Difference { a, b, abs_diff: a - b, rel_diff: (a - b) / b }
        }
        FactType::Proportion => {
            let k = single_focus(0)?;
            let Some(v) = value_of(k) else {
                return degenerate("focus group has no value");
            };
            if values.iter().any(|v| *v < 0.0) {
                return degenerate("share of negative values");
            }
            let total: f64 = values.iter().sum();
            if total == 0.0 {
                return degenerate("share with zero total");
            }
            Derived::Proportion { share: v / total, total }
        }
        FactType::Trend => {
            if groups.len() < TREND_MIN_POINTS {
                return degenerate(format!("trend needs {TREND_MIN_POINTS} time points, got {}", groups.len()));
            }
            let xs: Vec<f64> = groups
                .iter()
                .map(|g| time_ordinal(&g.key).ok_or_else(|| EngineError::Structural(format!("{:?} is not a time", g.key))))
                .collect::<Result<_, _>>()?;
            let slope = ls_slope(&xs, &values);
            let span = xs[xs.len() - 1] - xs[0];
            let scale = mean(&values).abs().max(EPS);
            let direction = if (slope.abs() * span / scale) < FLAT_THRESHOLD {
                Direction::Flat
            } else if slope > 0.0 {
                Direction::Increasing
            } else {
                Direction::Decreasing
            };
            let (first, last) = (&groups[0], &groups[groups.len() - 1]);
            Derived::Trend {
                slope,
                direction,
                start: first.value,
                end: last.value,
                start_key: first.key.clone(),
                end_key: last.key.clone(),
            }
        }
        FactType::Categorization => Derived::Categorization {
            categories: counts.iter().map(|(k, _)| k.clone()).collect(),
            counts: counts.iter().map(|(_, n)| *n).collect(),
        },
        FactType::Distribution => Derived::Distribution {
            mean: mean(&values),
            std: population_std(&values),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        },
        FactType::Rank => {
            let mut sorted = groups.clone();
            sorted.sort_by(value_desc);
            let ordering: Vec<String> = sorted.into_iter().map(|g| g.key).collect();
            let focus_position = focus_keys
                .first()
                .and_then(|k| ordering.iter().position(|o| o == k))
                .map(|p| p + 1);
            Derived::Rank { ordering, focus_position }
        }
        FactType::Association => {
            if groups.len() < 2 {
                return degenerate("association needs at least 2 paired points");
            }
            let ys: Vec<f64> = groups.iter().map(|g| g.paired.expect("paired")).collect();
            match pearson(&values, &ys) {
                Some(r) => Derived::Association { pearson_r: r },
                None => return degenerate("association over a constant measure"),
            }
        }
        FactType::Extreme => {
            let extreme = match measures[0].aggregate {
                Aggregate::Min => ExtremeKind::Min,
                _ => ExtremeKind::Max,
            };
            let best = groups
                .iter()
                .min_by(|a, b| {
                    let by_value = match extreme {
                        ExtremeKind::Max => b.value.total_cmp(&a.value),
                        ExtremeKind::Min => a.value.total_cmp(&b.value),
                    };
                    by_value.then_with(|| key_cmp(&a.key, &b.key))
                })
                .expect("groups nonempty");
            Derived::Extreme { extreme, key: best.key.clone(), value: best.value }
        }
        FactType::Outlier => {
            let mut outlier_keys = Vec::new();
            if groups.len() >= OUTLIER_MIN_GROUPS {
                let m = mean(&values);
                let sd = population_std(&values);
                if sd > 0.0 {
                    outlier_keys = groups
                        .iter()
                        .filter(|g| ((g.value - m) / sd).abs() > OUTLIER_Z)
                        .map(|g| g.key.clone())
                        .collect();
                }
            }
            Derived::Outlier { outlier_keys }
        }
    };

    Ok(FactResult { fact: fact.clone(), groups, derived, focus_keys, breakdown_kind })
}
