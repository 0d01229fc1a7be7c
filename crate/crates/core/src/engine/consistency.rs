use std::collections::BTreeSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::chart::measure_title;
use super::{Derived, Direction, ExtremeKind, FactResult};
use crate::dataset::{parse_year, Literal};

/// Relative tolerance for matching a cited number.
pub const NUMBER_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MismatchKind {
    NumberNotFound,
    YearOutOfRange,
    DirectionConflict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub kind: MismatchKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub ok: bool,
    pub mismatches: Vec<Mismatch>,
}

impl ConsistencyReport {
    pub fn has(&self, kind: MismatchKind) -> bool {
        self.mismatches.iter().any(|m| m.kind == kind)
    }
}

const UP: &[&str] = &[
    "increase", "increased", "increases", "increasing", "rise", "rises", "rising", "rose", "risen",
    "grow", "grows", "growing", "grew", "grown", "growth",
];
const DOWN: &[&str] = &[
    "decrease", "decreased", "decreases", "decreasing", "decline", "declined", "declines",
    "declining", "fall", "falls", "falling", "fell", "fallen",
];

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)(\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?)(\s*(?:thousand|million|billion|trillion)\b)?(\s*(?:%|percent\b|per cent\b))?",
        )
        .unwrap()
    })
}

#[derive(Debug, Clone, PartialEq)]
struct Cited {
    text: String,
    value: f64,
    percent: bool,
    year: Option<i64>,
}

/// Words that make "richest 10%" name a population group, not a value.
const GROUP_WORDS: &[&str] = &["top", "bottom", "richest", "poorest", "highest", "lowest", "wealthiest"];

fn group_qualifier(before: &str) -> bool {
    before
        .split_whitespace()
        .next_back()
        .is_some_and(|w| GROUP_WORDS.contains(&w.to_ascii_lowercase().as_str()))
}

fn cited_numbers(text: &str) -> Vec<Cited> {
    let mut out = Vec::new();
    for caps in number_re().captures_iter(text) {
        let whole = caps.get(0).unwrap();
        let digits = caps.get(1).unwrap();
        let before = text[..whole.start()].chars().next_back();
        let after = text[digits.end()..].chars().next();
        if before.is_some_and(|c| c.is_alphabetic() || c == '.' || c == '_')
            || (caps.get(2).is_none() && caps.get(3).is_none() && after.is_some_and(|c| c.is_alphabetic() || c == '_'))
        {
            continue;
        }
        if caps.get(3).is_some() && group_qualifier(&text[..whole.start()]) {
            continue;
        }
        let raw = digits.as_str();
        let Ok(mut value) = raw.replace(',', "").parse::<f64>() else {
            continue;
        };
        if let Some(m) = caps.get(2) {
            value *= match m.as_str().trim().to_ascii_lowercase().as_str() {
                "thousand" => 1e3,
                "million" => 1e6,
                "billion" => 1e9,
                _ => 1e12,
            };
        }
        let percent = caps.get(3).is_some();
        let plain = caps.get(2).is_none() && !percent && raw.len() == 4 && raw.bytes().all(|b| b.is_ascii_digit());
        let year = if plain { parse_year(raw) } else { None };
        out.push(Cited { text: whole.as_str().trim().to_string(), value, percent, year });
    }
    out
}

fn close(x: f64, v: f64) -> bool {
    if v == 0.0 {
        return x == 0.0;
    }
    (x - v).abs() <= NUMBER_TOLERANCE * v.abs()
}

struct Reference {
    values: Vec<f64>,
    years: BTreeSet<i64>,
}

fn reference(r: &FactResult) -> Reference {
    let mut values: Vec<f64> = Vec::new();
    let mut years = BTreeSet::new();
    fn absorb_text(s: &str, values: &mut Vec<f64>, years: &mut BTreeSet<i64>) {
        for c in cited_numbers(s) {
            values.push(c.value);
            if let Some(y) = c.year {
                years.insert(y);
            }
        }
    }
    for g in &r.groups {
        values.push(g.value);
        values.extend(g.paired);
        absorb_text(&g.key, &mut values, &mut years);
    }
    values.push(r.groups.len() as f64);
    values.extend(r.derived.numbers());
    for c in r.fact.subspace.iter().chain(&r.fact.focus) {
        match &c.value {
            Literal::Number(n) => {
                values.push(*n);
                if n.fract() == 0.0 {
                    if let Some(y) = parse_year(&format!("{n}")) {
                        years.insert(y);
                    }
                }
            }
            Literal::Text(t) => absorb_text(t, &mut values, &mut years),
        }
        absorb_text(&c.field, &mut values, &mut years);
    }
    for m in &r.fact.measure {
        absorb_text(&m.field, &mut values, &mut years);
    }
    for b in &r.fact.breakdown {
        absorb_text(b, &mut values, &mut years);
    }
    let values = values.into_iter().filter(|v| v.is_finite()).map(f64::abs).collect();
    Reference { values, years }
}

fn words(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .collect()
}

/// Compares a caption with the computed result.
pub fn check_description(r: &FactResult, description: &str) -> ConsistencyReport {
    let reference = reference(r);
    let mut mismatches = Vec::new();
    let cited = cited_numbers(description);
    let matches_value = |c: &Cited| {
        reference.values.iter().any(|v| {
            close(c.value, *v) || (c.percent && (close(c.value / 100.0, *v) || close(c.value, v * 100.0)))
        })
    };

    let mut cited_years: Vec<i64> = Vec::new();
    for c in &cited {
        match c.year {
            Some(y) if reference.years.contains(&y) => cited_years.push(y),
            Some(y) if !matches_value(c) => {
                cited_years.push(y);
                mismatches.push(Mismatch {
                    kind: MismatchKind::YearOutOfRange,
                    detail: format!("year {y} does not appear in the result"),
                });
            }
            _ if matches_value(c) => {}
            _ => mismatches.push(Mismatch {
                kind: MismatchKind::NumberNotFound,
                detail: format!("{} matches no computed value", c.text),
            }),
        }
    }

    if let Derived::Trend { direction, start_key, end_key, .. } = &r.derived {
        if let (Some(first), Some(last)) = (parse_year(start_key), parse_year(end_key)) {
            let lo = cited_years.iter().min();
            let hi = cited_years.iter().max();
            if let (Some(&lo), Some(&hi)) = (lo, hi) {
                if lo != hi && (lo, hi) != (first, last) {
                    mismatches.push(Mismatch {
                        kind: MismatchKind::YearOutOfRange,
                        detail: format!("caption spans {lo}-{hi} but the result spans {first}-{last}"),
                    });
                }
            }
        }
        let w = words(description);
        let up = UP.iter().any(|x| w.contains(*x));
        let down = DOWN.iter().any(|x| w.contains(*x));
        let conflict = match direction {
            Direction::Increasing => down && !up,
            Direction::Decreasing => up && !down,
            Direction::Flat => false,
        };
        if conflict {
            let said = if up { "an increase" } else { "a decrease" };
            mismatches.push(Mismatch {
                kind: MismatchKind::DirectionConflict,
                detail: format!("caption describes {said} but the trend is {direction:?}").to_lowercase(),
            });
        }
    }

    ConsistencyReport { ok: mismatches.is_empty(), mismatches }
}

/// Formats a number so that the cited text stays within tolerance.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    let text = if v.fract() == 0.0 && a < 1e15 {
        group_thousands(&format!("{a:.0}"))
    } else if a >= 100.0 {
        let s = format!("{a:.2}");
        let (int, frac) = s.split_once('.').unwrap();
        format!("{}.{frac}", group_thousands(int))
    } else {
        let decimals = (3 - a.log10().floor() as i32).max(0) as usize;
        let s = format!("{a:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    };
    if v < 0.0 {
        format!("-{text}")
    } else {
        text
    }
}

fn group_thousands(int: &str) -> String {
    let bytes = int.as_bytes();
    let mut out = String::new();
    for (i, b) in bytes.iter().enumerate() {
        if i > 0 && (bytes.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(*b as char);
    }
    out
}

fn percent(v: f64) -> String {
    format!("{}%", format_number(v * 100.0))
}

fn scope(r: &FactResult) -> String {
    let parts: Vec<String> = r.fact.subspace.iter().map(|c| c.value.render()).collect();
    if parts.is_empty() {
        String::new()
    } else {
        format!(" for {}", parts.join(", "))
    }
}

/// Caption generated from the result alone; always passes
/// [`check_description`].
pub fn canonical_description(r: &FactResult) -> String {
    let fact = &r.fact;
    let m = measure_title(r, &fact.measure[0]);
    let breakdown = fact.breakdown.first().map(String::as_str).unwrap_or("group");
    let n = r.groups.len();
    let sc = scope(r);
    match &r.derived {
        Derived::Value { scalar } => format!("{m}{sc} was {}.", format_number(*scalar)),
        Derived::Difference { a, b, abs_diff, rel_diff } => {
            let ka = r.focus_keys.first().cloned().unwrap_or_default();
            let kb = r.focus_keys.get(1).cloned().unwrap_or_else(|| ka.clone());
            format!(
                "{m}{sc} was {} for {ka} versus {} for {kb}, a difference of {} ({}).",
                format_number(*a),
                format_number(*b),
                format_number(*abs_diff),
                percent(*rel_diff)
            )
        }
        Derived::Proportion { share, .. } => {
            let k = r.focus_keys.first().cloned().unwrap_or_default();
            format!("{k} accounts for {} of {m}{sc} across {n} {breakdown} groups.", percent(*share))
        }
        Derived::Trend { direction, start, end, start_key, end_key, .. } => {
            let verb = match direction {
                Direction::Increasing => "went up",
                Direction::Decreasing => "went down",
                Direction::Flat => "stayed roughly flat",
            };
            format!(
                "{m}{sc} {verb} from {} in {start_key} to {} in {end_key}.",
                format_number(*start),
                format_number(*end)
            )
        }
        Derived::Categorization { categories, .. } => {
            format!("{m}{sc} covers {} {breakdown} categories: {}.", categories.len(), categories.join(", "))
        }
        Derived::Distribution { mean, std, min, max } => format!(
            "{m}{sc} across {n} {breakdown} groups averages {} (standard deviation {}), ranging from {} to {}.",
            format_number(*mean),
            format_number(*std),
            format_number(*min),
            format_number(*max)
        ),
        Derived::Rank { ordering, focus_position } => {
            let top = &ordering[0];
            let v = r.groups.iter().find(|g| &g.key == top).map(|g| g.value).unwrap_or_default();
            let mut s = format!("{top} ranks first among {n} {breakdown} groups by {m}{sc} with {}", format_number(v));
            if let (Some(p), Some(k)) = (focus_position, r.focus_keys.first()) {
                s.push_str(&format!("; {k} is at position {p}"));
            }
            s.push('.');
            s
        }
        Derived::Association { pearson_r } => {
            let m2 = measure_title(r, &fact.measure[1]);
            format!(
                "{m} and {m2}{sc} have a correlation of {} across {n} {breakdown} groups.",
                format_number(*pearson_r)
            )
        }
        Derived::Extreme { extreme, key, value } => {
            let word = match extreme {
                ExtremeKind::Max => "highest",
                ExtremeKind::Min => "lowest",
            };
            format!("{key} has the {word} {m}{sc} at {}.", format_number(*value))
        }
        Derived::Outlier { outlier_keys } => {
            if outlier_keys.is_empty() {
                format!("No {breakdown} group stands out in {m}{sc}.")
            } else {
                format!("{} stand out as outliers in {m}{sc}.", outlier_keys.join(", "))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_decorated_numbers() {
        let c = cited_numbers("reached 6,037,000 people, 1.5 million more; 30.07% in 2023 (CO2)");
        let vals: Vec<(f64, bool, Option<i64>)> = c.iter().map(|c| (c.value, c.percent, c.year)).collect();
        assert_eq!(
            vals,
            vec![(6_037_000.0, false, None), (1_500_000.0, false, None), (30.07, true, None), (2023.0, false, Some(2023))]
        );
    }

    #[test]
    fn number_formatting() {
        assert_eq!(format_number(6_037_000.0), "6,037,000");
        assert_eq!(format_number(24.64), "24.64");
        assert_eq!(format_number(1234.5678), "1,234.57");
        assert_eq!(format_number(0.428_312), "0.4283");
        assert_eq!(format_number(-3.0), "-3");
        assert_eq!(format_number(0.000_012_346), "0.00001235");
    }
}
