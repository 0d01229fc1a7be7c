use serde::{Deserialize, Serialize};

use super::{Derived, FactResult};
use crate::fact::{Aggregate, FactType, Measure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mark {
    Line,
    Bar,
    GroupedBar,
    Pie,
    Scatter,
    BigNumber,
}

impl Mark {
    pub fn for_type(ty: FactType) -> Self {
        match ty {
            FactType::Value => Mark::BigNumber,
            FactType::Trend | FactType::Outlier => Mark::Line,
            FactType::Difference => Mark::GroupedBar,
            FactType::Proportion => Mark::Pie,
            FactType::Association => Mark::Scatter,
            FactType::Rank | FactType::Extreme | FactType::Categorization | FactType::Distribution => Mark::Bar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub field: String,
    pub title: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartDatum {
    pub key: String,
    pub value: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paired: Option<f64>,
}

/// Renderer-neutral chart description served to the UI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSpec {
    pub mark: Mark,
    pub x: Axis,
    pub y: Axis,
    pub highlight: Vec<String>,
    pub caption: String,
    pub source: String,
    pub data: Vec<ChartDatum>,
}

/// Human title for a measure, preferring the pinned series name over a
/// bare `value` column.
pub(crate) fn measure_title(r: &FactResult, m: &Measure) -> String {
    let base = if m.field.eq_ignore_ascii_case("value") {
        r.fact
            .subspace
            .iter()
            .find(|c| c.field.eq_ignore_ascii_case("series"))
            .map(|c| c.value.render())
            .unwrap_or_else(|| m.field.clone())
    } else {
        m.field.clone()
    };
    match m.aggregate {
        Aggregate::None => base,
        Aggregate::Count => format!("Count of {base}"),
        Aggregate::Sum => format!("Total {base}"),
        Aggregate::Avg => format!("Average {base}"),
        Aggregate::Min => format!("Minimum {base}"),
        Aggregate::Max => format!("Maximum {base}"),
    }
}

fn axis_title(field: &str) -> String {
    let mut s = field.replace('_', " ");
    if let Some(first) = s.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    s
}

pub fn chart_spec(r: &FactResult, provenance: &str) -> ChartSpec {
    let fact = &r.fact;
    let breakdown = fact.breakdown.first().cloned().unwrap_or_default();
    let (x, y) = if fact.fact_type == FactType::Association && fact.measure.len() == 2 {
        (
            Axis { field: fact.measure[0].field.clone(), title: measure_title(r, &fact.measure[0]) },
            Axis { field: fact.measure[1].field.clone(), title: measure_title(r, &fact.measure[1]) },
        )
    } else {
        let m = &fact.measure[0];
        (
            Axis { title: axis_title(&breakdown), field: breakdown },
            Axis { field: m.field.clone(), title: measure_title(r, m) },
        )
    };
    let mut highlight = r.focus_keys.clone();
    let extra: Vec<String> = match &r.derived {
        Derived::Extreme { key, .. } => vec![key.clone()],
        Derived::Outlier { outlier_keys } => outlier_keys.clone(),
        _ => Vec::new(),
    };
    for k in extra {
        if !highlight.contains(&k) {
            highlight.push(k);
        }
    }
    let caption = if fact.description.trim().is_empty() {
        super::canonical_description(r)
    } else {
        fact.description.clone()
    };
    ChartSpec {
        mark: Mark::for_type(fact.fact_type),
        x,
        y,
        highlight,
        caption,
        source: provenance.to_string(),
        data: r
            .groups
            .iter()
            .map(|g| ChartDatum { key: g.key.clone(), value: g.value, paired: g.paired })
            .collect(),
    }
}
