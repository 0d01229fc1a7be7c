//! Prompt rendering, model calls and response parsing for the five agent
//! steps: decomposition, text-to-SQL, fact extraction, fact evaluation and
//! planning.
//!
//! Calls go through an [`LlmBackend`]. Structured responses that fail to
//! parse are re-requested with the parse error appended, up to the
//! configured repair budget.

mod backend;
pub mod parse;
pub mod prompts;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::dataset::{Dataset, SubTable, SAMPLE_VALUES};
use crate::fact::{parse_fact, DataFact};

pub use backend::{
    input_hash, read_transcript, HttpChatBackend, LlmBackend, Recorder, ReplayBackend, Script, ScriptRule,
    ScriptedBackend, TranscriptEntry, UnavailableBackend,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stance {
    Support,
    Oppose,
}

impl Stance {
    pub fn as_str(self) -> &'static str {
        match self {
            Stance::Support => "support",
            Stance::Oppose => "oppose",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "support" => Some(Stance::Support),
            "oppose" => Some(Stance::Oppose),
            _ => None,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Stance::Support => Stance::Oppose,
            Stance::Oppose => Stance::Support,
        }
    }
}

impl fmt::Display for Stance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Decompose,
    Text2sql,
    Extract,
    Evaluate,
    Plan,
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptKind::Decompose => "decompose",
            PromptKind::Text2sql => "text2sql",
            PromptKind::Extract => "extract",
            PromptKind::Evaluate => "evaluate",
            PromptKind::Plan => "plan",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LlmError {
    #[error("language model unavailable: {0}")]
    Unavailable(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("empty response")]
    EmptyResponse,
    #[error("no recorded {kind} response for prompt {input_hash}")]
    ReplayMiss { kind: PromptKind, input_hash: String },
    #[error("transcript: {0}")]
    Transcript(String),
}

impl LlmError {
    pub fn code(&self) -> &'static str {
        match self {
            LlmError::Unavailable(_) => "LLM_UNAVAILABLE",
            LlmError::MalformedResponse(_) => "MALFORMED_RESPONSE",
            LlmError::EmptyResponse => "EMPTY_RESPONSE",
            LlmError::ReplayMiss { .. } => "REPLAY_MISS",
            LlmError::Transcript(_) => "TRANSCRIPT",
        }
    }

    /// Errors that must stop a pipeline instead of degrading it.
    pub fn is_fatal(&self) -> bool {
        matches!(self, LlmError::ReplayMiss { .. } | LlmError::Transcript(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubQuery {
    pub text: String,
    pub direction: String,
    pub stance: Stance,
}

/// Maximum words in a direction label.
pub const DIRECTION_WORDS: usize = 3;
/// Sub-queries per decomposition.
pub const SUBQUERIES: usize = 3;
/// Facts requested per sub-table.
pub const FACTS_PER_TABLE: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactEvaluation {
    pub fact_index: usize,
    pub support_prob: f64,
    pub oppose_prob: f64,
    pub predicted_label: Stance,
    pub explanation: String,
    /// Both probabilities were equal; the label defaulted to support.
    #[serde(default)]
    pub tie: bool,
    /// The model gave no usable entry for this fact.
    #[serde(default)]
    pub defaulted: bool,
}

impl FactEvaluation {
    pub fn from_probs(fact_index: usize, support: f64, oppose: f64, explanation: String) -> Self {
        let usable = support.is_finite() && oppose.is_finite() && support >= 0.0 && oppose >= 0.0 && support + oppose > 0.0;
        if !usable {
            return Self::defaulted(fact_index, "unusable probabilities; defaulted");
        }
        let s = support / (support + oppose);
        let o = 1.0 - s;
        Self {
            fact_index,
            support_prob: s,
            oppose_prob: o,
            predicted_label: if o > s { Stance::Oppose } else { Stance::Support },
            explanation,
            tie: s == o,
            defaulted: false,
        }
    }

    pub fn defaulted(fact_index: usize, why: &str) -> Self {
        Self {
            fact_index,
            support_prob: 0.5,
            oppose_prob: 0.5,
            predicted_label: Stance::Support,
            explanation: why.to_string(),
            tie: true,
            defaulted: true,
        }
    }

    /// Probability of the given stance.
    pub fn prob(&self, stance: Stance) -> f64 {
        match stance {
            Stance::Support => self.support_prob,
            Stance::Oppose => self.oppose_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecommendation {
    pub reasoning: String,
    pub recommend_index: usize,
    /// The model's answer was unusable and the fallback was applied.
    #[serde(default)]
    pub fallback: bool,
}

/// A child node as shown to the planner.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanCandidate {
    pub index: usize,
    pub query: String,
    pub facts: Vec<PlanFact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFact {
    pub description: String,
    pub stance: Stance,
    pub relevance: f64,
}

/// Table summary handed to the text-to-SQL prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct TableSummary {
    pub table_name: String,
    pub columns: Vec<String>,
    pub values: Vec<(String, Vec<String>)>,
}

impl TableSummary {
    pub fn of(d: &Dataset) -> Self {
        Self {
            table_name: d.id.clone(),
            columns: d.fields.iter().map(|f| f.name.clone()).collect(),
            values: d
                .fields
                .iter()
                .map(|f| {
                    let vals = d
                        .distinct_values(&f.name)
                        .into_iter()
                        .take(SAMPLE_VALUES)
                        .map(|c| c.render())
                        .collect();
                    (f.name.clone(), vals)
                })
                .collect(),
        }
    }

    fn columns_text(&self) -> String {
        serde_json::to_string(&self.columns).expect("strings serialize")
    }

    fn values_text(&self) -> String {
        self.values
            .iter()
            .map(|(c, v)| format!("{c}: {}", serde_json::to_string(v).expect("strings serialize")))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

/// Facts parsed from one extraction response.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub facts: Vec<DataFact>,
    /// Reasons for candidates that were discarded.
    pub dropped: Vec<String>,
}

pub struct LlmGateway {
    backend: Arc<dyn LlmBackend>,
    parse_repairs: u32,
}

impl LlmGateway {
    pub fn new(backend: Arc<dyn LlmBackend>, parse_repairs: u32) -> Self {
        Self { backend, parse_repairs }
    }

    pub fn backend(&self) -> &Arc<dyn LlmBackend> {
        &self.backend
    }

    fn call_parsed<T>(
        &self,
        kind: PromptKind,
        prompt: &str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, LlmError> {
        let mut current = prompt.to_string();
        let mut last = String::new();
        for _ in 0..=self.parse_repairs {
            let response = self.backend.complete(kind, &current)?;
            match parse(&response) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    tracing::debug!(%kind, "unusable response: {e}");
                    current = format!("{prompt}{}", prompts::repair_suffix(&e));
                    last = e;
                }
            }
        }
        Err(LlmError::MalformedResponse(last))
    }

    pub fn render_decompose(query: &str, stance: Stance) -> String {
        prompts::render(prompts::DECOMPOSE, &[("stance", stance.as_str()), ("query", query)])
    }

    /// Three sub-queries exploring `query` under `stance`.
    pub fn decompose(&self, query: &str, stance: Stance) -> Result<Vec<SubQuery>, LlmError> {
        let prompt = Self::render_decompose(query, stance);
        self.call_parsed(PromptKind::Decompose, &prompt, |r| parse_decomposition(r, stance))
    }

    pub fn render_text2sql(subquery: &str, table: &TableSummary, relevant_series: &[String]) -> String {
        let series = serde_json::to_string(relevant_series).expect("strings serialize");
        prompts::render(
            prompts::TEXT2SQL,
            &[
                ("table_name", &table.table_name),
                ("columns", &table.columns_text()),
                ("values", &table.values_text()),
                ("query", subquery),
                ("relevant_series", &series),
            ],
        )
    }

    fn sql_from(&self, prompt: &str) -> Result<String, LlmError> {
        let raw = self.backend.complete(PromptKind::Text2sql, prompt)?;
        let sql = parse::strip_code_fences(&raw);
        if sql.is_empty() {
            return Err(LlmError::EmptyResponse);
        }
        Ok(sql)
    }

    pub fn generate_sql(
        &self,
        subquery: &str,
        table: &TableSummary,
        relevant_series: &[String],
    ) -> Result<String, LlmError> {
        self.sql_from(&Self::render_text2sql(subquery, table, relevant_series))
    }

    /// Re-prompts after `previous` was rejected with `errors`.
    pub fn repair_sql(
        &self,
        subquery: &str,
        table: &TableSummary,
        relevant_series: &[String],
        previous: &str,
        errors: &str,
    ) -> Result<String, LlmError> {
        let prompt = format!(
            "{}{}",
            Self::render_text2sql(subquery, table, relevant_series),
            prompts::sql_repair_suffix(previous, errors)
        );
        self.sql_from(&prompt)
    }

    pub fn render_extract(table: &SubTable, statement: &str, query: &str, stance: Stance) -> String {
        prompts::render(
            prompts::EXTRACT,
            &[
                ("stance", stance.as_str()),
                ("data", &table.to_text()),
                ("statement", statement),
                ("query", query),
            ],
        )
    }

    /// Up to three facts; unparsable candidates are dropped individually.
    pub fn extract_facts(
        &self,
        table: &SubTable,
        statement: &str,
        query: &str,
        stance: Stance,
    ) -> Result<Extraction, LlmError> {
        let prompt = Self::render_extract(table, statement, query, stance);
        let response = self.backend.complete(PromptKind::Extract, &prompt)?;
        Ok(parse_extraction(&response))
    }

    pub fn render_evaluate(facts: &[DataFact], statement: &str) -> String {
        let items: Vec<String> = facts
            .iter()
            .enumerate()
            .map(|(i, f)| format!("{{\"index\": {i}, \"fact\": {}}}", serde_json::to_string(f).expect("fact serializes")))
            .collect();
        let facts_text = format!("[{}]", items.join(", "));
        prompts::render(prompts::EVALUATE, &[("facts", &facts_text), ("statement", statement)])
    }

    /// One evaluation per fact, in fact order.
    pub fn evaluate_facts(&self, facts: &[DataFact], statement: &str) -> Result<Vec<FactEvaluation>, LlmError> {
        if facts.is_empty() {
            return Ok(Vec::new());
        }
        let prompt = Self::render_evaluate(facts, statement);
        self.call_parsed(PromptKind::Evaluate, &prompt, |r| parse_evaluations(r, facts.len()))
    }

    pub fn render_plan(candidates: &[PlanCandidate], statement: &str, stance: Stance) -> String {
        let mut blocks = Vec::new();
        for c in candidates {
            let mut b = format!("Index: {}\nSub-query: {}\nData facts:", c.index, c.query);
            if c.facts.is_empty() {
                b.push_str("\n    (none retrieved)");
            }
            for f in &c.facts {
                b.push_str(&format!(
                    "\n    - Fact: {}\n      Stance: {}\n      Relevance: {:.2}",
                    f.description, f.stance, f.relevance
                ));
            }
            blocks.push(b);
        }
        prompts::render(
            prompts::PLAN,
            &[("stance", stance.as_str()), ("statement", statement), ("queries_facts", &blocks.join("\n\n"))],
        )
    }

    /// The recommended candidate, or `fallback` (flagged) when the model is
    /// unavailable or answers out of range.
    pub fn plan(
        &self,
        candidates: &[PlanCandidate],
        statement: &str,
        stance: Stance,
        fallback: usize,
    ) -> Result<PlanRecommendation, LlmError> {
        let prompt = Self::render_plan(candidates, statement, stance);
        let fallback_with = |why: String| PlanRecommendation { reasoning: why, recommend_index: fallback, fallback: true };
        match self.call_parsed(PromptKind::Plan, &prompt, parse_plan) {
            Ok(rec) if rec.recommend_index < candidates.len() => Ok(rec),
            Ok(rec) => Ok(fallback_with(format!(
                "recommended index {} is out of range; highest-scoring child used",
                rec.recommend_index
            ))),
            Err(e) if e.is_fatal() => Err(e),
            Err(e) => Ok(fallback_with(format!("{e}; highest-scoring child used"))),
        }
    }
}

fn string_list(v: Option<&Json>, what: &str) -> Result<Vec<String>, String> {
    match v {
        Some(Json::Array(items)) => items
            .iter()
            .map(|i| match i {
                Json::String(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
                _ => Err(format!("{what} entries must be non-empty strings")),
            })
            .collect(),
        _ => Err(format!("missing {what}")),
    }
}

pub fn parse_decomposition(response: &str, stance: Stance) -> Result<Vec<SubQuery>, String> {
    let obj = match parse::first_json_object(response) {
        Some(Json::Object(o)) => o,
        _ => return Err("expected a JSON object with queryList and directionList".into()),
    };
    let queries = string_list(parse::get_key(&obj, "queryList"), "queryList")?;
    let directions = string_list(parse::get_key(&obj, "directionList"), "directionList")?;
    if queries.len() != SUBQUERIES {
        return Err(format!("queryList must have {SUBQUERIES} items, got {}", queries.len()));
    }
    if directions.len() != SUBQUERIES {
        return Err(format!("directionList must have {SUBQUERIES} items, got {}", directions.len()));
    }
    Ok(queries
        .into_iter()
        .zip(directions)
        .map(|(text, d)| SubQuery {
            text,
            direction: d.split_whitespace().take(DIRECTION_WORDS).collect::<Vec<_>>().join(" "),
            stance,
        })
        .collect())
}

pub fn parse_extraction(response: &str) -> Extraction {
    let mut out = Extraction::default();
    for (i, cand) in parse::fact_candidates(response).into_iter().enumerate() {
        match cand.map_err(|e| e.to_string()).and_then(|v| parse_fact(&v).map_err(|e| e.to_string())) {
            Ok(_) if out.facts.len() == FACTS_PER_TABLE => {
                out.dropped.push(format!("candidate {i}: more than {FACTS_PER_TABLE} facts"))
            }
            Ok(f) => out.facts.push(f),
            Err(e) => out.dropped.push(format!("candidate {i}: {e}")),
        }
    }
    out
}

pub fn parse_evaluations(response: &str, n: usize) -> Result<Vec<FactEvaluation>, String> {
    let items = match parse::first_json(response) {
        Some(Json::Array(a)) => a,
        Some(obj @ Json::Object(_)) => vec![obj],
        _ => return Err("expected a JSON list of evaluations".into()),
    };
    let mut slots: Vec<Option<FactEvaluation>> = vec![None; n];
    for (pos, item) in items.iter().enumerate() {
        let Json::Object(o) = item else {
            return Err("evaluation entries must be objects".into());
        };
        let index = parse::get_key(o, "index")
            .and_then(parse::loose_number)
            .map(|x| x as usize)
            .unwrap_or(pos);
        if index >= n || slots[index].is_some() {
            continue;
        }
        let support = parse::get_key(o, "support").and_then(parse::loose_number);
        let oppose = parse::get_key(o, "oppose").and_then(parse::loose_number);
        let explanation = parse::get_key(o, "explanation").map(parse::loose_text).unwrap_or_default();
        slots[index] = Some(match (support, oppose) {
            (Some(s), Some(o)) => FactEvaluation::from_probs(index, s, o, explanation),
            (Some(s), None) if (0.0..=1.0).contains(&s) => FactEvaluation::from_probs(index, s, 1.0 - s, explanation),
            (None, Some(o)) if (0.0..=1.0).contains(&o) => FactEvaluation::from_probs(index, 1.0 - o, o, explanation),
            _ => FactEvaluation::defaulted(index, "no probabilities given; defaulted"),
        });
    }
    Ok(slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.unwrap_or_else(|| FactEvaluation::defaulted(i, "missing; defaulted")))
        .collect())
}

pub fn parse_plan(response: &str) -> Result<PlanRecommendation, String> {
    let obj = match parse::first_json_object(response) {
        Some(Json::Object(o)) => o,
        _ => return Err("expected a JSON object with Reasoning and Recommend Index".into()),
    };
    let idx = parse::get_key(&obj, "Recommend Index")
        .and_then(parse::loose_number)
        .ok_or("missing Recommend Index")?;
    if idx < 0.0 || idx.fract() != 0.0 {
        return Err(format!("Recommend Index {idx} is not a non-negative integer"));
    }
    Ok(PlanRecommendation {
        reasoning: parse::get_key(&obj, "Reasoning").map(parse::loose_text).unwrap_or_default(),
        recommend_index: idx as usize,
        fallback: false,
    })
}
