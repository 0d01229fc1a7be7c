//! The expansion pipeline: decompose, search, extract, evaluate, rank and
//! plan. Work for a mutation is prepared against a read-only view and
//! committed to the tree in one step.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::config::RetrievalConfig;
use crate::dataset::{execute_query, validate_query, Dataset, DatasetStore, StoreError, SubTable};
use crate::embedding::{relevance, relevant_series, EmbeddingError, EmbeddingProvider, FieldIndex};
use crate::engine::{canonical_description, chart_spec, check_description, compute_fact, FactResult};
use crate::fact::{validate_fact, DataFact};
use crate::llm::{FactEvaluation, LlmError, LlmGateway, PlanCandidate, PlanFact, Stance, SubQuery, TableSummary};

use super::{
    rank_facts, Event, ExpansionAction, ExpansionObservation, FactRef, NodeId, NodeStatus,
    RetrievalNode, RetrievalTree, StoredFact, StoryItem, TreeError,
};

/// Series names offered to the text-to-SQL prompt.
const RELEVANT_SERIES: usize = 3;

/// Datasets and their precomputed field embeddings.
pub struct Catalog {
    pub store: DatasetStore,
    pub index: FieldIndex,
}

#[derive(Debug, thiserror::Error)]
pub enum CatalogError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

impl CatalogError {
    pub fn code(&self) -> &'static str {
        match self {
            CatalogError::Store(e) => e.code(),
            CatalogError::Embedding(e) => e.code(),
        }
    }
}

impl Catalog {
    /// Embeds the dataset's fields, then stores it.
    pub fn add(&mut self, d: Dataset, provider: &dyn EmbeddingProvider) -> Result<(), CatalogError> {
        self.index.upsert(&d, provider)?;
        self.store.insert(d)?;
        Ok(())
    }
}

/// A child computed outside the tree.
struct Draft {
    query: SubQuery,
    facts: Vec<StoredFact>,
    sources: Vec<SubTable>,
    notes: Vec<String>,
}

struct StanceBatch {
    stance: Stance,
    drafts: Vec<Draft>,
    notes: Vec<String>,
}

struct Plan {
    /// Index into the planned batch's drafts.
    index: usize,
    fallback: bool,
    reasoning: String,
}

struct Prepared {
    batches: Vec<StanceBatch>,
    plan_stance: Stance,
    plan: Option<Plan>,
}

#[derive(Default)]
struct Retrieved {
    facts: Vec<StoredFact>,
    sources: Vec<SubTable>,
    notes: Vec<String>,
}

pub struct Retriever {
    catalog: RwLock<Catalog>,
    embedder: Arc<dyn EmbeddingProvider>,
    llm: LlmGateway,
    config: RetrievalConfig,
}

impl Retriever {
    pub fn new(
        store: DatasetStore,
        embedder: Arc<dyn EmbeddingProvider>,
        llm: LlmGateway,
        config: RetrievalConfig,
    ) -> Result<Self, EmbeddingError> {
        let index = FieldIndex::build(&store, &*embedder)?;
        Ok(Self { catalog: RwLock::new(Catalog { store, index }), embedder, llm, config })
    }

    pub fn catalog(&self) -> RwLockReadGuard<'_, Catalog> {
        self.catalog.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn add_dataset(&self, d: Dataset) -> Result<(), CatalogError> {
        let mut c = self.catalog.write().unwrap_or_else(|e| e.into_inner());
        c.add(d, &*self.embedder)
    }

    pub fn embedder(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.embedder
    }

    pub fn config(&self) -> &RetrievalConfig {
        &self.config
    }

    pub fn llm(&self) -> &LlmGateway {
        &self.llm
    }

    // -- session operations ----------------------------------------------

    /// New session whose root is expanded for both stances. The planner
    /// recommends among the `plan_stance` children.
    pub fn create_session(
        &self,
        session_id: impl Into<String>,
        statement: &str,
        plan_stance: Stance,
    ) -> Result<RetrievalTree, TreeError> {
        let statement = statement.trim();
        if statement.is_empty() {
            return Err(TreeError::EmptyStatement);
        }
        let mut tree = RetrievalTree::new(session_id, statement);
        let prepared = self.prepare(statement, statement, &[Stance::Support, Stance::Oppose], plan_stance)?;
        let timestamp = tree.next_timestamp();
        let observations = commit(&mut tree, NodeId::ROOT, prepared);
        tree.event_log.push(Event::Created { timestamp, plan_stance, observations });
        Ok(tree)
    }

    pub fn expand(
        &self,
        tree: &mut RetrievalTree,
        node: NodeId,
        stance: Stance,
    ) -> Result<ExpansionObservation, TreeError> {
        let query = tree.node(node)?.query.clone();
        let prepared = self.prepare(&tree.statement, &query, &[stance], stance)?;
        Ok(commit_expansion(tree, node, stance, prepared))
    }

    /// Replaces a node's query and re-runs search and extraction for it.
    pub fn re_retrieve(&self, tree: &mut RetrievalTree, node: NodeId, query: &str) -> Result<(), TreeError> {
        let stance = requery_stance(tree, node, query)?;
        let r = self.retrieve_for(&tree.statement, query.trim(), stance)?;
        commit_requery(tree, node, query.trim(), r);
        Ok(())
    }

    /// Replaces fact `index` of a node after validating and recomputing it
    /// against the same source sub-table. The evaluation is kept.
    pub fn edit_fact(
        &self,
        tree: &mut RetrievalTree,
        node: NodeId,
        index: usize,
        fact: DataFact,
    ) -> Result<StoredFact, TreeError> {
        let n = tree.node(node)?;
        let old = n.facts.get(index).ok_or(TreeError::UnknownFact { node, index })?;
        let source = &n.sources[old.source];
        let report = validate_fact(&fact, source);
        if !report.ok {
            return Err(TreeError::InvalidFact(report));
        }
        let (fact, result) = computed(fact, source)?;
        let rel = relevance(&*self.embedder, &fact.description, &tree.statement, &n.query)?;
        let stored = StoredFact {
            consistency: check_description(&result, &fact.description),
            chart: chart_spec(&result, &old.chart.source),
            fact,
            result,
            evaluation: old.evaluation.clone(),
            relevance: rel,
            source: old.source,
        };
        let timestamp = tree.next_timestamp();
        let n = tree.node_mut(node)?;
        let mut facts = n.facts.clone();
        facts[index] = stored.clone();
        let stance = n.stance.unwrap_or(Stance::Support);
        let sources = std::mem::take(&mut n.sources);
        n.set_facts(rank_facts(facts, stance), sources);
        tree.event_log.push(Event::FactEdited { timestamp, node_id: node, fact_index: index, fact: stored.fact.clone() });
        Ok(stored)
    }

    /// Replaces the story with snapshots of the referenced facts.
    pub fn set_story(&self, tree: &mut RetrievalTree, refs: &[FactRef]) -> Result<(), TreeError> {
        set_story(tree, refs)
    }

    /// Rebuilds a session by re-running the actions in its event log.
    pub fn replay(&self, recorded: &RetrievalTree) -> Result<RetrievalTree, TreeError> {
        let mut events = recorded.event_log.iter();
        let mut tree = match events.next() {
            Some(Event::Created { plan_stance, .. }) => {
                self.create_session(recorded.session_id.clone(), &recorded.statement, *plan_stance)?
            }
            _ => return Err(TreeError::CorruptBlob("event log does not start with session creation".into())),
        };
        for e in events {
            match e {
                Event::Created { .. } => {
                    return Err(TreeError::CorruptBlob("session created twice".into()));
                }
                Event::Expanded { action, .. } => {
                    self.expand(&mut tree, action.node_id, action.stance)?;
                }
                Event::Requeried { node_id, query, .. } => self.re_retrieve(&mut tree, *node_id, query)?,
                Event::FactEdited { node_id, fact_index, fact, .. } => {
                    self.edit_fact(&mut tree, *node_id, *fact_index, fact.clone())?;
                }
                Event::StorySet { refs, .. } => set_story(&mut tree, refs)?,
            }
        }
        Ok(tree)
    }

    // -- pipeline --------------------------------------------------------

    fn prepare(
        &self,
        statement: &str,
        query: &str,
        stances: &[Stance],
        plan_stance: Stance,
    ) -> Result<Prepared, TreeError> {
        let mut subqueries = Vec::new();
        let mut batch_notes = Vec::new();
        for &stance in stances {
            let mut notes = Vec::new();
            match self.llm.decompose(query, stance) {
                Ok(q) => subqueries.extend(q),
                Err(e) if e.is_fatal() => return Err(e.into()),
                Err(e) => notes.push(format!("decomposition failed: {e}")),
            }
            batch_notes.push(notes);
        }
        let mut drafts = self.run_all(statement, subqueries)?.into_iter().peekable();
        let mut batches = Vec::new();
        for (&stance, notes) in stances.iter().zip(batch_notes) {
            let mut mine = Vec::new();
            while let Some(d) = drafts.next_if(|d| d.query.stance == stance) {
                mine.push(d);
            }
            batches.push(StanceBatch { stance, drafts: mine, notes });
        }
        let plan = match batches.iter().find(|b| b.stance == plan_stance) {
            Some(b) if !b.drafts.is_empty() => Some(self.plan(statement, &b.drafts, plan_stance)?),
            _ => None,
        };
        Ok(Prepared { batches, plan_stance, plan })
    }

    fn run_all(&self, statement: &str, subqueries: Vec<SubQuery>) -> Result<Vec<Draft>, TreeError> {
        if self.config.parallel_subqueries && subqueries.len() > 1 {
            std::thread::scope(|s| {
                let handles: Vec<_> = subqueries
                    .into_iter()
                    .map(|q| s.spawn(move || self.run_subquery(statement, q)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                    .collect()
            })
        } else {
            subqueries.into_iter().map(|q| self.run_subquery(statement, q)).collect()
        }
    }

    fn run_subquery(&self, statement: &str, query: SubQuery) -> Result<Draft, TreeError> {
        let r = self.retrieve_for(statement, &query.text, query.stance)?;
        Ok(Draft { query, facts: r.facts, sources: r.sources, notes: r.notes })
    }

    /// Search, extraction, evaluation and ranking for one query.
    fn retrieve_for(&self, statement: &str, query: &str, stance: Stance) -> Result<Retrieved, TreeError> {
        let mut out = Retrieved::default();
        let catalog = self.catalog();
        let matches = match catalog.index.top_k_fields(&*self.embedder, query, self.config.top_k) {
            Ok(m) => m,
            Err(e) => {
                out.notes.push(format!("field search failed: {e}"));
                return Ok(out);
            }
        };
        let mut candidates: Vec<&str> = Vec::new();
        for m in matches.iter().filter(|m| m.similarity >= self.config.similarity_floor) {
            if !candidates.contains(&m.field.dataset_id.as_str()) {
                candidates.push(&m.field.dataset_id);
            }
        }
        if candidates.is_empty() {
            out.notes.push("no field matched above the similarity floor".into());
            return Ok(out);
        }

        let mut pooled: Vec<(DataFact, FactResult, usize, String)> = Vec::new();
        for id in candidates {
            let Some(d) = catalog.store.get(id) else { continue };
            let Some(sub) = self.sub_table(d, query, &mut out.notes)? else { continue };
            let extraction = match self.llm.extract_facts(&sub, statement, query, stance) {
                Ok(x) => x,
                Err(e) if e.is_fatal() => return Err(e.into()),
                Err(e) => {
                    out.notes.push(format!("{id}: extraction failed: {e}"));
                    continue;
                }
            };
            if extraction.facts.is_empty() && extraction.dropped.is_empty() {
                out.notes.push(format!("{id}: no facts extracted"));
            }
            out.notes.extend(extraction.dropped.iter().map(|r| format!("{id}: dropped {r}")));
            let src = out.sources.len();
            let before = pooled.len();
            for (i, fact) in extraction.facts.into_iter().enumerate() {
                let report = validate_fact(&fact, &sub);
                if !report.ok {
                    let rules: Vec<String> = report.violations.iter().map(|v| v.rule.to_string()).collect();
                    out.notes.push(format!("{id}: fact {i} rejected: {}", rules.join(", ")));
                    continue;
                }
                match computed(fact, &sub) {
                    Ok((f, r)) => pooled.push((f, r, src, provenance(d))),
                    Err(e) => out.notes.push(format!("{id}: fact {i} not computable: {}", e.code())),
                }
            }
            if pooled.len() > before {
                out.sources.push(sub);
            }
        }
        drop(catalog);
        if pooled.is_empty() {
            return Ok(out);
        }

        let mut kept = Vec::new();
        for (fact, result, src, prov) in pooled {
            match relevance(&*self.embedder, &fact.description, statement, query) {
                Ok(rel) => kept.push((fact, result, src, prov, rel)),
                Err(e) => out.notes.push(format!("relevance unavailable: {e}")),
            }
        }
        let facts: Vec<DataFact> = kept.iter().map(|k| k.0.clone()).collect();
        let evaluations = match self.llm.evaluate_facts(&facts, statement) {
            Ok(e) => e,
            Err(e) if e.is_fatal() => return Err(e.into()),
            Err(e) => {
                out.notes.push(format!("evaluation failed: {e}"));
                (0..facts.len()).map(|i| FactEvaluation::defaulted(i, "evaluation unavailable; defaulted")).collect()
            }
        };
        let stored = kept
            .into_iter()
            .zip(evaluations)
            .map(|((fact, result, source, prov, rel), evaluation)| StoredFact {
                consistency: check_description(&result, &fact.description),
                chart: chart_spec(&result, &prov),
                fact,
                result,
                evaluation,
                relevance: rel,
                source,
            })
            .collect();
        out.facts = rank_facts(stored, stance);
        Ok(out)
    }

    /// Generates, validates and executes SQL against one dataset, repairing
    /// rejected statements within the configured budget.
    fn sub_table(&self, d: &Dataset, query: &str, notes: &mut Vec<String>) -> Result<Option<SubTable>, TreeError> {
        let summary = TableSummary::of(d);
        let series = if d.field_index("series").is_some() {
            relevant_series(d, &*self.embedder, query, RELEVANT_SERIES).unwrap_or_default()
        } else {
            Vec::new()
        };
        let soft = |e: LlmError, notes: &mut Vec<String>| -> Result<Option<SubTable>, TreeError> {
            if e.is_fatal() {
                return Err(e.into());
            }
            notes.push(format!("{}: SQL generation failed: {e}", d.id));
            Ok(None)
        };
        let mut sql = match self.llm.generate_sql(query, &summary, &series) {
            Ok(s) => s,
            Err(e) => return soft(e, notes),
        };
        for attempt in 0..=self.config.sql_repairs {
            let report = validate_query(&sql, d);
            let error = if report.ok {
                match execute_query(&sql, d) {
                    Ok(t) if t.is_empty() => {
                        notes.push(format!("{}: query returned no rows", d.id));
                        return Ok(None);
                    }
                    Ok(t) => return Ok(Some(t)),
                    Err(e) => e.to_string(),
                }
            } else {
                report.summary()
            };
            if attempt == self.config.sql_repairs {
                notes.push(format!("{}: SQL rejected after {attempt} repairs: {error}", d.id));
                return Ok(None);
            }
            sql = match self.llm.repair_sql(query, &summary, &series, &sql, &error) {
                Ok(s) => s,
                Err(e) => return soft(e, notes),
            };
        }
        unreachable!("the loop returns on its last attempt")
    }

    fn plan(&self, statement: &str, drafts: &[Draft], stance: Stance) -> Result<Plan, TreeError> {
        let candidates: Vec<PlanCandidate> = drafts
            .iter()
            .enumerate()
            .map(|(i, d)| PlanCandidate {
                index: i,
                query: d.query.text.clone(),
                facts: d
                    .facts
                    .iter()
                    .map(|f| PlanFact {
                        description: f.fact.description.clone(),
                        stance: f.evaluation.predicted_label,
                        relevance: f.relevance,
                    })
                    .collect(),
            })
            .collect();
        let rec = self.llm.plan(&candidates, statement, stance, best_draft(drafts))?;
        Ok(Plan { index: rec.recommend_index, fallback: rec.fallback, reasoning: rec.reasoning })
    }
}

/// Source line shown on charts.
fn provenance(d: &Dataset) -> String {
    if d.provenance.trim().is_empty() {
        d.name.clone()
    } else {
        format!("{} ({})", d.provenance, d.name)
    }
}

/// Fills an empty description with the canonical caption and computes.
fn computed(mut fact: DataFact, sub: &SubTable) -> Result<(DataFact, FactResult), TreeError> {
    let mut result = compute_fact(&fact, sub)?;
    if fact.description.trim().is_empty() {
        fact.description = canonical_description(&result);
        result.fact.description = fact.description.clone();
    }
    Ok((fact, result))
}

/// Highest node score (relevance, then stance probability); earliest wins
/// ties.
fn best_draft(drafts: &[Draft]) -> usize {
    let score = |d: &Draft| {
        d.facts
            .first()
            .map_or((0.0, 0.0), |f| (f.relevance, f.evaluation.prob(f.evaluation.predicted_label)))
    };
    let mut best = 0;
    for (i, d) in drafts.iter().enumerate().skip(1) {
        let (r, p) = score(d);
        let (br, bp) = score(&drafts[best]);
        if r > br || (r == br && p > bp) {
            best = i;
        }
    }
    best
}

fn commit(tree: &mut RetrievalTree, parent: NodeId, prepared: Prepared) -> Vec<ExpansionObservation> {
    let mut observations = Vec::new();
    let mut recommended = None;
    for batch in prepared.batches {
        let mut ids = Vec::new();
        for d in batch.drafts {
            let mut node = RetrievalNode::root(&d.query.text);
            node.parent = Some(parent);
            node.stance = Some(d.query.stance);
            node.direction = d.query.direction;
            node.notes = d.notes;
            node.set_facts(d.facts, d.sources);
            ids.push(tree.push_child(node));
        }
        let stance = batch.stance;
        tree.nodes[parent.index()].notes.extend(batch.notes.iter().map(|n| format!("{stance}: {n}")));
        let mut obs = ExpansionObservation {
            child_ids: ids,
            stance: batch.stance,
            statement: tree.statement.clone(),
            recommended: None,
            fallback: false,
            reasoning: String::new(),
            notes: batch.notes,
        };
        if batch.stance == prepared.plan_stance {
            if let Some(p) = &prepared.plan {
                obs.recommended = obs.child_ids.get(p.index).copied();
                obs.fallback = p.fallback;
                obs.reasoning = p.reasoning.clone();
                recommended = obs.recommended;
            }
        }
        observations.push(obs);
    }
    tree.nodes[parent.index()].status = NodeStatus::Expanded;
    tree.set_recommended(recommended);
    observations
}

fn commit_expansion(tree: &mut RetrievalTree, node: NodeId, stance: Stance, prepared: Prepared) -> ExpansionObservation {
    let timestamp = tree.next_timestamp();
    let observation = commit(tree, node, prepared).pop().expect("one stance batch");
    tree.event_log.push(Event::Expanded {
        action: ExpansionAction { node_id: node, stance, timestamp },
        observation: observation.clone(),
    });
    observation
}

fn requery_stance(tree: &RetrievalTree, node: NodeId, query: &str) -> Result<Stance, TreeError> {
    let n = tree.node(node)?;
    let stance = n.stance.ok_or(TreeError::RootNode(node))?;
    if query.trim().is_empty() {
        return Err(TreeError::EmptyQuery);
    }
    Ok(stance)
}

fn commit_requery(tree: &mut RetrievalTree, node: NodeId, query: &str, r: Retrieved) {
    let timestamp = tree.next_timestamp();
    let n = &mut tree.nodes[node.index()];
    n.query = query.to_string();
    n.notes = r.notes;
    n.set_facts(r.facts, r.sources);
    tree.event_log.push(Event::Requeried { timestamp, node_id: node, query: query.to_string() });
}

fn set_story(tree: &mut RetrievalTree, refs: &[FactRef]) -> Result<(), TreeError> {
    let mut story = Vec::new();
    for r in refs {
        let n = tree.node(r.node_id)?;
        let f = n
            .facts
            .get(r.fact_index)
            .ok_or(TreeError::UnknownFact { node: r.node_id, index: r.fact_index })?;
        story.push(StoryItem {
            node_id: r.node_id,
            fact_index: r.fact_index,
            fact: f.clone(),
            source: n.sources[f.source].clone(),
        });
    }
    let timestamp = tree.next_timestamp();
    tree.story = story;
    tree.event_log.push(Event::StorySet { timestamp, refs: refs.to_vec() });
    Ok(())
}

/// A session shared between request handlers. Mutations are serialized;
/// a node already being mutated rejects further mutations with
/// `NODE_BUSY`; readers always see a committed tree.
pub struct Session {
    tree: RwLock<RetrievalTree>,
    writer: Mutex<()>,
    busy: Mutex<BTreeSet<NodeId>>,
}

struct BusyGuard<'a> {
    set: &'a Mutex<BTreeSet<NodeId>>,
    id: NodeId,
}

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.set.lock().unwrap_or_else(|e| e.into_inner()).remove(&self.id);
    }
}

impl Session {
    pub fn new(tree: RetrievalTree) -> Self {
        Self { tree: RwLock::new(tree), writer: Mutex::new(()), busy: Mutex::new(BTreeSet::new()) }
    }

    pub fn read<R>(&self, f: impl FnOnce(&RetrievalTree) -> R) -> R {
        f(&self.tree.read().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn snapshot(&self) -> RetrievalTree {
        self.read(Clone::clone)
    }

    fn claim(&self, id: NodeId) -> Result<BusyGuard<'_>, TreeError> {
        self.read(|t| t.node(id).map(|_| ()))?;
        let mut set = self.busy.lock().unwrap_or_else(|e| e.into_inner());
        if !set.insert(id) {
            return Err(TreeError::NodeBusy(id));
        }
        Ok(BusyGuard { set: &self.busy, id })
    }

    fn write<R>(&self, f: impl FnOnce(&mut RetrievalTree) -> R) -> R {
        f(&mut self.tree.write().unwrap_or_else(|e| e.into_inner()))
    }

    pub fn expand(&self, r: &Retriever, node: NodeId, stance: Stance) -> Result<ExpansionObservation, TreeError> {
        let _busy = self.claim(node)?;
        let _writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let (statement, query) = self.read(|t| Ok::<_, TreeError>((t.statement.clone(), t.node(node)?.query.clone())))?;
        let prepared = r.prepare(&statement, &query, &[stance], stance)?;
        Ok(self.write(|t| commit_expansion(t, node, stance, prepared)))
    }

    pub fn re_retrieve(&self, r: &Retriever, node: NodeId, query: &str) -> Result<RetrievalNode, TreeError> {
        let _busy = self.claim(node)?;
        let _writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        let (statement, stance) = self.read(|t| Ok::<_, TreeError>((t.statement.clone(), requery_stance(t, node, query)?)))?;
        let retrieved = r.retrieve_for(&statement, query.trim(), stance)?;
        Ok(self.write(|t| {
            commit_requery(t, node, query.trim(), retrieved);
            t.nodes[node.index()].clone()
        }))
    }

    pub fn edit_fact(&self, r: &Retriever, node: NodeId, index: usize, fact: DataFact) -> Result<StoredFact, TreeError> {
        let _busy = self.claim(node)?;
        let _writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        self.write(|t| r.edit_fact(t, node, index, fact))
    }

    pub fn set_story(&self, refs: &[FactRef]) -> Result<Vec<StoryItem>, TreeError> {
        let _writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        self.write(|t| {
            set_story(t, refs)?;
            Ok(t.story.clone())
        })
    }
}
