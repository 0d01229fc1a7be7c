//! HTTP JSON API under `/v1`.
//!
//! Model and embedding calls are blocking, so every handler that may reach
//! them runs on the blocking pool. Per-session serialization and the
//! `NODE_BUSY` guard come from [`Session`].

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use stancefact_core::dataset::{ingest_dataset, FieldDescriptor, SourceFormat};
use stancefact_core::engine::{ChartSpec, ConsistencyReport};
use stancefact_core::fact::parse_fact;
use stancefact_core::tree::{
    node_score, session_id, session_reward, ExpansionObservation, FactRef, NodeId, NodeStatus, RetrievalNode,
    RetrievalTree, Session, StoryItem,
};
use stancefact_core::{Dataset, FactEvaluation, FactResult, Retriever, Stance, SubTable};

use crate::app::DEFAULT_PROVENANCE;
use crate::error::ApiError;

pub struct AppState {
    pub retriever: Arc<Retriever>,
    sessions: RwLock<HashMap<String, Arc<Session>>>,
    counter: AtomicU64,
}

impl AppState {
    pub fn new(retriever: Arc<Retriever>) -> Self {
        Self { retriever, sessions: RwLock::new(HashMap::new()), counter: AtomicU64::new(0) }
    }

    pub fn session(&self, id: &str) -> Result<Arc<Session>, ApiError> {
        self.sessions
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("UNKNOWN_SESSION", format!("no session {id:?}")))
    }

    /// Registers an existing tree, e.g. one loaded from a blob.
    pub fn insert_session(&self, tree: RetrievalTree) -> String {
        let id = tree.session_id.clone();
        self.sessions.write().unwrap_or_else(|e| e.into_inner()).insert(id.clone(), Arc::new(Session::new(tree)));
        id
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/tree", get(get_tree))
        .route("/v1/sessions/{id}/nodes/{nid}/expand", post(expand))
        .route("/v1/sessions/{id}/nodes/{nid}/query", put(requery))
        .route("/v1/sessions/{id}/nodes/{nid}/facts", get(get_facts))
        .route("/v1/sessions/{id}/nodes/{nid}/facts/{k}", put(edit_fact))
        .route("/v1/sessions/{id}/story", post(set_story).get(get_story))
        .route("/v1/datasets", post(upload_dataset).get(list_datasets))
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn node_id(raw: &str) -> Result<NodeId, ApiError> {
    raw.parse().map_err(|_| ApiError::not_found("UNKNOWN_NODE", format!("no node {raw:?}")))
}

// -- views ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeView {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub stance: Option<Stance>,
    pub query: String,
    pub direction: String,
    pub status: NodeStatus,
    pub recommended: bool,
    pub node_relevance: f64,
    pub node_stance_prob: f64,
    pub stance_label: Option<Stance>,
    pub children: Vec<NodeId>,
    pub fact_count: usize,
    pub notes: Vec<String>,
}

impl NodeView {
    pub fn of(tree: &RetrievalTree, n: &RetrievalNode) -> Self {
        Self {
            id: n.id,
            parent: n.parent,
            stance: n.stance,
            query: n.query.clone(),
            direction: n.direction.clone(),
            status: n.status,
            recommended: n.recommended,
            node_relevance: n.node_relevance,
            node_stance_prob: n.node_stance_prob,
            stance_label: node_score(n).stance_label,
            children: tree.children(n.id).to_vec(),
            fact_count: n.facts.len(),
            notes: n.notes.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeView {
    pub session_id: String,
    pub statement: String,
    pub goal: String,
    pub recommended_node: Option<NodeId>,
    pub reward: usize,
    pub nodes: Vec<NodeView>,
}

impl TreeView {
    pub fn of(tree: &RetrievalTree, threshold: f64) -> Self {
        Self {
            session_id: tree.session_id.clone(),
            statement: tree.statement.clone(),
            goal: tree.goal.clone(),
            recommended_node: tree.recommended_node,
            reward: session_reward(tree, threshold),
            nodes: tree.nodes.iter().map(|n| NodeView::of(tree, n)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactView {
    pub index: usize,
    pub fact: stancefact_core::DataFact,
    pub result: FactResult,
    pub chart: ChartSpec,
    pub evaluation: FactEvaluation,
    pub relevance: f64,
    pub consistency: ConsistencyReport,
    pub source: SubTable,
}

impl FactView {
    pub fn list(n: &RetrievalNode) -> Vec<Self> {
        n.facts
            .iter()
            .enumerate()
            .map(|(index, f)| Self {
                index,
                fact: f.fact.clone(),
                result: f.result.clone(),
                chart: f.chart.clone(),
                evaluation: f.evaluation.clone(),
                relevance: f.relevance,
                consistency: f.consistency.clone(),
                source: n.sources[f.source].clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetView {
    pub id: String,
    pub name: String,
    pub provenance: String,
    pub rows: usize,
    pub fields: Vec<FieldDescriptor>,
}

impl DatasetView {
    pub fn of(d: &Dataset) -> Self {
        Self {
            id: d.id.clone(),
            name: d.name.clone(),
            provenance: d.provenance.clone(),
            rows: d.rows.len(),
            fields: d.fields.clone(),
        }
    }
}

// -- handlers -------------------------------------------------------------

#[derive(Deserialize)]
struct CreateSession {
    statement: String,
    #[serde(default)]
    plan_stance: Option<Stance>,
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    Json(body): Json<CreateSession>,
) -> Result<(StatusCode, Json<TreeView>), ApiError> {
    let state = st.clone();
    let tree = blocking(move || {
        let salt = state.counter.fetch_add(1, Ordering::SeqCst);
        let id = session_id(&body.statement, salt);
        let plan = body.plan_stance.unwrap_or(Stance::Support);
        Ok(state.retriever.create_session(id, &body.statement, plan)?)
    })
    .await?;
    let view = TreeView::of(&tree, st.retriever.config().relevance_threshold);
    st.insert_session(tree);
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_tree(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<TreeView>, ApiError> {
    let threshold = st.retriever.config().relevance_threshold;
    Ok(Json(st.session(&id)?.read(|t| TreeView::of(t, threshold))))
}

#[derive(Deserialize)]
struct ExpandBody {
    stance: Stance,
}

async fn expand(
    State(st): State<Arc<AppState>>,
    Path((id, nid)): Path<(String, String)>,
    Json(body): Json<ExpandBody>,
) -> Result<Json<ExpansionObservation>, ApiError> {
    let session = st.session(&id)?;
    let node = node_id(&nid)?;
    let r = st.retriever.clone();
    Ok(Json(blocking(move || Ok(session.expand(&r, node, body.stance)?)).await?))
}

#[derive(Deserialize)]
struct QueryBody {
    query: String,
}

async fn requery(
    State(st): State<Arc<AppState>>,
    Path((id, nid)): Path<(String, String)>,
    Json(body): Json<QueryBody>,
) -> Result<Json<NodeView>, ApiError> {
    let session = st.session(&id)?;
    let node = node_id(&nid)?;
    let r = st.retriever.clone();
    let s = session.clone();
    blocking(move || Ok(s.re_retrieve(&r, node, &body.query)?)).await?;
    Ok(Json(session.read(|t| NodeView::of(t, &t.nodes[node.index()]))))
}

async fn get_facts(
    State(st): State<Arc<AppState>>,
    Path((id, nid)): Path<(String, String)>,
) -> Result<Json<Vec<FactView>>, ApiError> {
    let node = node_id(&nid)?;
    st.session(&id)?.read(|t| Ok(Json(FactView::list(t.node(node)?))))
}

#[derive(Deserialize)]
struct FactBody {
    fact: Value,
}

async fn edit_fact(
    State(st): State<Arc<AppState>>,
    Path((id, nid, k)): Path<(String, String, usize)>,
    Json(body): Json<FactBody>,
) -> Result<Json<FactView>, ApiError> {
    let session = st.session(&id)?;
    let node = node_id(&nid)?;
    let fact = parse_fact(&body.fact)?;
    let r = st.retriever.clone();
    let s = session.clone();
    let stored = blocking(move || Ok(s.edit_fact(&r, node, k, fact)?)).await?;
    session.read(|t| {
        let n = t.node(node)?;
        let view = FactView::list(n)
            .into_iter()
            .find(|v| v.fact == stored.fact)
            .expect("edited fact is on its node");
        Ok(Json(view))
    })
}

#[derive(Deserialize)]
struct StoryBody {
    facts: Vec<FactRef>,
}

async fn set_story(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<StoryBody>,
) -> Result<Json<Vec<StoryItem>>, ApiError> {
    Ok(Json(st.session(&id)?.set_story(&body.facts)?))
}

async fn get_story(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Vec<StoryItem>>, ApiError> {
    Ok(Json(st.session(&id)?.read(|t| t.story.clone())))
}

#[derive(Deserialize)]
struct UploadBody {
    name: String,
    csv: String,
    #[serde(default)]
    wide_wdi: bool,
    #[serde(default)]
    provenance: Option<String>,
}

async fn upload_dataset(
    State(st): State<Arc<AppState>>,
    Json(body): Json<UploadBody>,
) -> Result<(StatusCode, Json<DatasetView>), ApiError> {
    let r = st.retriever.clone();
    let view = blocking(move || {
        let format = if body.wide_wdi { SourceFormat::WideWdi } else { SourceFormat::Table };
        let prov = body.provenance.as_deref().unwrap_or(DEFAULT_PROVENANCE);
        let d = ingest_dataset(body.csv.as_bytes(), &body.name, prov, format)?;
        let view = DatasetView::of(&d);
        r.add_dataset(d)?;
        Ok(view)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn list_datasets(State(st): State<Arc<AppState>>) -> Json<Vec<DatasetView>> {
    Json(st.retriever.catalog().store.datasets().map(DatasetView::of).collect())
}
