//! Batch commands behind the `stancefact` binary.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use stancefact_core::dataset::{DatasetStore, SourceFormat};
use stancefact_core::tree::{load_session, save_session, session_id, session_reward, NodeId, RetrievalTree};
use stancefact_core::{Retriever, Stance};

use crate::api::{router, AppState, DatasetView};
use crate::app::{build_retriever, read_csv, AppOptions};
use crate::error::ApiError;

/// Which stances a batch retrieval follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StanceChoice {
    /// Each expansion keeps the stance of the node being expanded.
    #[default]
    Both,
    Only(Stance),
}

impl std::str::FromStr for StanceChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "both" => Ok(StanceChoice::Both),
            other => Stance::parse(other)
                .map(StanceChoice::Only)
                .ok_or_else(|| format!("expected both, support or oppose, got {s:?}")),
        }
    }
}

/// Ingests a CSV file into the persistent store and returns its catalog entry.
pub fn ingest(store_dir: &Path, path: &Path, wide_wdi: bool) -> Result<DatasetView, ApiError> {
    let format = if wide_wdi { SourceFormat::WideWdi } else { SourceFormat::Table };
    let d = read_csv(path, format)?;
    let mut store = DatasetStore::open(store_dir)?;
    Ok(DatasetView::of(store.insert(d)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrieveSummary {
    pub session_id: String,
    pub nodes: usize,
    pub expansions: usize,
    pub reward: usize,
    pub out: PathBuf,
}

/// Runs a session for `statement`, then follows the planner's
/// recommendation for `depth` further expansions.
pub fn retrieve_tree(
    r: &Retriever,
    statement: &str,
    stance: StanceChoice,
    depth: usize,
) -> Result<RetrievalTree, ApiError> {
    let plan_stance = match stance {
        StanceChoice::Both => Stance::Support,
        StanceChoice::Only(s) => s,
    };
    let mut tree = r.create_session(session_id(statement.trim(), 0), statement, plan_stance)?;
    for _ in 0..depth {
        let Some(node) = tree.recommended_node else { break };
        let s = match stance {
            StanceChoice::Both => tree.node(node)?.stance.unwrap_or(plan_stance),
            StanceChoice::Only(s) => s,
        };
        r.expand(&mut tree, node, s)?;
    }
    Ok(tree)
}

pub fn retrieve(
    opts: &AppOptions,
    statement: &str,
    stance: StanceChoice,
    depth: usize,
    out: &Path,
) -> Result<RetrieveSummary, ApiError> {
    let r = build_retriever(opts)?;
    let tree = retrieve_tree(&r, statement, stance, depth)?;
    let blob = save_session(&tree, &opts.config.digest(), opts.transcript_ref().as_deref());
    std::fs::write(out, blob).map_err(|e| ApiError::io(out, e))?;
    Ok(RetrieveSummary {
        session_id: tree.session_id.clone(),
        nodes: tree.len(),
        expansions: tree.event_log.len(),
        reward: session_reward(&tree, opts.config.retrieval.relevance_threshold),
        out: out.to_path_buf(),
    })
}

/// Rebuilds a saved session from its event log against `opts` (normally a
/// replayed transcript) and checks that the result is byte-identical.
pub fn replay(opts: &AppOptions, blob_path: &Path) -> Result<(), ApiError> {
    let original = std::fs::read(blob_path).map_err(|e| ApiError::io(blob_path, e))?;
    let saved = load_session(&original)?;
    let r = build_retriever(opts)?;
    let rebuilt = r.replay(&saved.tree)?;
    let bytes = save_session(&rebuilt, &saved.config_digest, saved.transcript_ref.as_deref());
    if bytes == original {
        return Ok(());
    }
    let line = original
        .split(|b| *b == b'\n')
        .zip(bytes.split(|b| *b == b'\n'))
        .position(|(a, b)| a != b)
        .map(|i| i + 1);
    let mut e = ApiError::bad_request("REPLAY_DIVERGED", "rebuilt session differs from the saved blob");
    e = e.with_detail(serde_json::json!({
        "first_differing_line": line,
        "config_digest_matches": saved.config_digest == opts.config.digest(),
    }));
    Err(e)
}

/// Writes the chart of every fact on `node` into `dir`; returns the paths.
pub fn emit_charts(blob_path: &Path, node: NodeId, dir: &Path) -> Result<Vec<PathBuf>, ApiError> {
    let bytes = std::fs::read(blob_path).map_err(|e| ApiError::io(blob_path, e))?;
    let saved = load_session(&bytes)?;
    let n = saved.tree.node(node)?;
    std::fs::create_dir_all(dir).map_err(|e| ApiError::io(dir, e))?;
    let mut written = Vec::new();
    for (k, f) in n.facts.iter().enumerate() {
        let path = dir.join(format!("node{}_fact{k}.json", node));
        let json = serde_json::to_vec_pretty(&f.chart).expect("chart serializes");
        std::fs::write(&path, json).map_err(|e| ApiError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Serves the API until interrupted; in-flight requests are drained.
pub async fn serve(retriever: Arc<Retriever>, bind: &str, port: u16) -> Result<(), ApiError> {
    let app = router(Arc::new(AppState::new(retriever)));
    let addr = format!("{bind}:{port}");
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| ApiError::internal(format!("cannot bind {addr}: {e}")))?;
    tracing::info!("listening on {addr}");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| ApiError::internal(e.to_string()))
}
