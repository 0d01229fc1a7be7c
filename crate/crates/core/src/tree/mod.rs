//! The retrieval session: a tree of query nodes grown by stance-tagged
//! expansions, with ranked facts on every node.
//!
//! Nodes are appended only; ids are dense indices assigned in commit order.
//! Every mutation is recorded in the event log so that a session can be
//! rebuilt from its actions against a recorded transcript.

mod agent;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::SubTable;
use crate::embedding::EmbeddingError;
use crate::engine::{ChartSpec, ConsistencyReport, EngineError, FactResult};
use crate::fact::{DataFact, FactParseError, FactValidationReport};
use crate::llm::{FactEvaluation, LlmError, Stance};

pub use agent::{Catalog, CatalogError, Retriever, Session};

/// Objective handed to the planner; constant for every session.
pub const PLANNING_GOAL: &str =
    "Recommend the child node with the highest potential for retrieving further relevant data facts of the desired stance.";

/// Blob format marker and version.
pub const BLOB_FORMAT: &str = "stancefact-session";
pub const BLOB_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for NodeId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim().parse().map(NodeId)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeStatus {
    Fresh,
    Expanded,
    Empty,
}

/// A fact that passed validation and computation, with its evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredFact {
    pub fact: DataFact,
    pub result: FactResult,
    pub evaluation: FactEvaluation,
    pub relevance: f64,
    /// Index into the owning node's `sources`.
    pub source: usize,
    pub consistency: ConsistencyReport,
    pub chart: ChartSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalNode {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub stance: Option<Stance>,
    pub query: String,
    pub direction: String,
    pub facts: Vec<StoredFact>,
    pub sources: Vec<SubTable>,
    pub node_relevance: f64,
    pub node_stance_prob: f64,
    pub recommended: bool,
    pub status: NodeStatus,
    /// Why candidate datasets, queries or facts were discarded.
    pub notes: Vec<String>,
}

impl RetrievalNode {
    fn root(statement: &str) -> Self {
        Self {
            id: NodeId::ROOT,
            parent: None,
            stance: None,
            query: statement.to_string(),
            direction: String::new(),
            facts: Vec::new(),
            sources: Vec::new(),
            node_relevance: 0.0,
            node_stance_prob: 0.0,
            recommended: false,
            status: NodeStatus::Fresh,
            notes: Vec::new(),
        }
    }

    /// Sets the facts (already ranked) and the derived node fields.
    pub fn set_facts(&mut self, facts: Vec<StoredFact>, sources: Vec<SubTable>) {
        self.facts = facts;
        self.sources = sources;
        let s = node_score(self);
        self.node_relevance = s.relevance;
        self.node_stance_prob = s.stance_prob;
        if self.status != NodeStatus::Expanded {
            self.status = if self.facts.is_empty() { NodeStatus::Empty } else { NodeStatus::Fresh };
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeScore {
    pub relevance: f64,
    pub stance_label: Option<Stance>,
    pub stance_prob: f64,
}

/// The top-ranked fact's relevance, label and label probability.
pub fn node_score(node: &RetrievalNode) -> NodeScore {
    match node.facts.first() {
        Some(f) => NodeScore {
            relevance: f.relevance,
            stance_label: Some(f.evaluation.predicted_label),
            stance_prob: f.evaluation.prob(f.evaluation.predicted_label),
        },
        None => NodeScore { relevance: 0.0, stance_label: None, stance_prob: 0.0 },
    }
}

/// Ranking order over `(predicted label, relevance)` pairs: labels equal
/// to `input` first, each group by relevance descending, ties by index.
pub fn rank_order(items: &[(Stance, f64)], input: Stance) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by(|&a, &b| {
        let (la, ra) = items[a];
        let (lb, rb) = items[b];
        (lb == input)
            .cmp(&(la == input))
            .then_with(|| rb.total_cmp(&ra))
            .then_with(|| a.cmp(&b))
    });
    idx
}

pub fn rank_facts(facts: Vec<StoredFact>, input: Stance) -> Vec<StoredFact> {
    let keys: Vec<(Stance, f64)> = facts.iter().map(|f| (f.evaluation.predicted_label, f.relevance)).collect();
    let order = rank_order(&keys, input);
    let mut slots: Vec<Option<StoredFact>> = facts.into_iter().map(Some).collect();
    order.into_iter().map(|i| slots[i].take().expect("order is a permutation")).collect()
}

/// Facts with relevance at least `threshold` whose predicted label matches
/// the stance of their node.
pub fn session_reward(tree: &RetrievalTree, threshold: f64) -> usize {
    tree.nodes
        .iter()
        .filter_map(|n| n.stance.map(|s| (n, s)))
        .map(|(n, s)| {
            n.facts
                .iter()
                .filter(|f| f.relevance >= threshold && f.evaluation.predicted_label == s)
                .count()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpansionAction {
    pub node_id: NodeId,
    pub stance: Stance,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionObservation {
    pub child_ids: Vec<NodeId>,
    pub stance: Stance,
    pub statement: String,
    pub recommended: Option<NodeId>,
    /// The planner's choice was unusable and the best-scoring child was taken.
    pub fallback: bool,
    pub reasoning: String,
    pub notes: Vec<String>,
}

/// A fact chosen for the story editor, captured at selection time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryItem {
    pub node_id: NodeId,
    pub fact_index: usize,
    pub fact: StoredFact,
    pub source: SubTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactRef {
    pub node_id: NodeId,
    pub fact_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    /// Session creation with the automatic expansion of the root for both
    /// stances; the planner runs for `plan_stance`.
    Created {
        timestamp: u64,
        plan_stance: Stance,
        observations: Vec<ExpansionObservation>,
    },
    Expanded {
        action: ExpansionAction,
        observation: ExpansionObservation,
    },
    Requeried {
        timestamp: u64,
        node_id: NodeId,
        query: String,
    },
    FactEdited {
        timestamp: u64,
        node_id: NodeId,
        fact_index: usize,
        fact: DataFact,
    },
    StorySet {
        timestamp: u64,
        refs: Vec<FactRef>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTree {
    pub session_id: String,
    pub statement: String,
    pub goal: String,
    pub nodes: Vec<RetrievalNode>,
    pub edges: BTreeMap<NodeId, Vec<NodeId>>,
    pub recommended_node: Option<NodeId>,
    pub event_log: Vec<Event>,
    pub story: Vec<StoryItem>,
}

impl RetrievalTree {
    pub fn new(session_id: impl Into<String>, statement: &str) -> Self {
        Self {
            session_id: session_id.into(),
            statement: statement.to_string(),
            goal: PLANNING_GOAL.to_string(),
            nodes: vec![RetrievalNode::root(statement)],
            edges: BTreeMap::new(),
            recommended_node: None,
            event_log: Vec::new(),
            story: Vec::new(),
        }
    }

    pub fn root(&self) -> &RetrievalNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> Result<&RetrievalNode, TreeError> {
        self.nodes.get(id.index()).ok_or(TreeError::UnknownNode(id))
    }

    pub fn node_mut(&mut self, id: NodeId) -> Result<&mut RetrievalNode, TreeError> {
        self.nodes.get_mut(id.index()).ok_or(TreeError::UnknownNode(id))
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        self.edges.get(&id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Depth of a node; the root has depth 0.
    pub fn depth(&self, id: NodeId) -> usize {
        let mut d = 0;
        let mut cur = self.nodes.get(id.index()).and_then(|n| n.parent);
        while let Some(p) = cur {
            d += 1;
            cur = self.nodes[p.index()].parent;
        }
        d
    }

    fn next_timestamp(&self) -> u64 {
        self.event_log.len() as u64
    }

    /// Appends a child; the caller guarantees `parent` exists.
    fn push_child(&mut self, mut node: RetrievalNode) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        node.id = id;
        let parent = node.parent.expect("children have a parent");
        self.edges.entry(parent).or_default().push(id);
        self.nodes.push(node);
        id
    }

    fn set_recommended(&mut self, id: Option<NodeId>) {
        for n in &mut self.nodes {
            n.recommended = false;
        }
        if let Some(id) = id {
            self.nodes[id.index()].recommended = true;
        }
        self.recommended_node = id;
    }

    /// Checks the structural invariants: a single root, parents precede
    /// children, edges agree with parent links and stances are inherited
    /// from the creating action.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.nodes.is_empty() || self.nodes[0].parent.is_some() || self.nodes[0].stance.is_some() {
            return Err("missing or malformed root".into());
        }
        let mut listed = vec![false; self.nodes.len()];
        listed[0] = true;
        for (parent, kids) in &self.edges {
            for k in kids {
                let n = self.nodes.get(k.index()).ok_or(format!("dangling child {k}"))?;
                if n.parent != Some(*parent) || k <= parent {
                    return Err(format!("edge {parent}->{k} disagrees with parent link"));
                }
                if std::mem::replace(&mut listed[k.index()], true) {
                    return Err(format!("node {k} has two parents"));
                }
                if n.stance.is_none() {
                    return Err(format!("non-root node {k} has no stance"));
                }
            }
        }
        if let Some(i) = listed.iter().position(|l| !l) {
            return Err(format!("node {i} unreachable from root"));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if n.id.index() != i {
                return Err(format!("node at {i} has id {}", n.id));
            }
        }
        let flagged: Vec<_> = self.nodes.iter().filter(|n| n.recommended).map(|n| n.id).collect();
        if flagged.len() > 1 || flagged.first().copied() != self.recommended_node {
            return Err("recommended flag disagrees with recommended_node".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TreeError {
    #[error("statement is empty")]
    EmptyStatement,
    #[error("query is empty")]
    EmptyQuery,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is the root")]
    RootNode(NodeId),
    #[error("node {0} is being expanded")]
    NodeBusy(NodeId),
    #[error("node {node} has no fact {index}")]
    UnknownFact { node: NodeId, index: usize },
    #[error("fact rejected: {}", .0.violations.iter().map(|v| v.message.as_str()).collect::<Vec<_>>().join("; "))]
    InvalidFact(FactValidationReport),
    #[error(transparent)]
    FactParse(#[from] FactParseError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("corrupt session blob: {0}")]
    CorruptBlob(String),
}

impl TreeError {
    pub fn code(&self) -> String {
        match self {
            TreeError::EmptyStatement => "EMPTY_STATEMENT".into(),
            TreeError::EmptyQuery => "EMPTY_QUERY".into(),
            TreeError::UnknownNode(_) => "UNKNOWN_NODE".into(),
            TreeError::RootNode(_) => "ROOT_NODE".into(),
            TreeError::NodeBusy(_) => "NODE_BUSY".into(),
            TreeError::UnknownFact { .. } => "UNKNOWN_FACT".into(),
            TreeError::InvalidFact(r) => r.violations.first().map_or("INVALID_FACT".into(), |v| v.rule.to_string()),
            TreeError::FactParse(e) => e.code().into(),
            TreeError::Engine(e) => e.code().into(),
            TreeError::Llm(e) => e.code().into(),
            TreeError::Embedding(e) => e.code().into(),
            TreeError::CorruptBlob(_) => "CORRUPT_BLOB".into(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Blob {
    format: String,
    version: u32,
    config_digest: String,
    transcript_ref: Option<String>,
    digest: String,
    session: RetrievalTree,
}

/// A loaded session with the linkage stored alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedSession {
    pub tree: RetrievalTree,
    pub config_digest: String,
    pub transcript_ref: Option<String>,
}

fn tree_digest(tree: &RetrievalTree) -> String {
    let bytes = serde_json::to_vec(tree).expect("tree serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Serializes a session as a versioned, digest-protected JSON document.
pub fn save_session(tree: &RetrievalTree, config_digest: &str, transcript_ref: Option<&str>) -> Vec<u8> {
    let blob = Blob {
        format: BLOB_FORMAT.into(),
        version: BLOB_VERSION,
        config_digest: config_digest.into(),
        transcript_ref: transcript_ref.map(str::to_string),
        digest: tree_digest(tree),
        session: tree.clone(),
    };
    let mut out = serde_json::to_vec_pretty(&blob).expect("blob serializes");
    out.push(b'\n');
    out
}

pub fn load_session(bytes: &[u8]) -> Result<SavedSession, TreeError> {
    let blob: Blob = serde_json::from_slice(bytes).map_err(|e| TreeError::CorruptBlob(e.to_string()))?;
    if blob.format != BLOB_FORMAT {
        return Err(TreeError::CorruptBlob(format!("unexpected format {:?}", blob.format)));
    }
    if blob.version != BLOB_VERSION {
        return Err(TreeError::CorruptBlob(format!("unsupported version {}", blob.version)));
    }
    if tree_digest(&blob.session) != blob.digest {
        return Err(TreeError::CorruptBlob("digest mismatch".into()));
    }
    blob.session.check_invariants().map_err(TreeError::CorruptBlob)?;
    Ok(SavedSession { tree: blob.session, config_digest: blob.config_digest, transcript_ref: blob.transcript_ref })
}

/// Session id derived from the statement and a caller-chosen salt.
pub fn session_id(statement: &str, salt: u64) -> String {
    let mut h = Sha256::new();
    h.update(statement.as_bytes());
    h.update(salt.to_le_bytes());
    format!("s{}", &hex::encode(h.finalize())[..12])
}
