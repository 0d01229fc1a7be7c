mod common;

use std::sync::Arc;

use serde_json::json;

use common::{retriever, scripted, STATEMENT};
use stancefact_core::fact::parse_fact;
use stancefact_core::llm::{LlmError, Recorder, ReplayBackend, UnavailableBackend};
use stancefact_core::tree::{load_session, save_session, Event, FactRef, NodeId, NodeStatus, TreeError};
use stancefact_core::{Session, Stance};

#[test]
fn creation_expands_the_root_for_both_stances() {
    let r = scripted();
    let tree = r.create_session("s1", STATEMENT, Stance::Support).unwrap();
    tree.check_invariants().unwrap();
    let kids = tree.children(NodeId::ROOT);
    assert_eq!(kids.len(), 6);
    let stances: Vec<_> = kids.iter().map(|k| tree.nodes[k.index()].stance.unwrap()).collect();
    assert_eq!(&stances[..3], &[Stance::Support; 3]);
    assert_eq!(&stances[3..], &[Stance::Oppose; 3]);
    assert_eq!(tree.root().status, NodeStatus::Expanded);
    // The planner picks the GDP per capita sub-query.
    let rec = tree.recommended_node.unwrap();
    assert!(tree.nodes[rec.index()].query.contains("GDP per capita"));
    assert!(tree.nodes[rec.index()].recommended);
    assert_eq!(tree.nodes.iter().filter(|n| n.recommended).count(), 1);
    assert!(matches!(tree.event_log.as_slice(), [Event::Created { .. }]));
}

#[test]
fn gini_node_names_the_most_unequal_country() {
    let tree = scripted().create_session("s", STATEMENT, Stance::Support).unwrap();
    let gini = tree.nodes.iter().find(|n| n.direction == "Gini index extremes").unwrap();
    let top = &gini.facts[0];
    assert_eq!(top.fact.fact_type.as_str(), "extreme");
    match &top.result.derived {
        stancefact_core::Derived::Extreme { key, value, .. } => {
            assert_eq!(key, "South Africa");
            assert_eq!(*value, 63.0);
        }
        d => panic!("unexpected {d:?}"),
    }
    assert_eq!(top.result.groups.len(), 10);
}

#[test]
fn expansion_adds_three_children_of_the_stance() {
    let r = scripted();
    let mut tree = r.create_session("s", STATEMENT, Stance::Support).unwrap();
    let rec = tree.recommended_node.unwrap();
    let obs = r.expand(&mut tree, rec, Stance::Support).unwrap();
    assert_eq!(obs.child_ids.len(), 3);
    let dirs: Vec<&str> = obs.child_ids.iter().map(|c| tree.nodes[c.index()].direction.as_str()).collect();
    assert_eq!(dirs, ["High-income GDP growth", "Low-income GDP changes", "Income equality disparities"]);
    assert!(obs.child_ids.iter().all(|c| tree.nodes[c.index()].parent == Some(rec)));
    assert_eq!(tree.nodes[rec.index()].status, NodeStatus::Expanded);
    assert_eq!(tree.depth(obs.child_ids[0]), 2);
    tree.check_invariants().unwrap();
}

#[test]
fn facts_are_ranked_by_stance_then_relevance() {
    let tree = scripted().create_session("s", STATEMENT, Stance::Support).unwrap();
    for n in tree.nodes.iter().skip(1) {
        let s = n.stance.unwrap();
        let labels: Vec<bool> = n.facts.iter().map(|f| f.evaluation.predicted_label == s).collect();
        assert!(labels.windows(2).all(|w| w[0] >= w[1]), "node {}", n.id);
        for w in n.facts.windows(2) {
            if w[0].evaluation.predicted_label == w[1].evaluation.predicted_label {
                assert!(w[0].relevance >= w[1].relevance);
            }
        }
        for s in 0..n.sources.len() {
            assert!(n.facts.iter().filter(|f| f.source == s).count() <= 3);
        }
    }
}

#[test]
fn requery_replaces_the_query_and_facts() {
    let r = scripted();
    let mut tree = r.create_session("s", STATEMENT, Stance::Support).unwrap();
    let node = tree.children(NodeId::ROOT)[3];
    r.re_retrieve(&mut tree, node, "Is the income share held by the highest 10% falling in Brazil?").unwrap();
    let n = &tree.nodes[node.index()];
    assert!(n.query.contains("Brazil"));
    assert!(n.facts.iter().any(|f| f.fact.description.contains("Brazil")));
    assert!(matches!(tree.event_log.last(), Some(Event::Requeried { .. })));
    assert!(matches!(r.re_retrieve(&mut tree, node, "  ").unwrap_err(), TreeError::EmptyQuery));
}

#[test]
fn fact_edits_are_validated_against_the_source() {
    let r = scripted();
    let mut tree = r.create_session("s", STATEMENT, Stance::Support).unwrap();
    let node = tree.recommended_node.unwrap();
    let bad = parse_fact(&json!({"type": "trend", "measure": [{"aggregate": "none", "field": "value"}],
        "breakdown": ["country"], "subspace": [{"field": "year", "value": 2021}], "focus": []}))
    .unwrap();
    let err = r.edit_fact(&mut tree, node, 0, bad).unwrap_err();
    assert_eq!(err.code(), "TREND_NEEDS_TEMPORAL");

    let before = tree.nodes[node.index()].facts[0].evaluation.clone();
    let good = parse_fact(&json!({"type": "rank", "measure": [{"aggregate": "none", "field": "value"}],
        "breakdown": ["country"], "subspace": [{"field": "year", "value": 2021}], "focus": [],
        "description": "High-income countries rank first in 2021."}))
    .unwrap();
    let stored = r.edit_fact(&mut tree, node, 0, good).unwrap();
    assert_eq!(stored.evaluation, before);
    assert!(stored.consistency.ok);
    assert!(tree.nodes[node.index()].facts.iter().any(|f| f.fact == stored.fact));
    let err = r.edit_fact(&mut tree, node, 99, stored.fact.clone()).unwrap_err();
    assert_eq!(err.code(), "UNKNOWN_FACT");
}

#[test]
fn story_snapshots_the_selected_facts() {
    let r = scripted();
    let mut tree = r.create_session("s", STATEMENT, Stance::Support).unwrap();
    let node = tree.recommended_node.unwrap();
    r.set_story(&mut tree, &[FactRef { node_id: node, fact_index: 1 }]).unwrap();
    assert_eq!(tree.story.len(), 1);
    assert_eq!(tree.story[0].fact, tree.nodes[node.index()].facts[1]);
    let bad = [FactRef { node_id: NodeId(99), fact_index: 0 }];
    assert_eq!(r.set_story(&mut tree, &bad).unwrap_err().code(), "UNKNOWN_NODE");
}

#[test]
fn recorded_sessions_replay_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    let recorder = Arc::new(Recorder::open(Arc::new(common::script()), &path).unwrap());
    let r = retriever(recorder);
    let mut tree = r.create_session("s", STATEMENT, Stance::Support).unwrap();
    let rec = tree.recommended_node.unwrap();
    r.expand(&mut tree, rec, Stance::Support).unwrap();
    let oppose = tree.children(NodeId::ROOT)[4];
    r.expand(&mut tree, oppose, Stance::Oppose).unwrap();
    r.set_story(&mut tree, &[FactRef { node_id: rec, fact_index: 0 }]).unwrap();
    drop(r);

    let replayer = retriever(Arc::new(ReplayBackend::load(&path).unwrap()));
    let rebuilt = replayer.replay(&tree).unwrap();
    assert_eq!(save_session(&rebuilt, "c", None), save_session(&tree, "c", None));
}

#[test]
fn replay_without_a_recorded_answer_is_fatal() {
    let r = retriever(Arc::new(ReplayBackend::from_entries(Vec::new())));
    let err = r.create_session("s", STATEMENT, Stance::Support).unwrap_err();
    assert!(matches!(err, TreeError::Llm(LlmError::ReplayMiss { .. })), "{err:?}");
}

#[test]
fn an_unavailable_model_leaves_notes_instead_of_children() {
    let r = retriever(Arc::new(UnavailableBackend));
    let tree = r.create_session("s", STATEMENT, Stance::Support).unwrap();
    assert!(tree.children(NodeId::ROOT).is_empty());
    assert!(!tree.root().notes.is_empty());
    assert_eq!(r.create_session("s", "  ", Stance::Support).unwrap_err().code(), "EMPTY_STATEMENT");
}

#[test]
fn blobs_round_trip_and_detect_tampering() {
    let tree = scripted().create_session("s", STATEMENT, Stance::Support).unwrap();
    let bytes = save_session(&tree, "cfg", Some("t.jsonl"));
    let saved = load_session(&bytes).unwrap();
    assert_eq!(saved.tree, tree);
    assert_eq!(saved.config_digest, "cfg");
    assert_eq!(saved.transcript_ref.as_deref(), Some("t.jsonl"));

    let text = String::from_utf8(bytes).unwrap();
    let tampered = text.replacen("South Africa had the highest", "Brazil had the highest", 1);
    assert_ne!(tampered, text);
    assert_eq!(load_session(tampered.as_bytes()).unwrap_err().code(), "CORRUPT_BLOB");
    let wrong_version = text.replacen("\"version\": 1", "\"version\": 2", 1);
    assert_eq!(load_session(wrong_version.as_bytes()).unwrap_err().code(), "CORRUPT_BLOB");
}

#[test]
fn a_busy_node_rejects_a_second_expansion() {
    use std::sync::mpsc;
    use stancefact_core::llm::{LlmBackend, PromptKind};

    struct Gated {
        inner: stancefact_core::llm::ScriptedBackend,
        entered: std::sync::Mutex<Option<mpsc::Sender<()>>>,
        release: std::sync::Mutex<mpsc::Receiver<()>>,
    }
    impl LlmBackend for Gated {
        fn complete(&self, kind: PromptKind, prompt: &str) -> Result<String, LlmError> {
            if kind == PromptKind::Decompose && prompt.contains("trends in income disparities") {
                if let Some(tx) = self.entered.lock().unwrap().take() {
                    tx.send(()).unwrap();
                    self.release.lock().unwrap().recv().unwrap();
                }
            }
            self.inner.complete(kind, prompt)
        }
    }

    let tree = scripted().create_session("s", STATEMENT, Stance::Support).unwrap();
    let node = tree.recommended_node.unwrap();
    let (entered_tx, entered_rx) = mpsc::channel();
    let (release_tx, release_rx) = mpsc::channel();
    let gated = Gated {
        inner: common::script(),
        entered: std::sync::Mutex::new(Some(entered_tx)),
        release: std::sync::Mutex::new(release_rx),
    };
    let r = retriever(Arc::new(gated));
    let session = Session::new(tree);
    std::thread::scope(|s| {
        let first = s.spawn(|| session.expand(&r, node, Stance::Support));
        entered_rx.recv().unwrap();
        let err = session.expand(&r, node, Stance::Support).unwrap_err();
        assert_eq!(err.code(), "NODE_BUSY");
        // Other nodes and reads stay available meanwhile.
        assert_eq!(session.read(|t| t.len()), 7);
        release_tx.send(()).unwrap();
        assert_eq!(first.join().unwrap().unwrap().child_ids.len(), 3);
    });
    assert_eq!(session.snapshot().len(), 10);
}
