use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use stancefact_bench::{case_script, scripted_retriever, CASE_STATEMENT};
use stancefact_cli::api::{router, AppState};

fn app() -> axum::Router {
    router(Arc::new(AppState::new(Arc::new(scripted_retriever(&case_script())))))
}

async fn call(app: &axum::Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn new_session(app: &axum::Router) -> Value {
    let (status, tree) = call(app, Method::POST, "/v1/sessions", Some(json!({"statement": CASE_STATEMENT}))).await;
    assert_eq!(status, StatusCode::CREATED, "{tree}");
    tree
}

#[tokio::test]
async fn a_session_walks_through_the_api() {
    let app = app();
    let tree = new_session(&app).await;
    assert_eq!(tree["nodes"].as_array().unwrap().len(), 7);
    let sid = tree["session_id"].as_str().unwrap().to_string();
    let rec = tree["recommended_node"].as_u64().unwrap();

    let (status, fetched) = call(&app, Method::GET, &format!("/v1/sessions/{sid}/tree"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(fetched, tree);

    let uri = format!("/v1/sessions/{sid}/nodes/{rec}/expand");
    let (status, obs) = call(&app, Method::POST, &uri, Some(json!({"stance": "support"}))).await;
    assert_eq!(status, StatusCode::OK, "{obs}");
    assert_eq!(obs["child_ids"].as_array().unwrap().len(), 3);
    let (_, tree) = call(&app, Method::GET, &format!("/v1/sessions/{sid}/tree"), None).await;
    assert_eq!(tree["nodes"].as_array().unwrap().len(), 10);

    let (status, facts) = call(&app, Method::GET, &format!("/v1/sessions/{sid}/nodes/{rec}/facts"), None).await;
    assert_eq!(status, StatusCode::OK);
    let facts = facts.as_array().unwrap();
    assert!(!facts.is_empty());
    for f in facts {
        assert!(f["chart"].is_object());
        assert!(f["source"]["rows"].as_array().unwrap().len() <= 10);
    }

    let bad = json!({"fact": {"type": "trend", "measure": [{"aggregate": "none", "field": "value"}],
        "breakdown": ["country"], "subspace": [{"field": "year", "value": 2021}], "focus": []}});
    let uri = format!("/v1/sessions/{sid}/nodes/{rec}/facts/0");
    let (status, err) = call(&app, Method::PUT, &uri, Some(bad)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "TREND_NEEDS_TEMPORAL");

    let story = json!({"facts": [{"node_id": rec, "fact_index": 0}]});
    let (status, items) = call(&app, Method::POST, &format!("/v1/sessions/{sid}/story"), Some(story)).await;
    assert_eq!(status, StatusCode::OK, "{items}");
    let (_, got) = call(&app, Method::GET, &format!("/v1/sessions/{sid}/story"), None).await;
    assert_eq!(got, items);
    assert_eq!(got.as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn requery_returns_the_refreshed_node() {
    let app = app();
    let tree = new_session(&app).await;
    let sid = tree["session_id"].as_str().unwrap();
    let node = tree["recommended_node"].as_u64().unwrap();
    let query = tree["nodes"][node as usize]["query"].as_str().unwrap().to_string();
    let uri = format!("/v1/sessions/{sid}/nodes/{node}/query");
    let (status, view) = call(&app, Method::PUT, &uri, Some(json!({"query": query}))).await;
    assert_eq!(status, StatusCode::OK, "{view}");
    assert_eq!(view["id"].as_u64(), Some(node));
    assert_eq!(view["query"], query.as_str());
    let (status, err) = call(&app, Method::PUT, &uri, Some(json!({"query": " "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "EMPTY_QUERY");
}

#[tokio::test]
async fn unknown_sessions_and_nodes_are_not_found() {
    let app = app();
    let (status, err) = call(&app, Method::GET, "/v1/sessions/nope/tree", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(err["code"], "UNKNOWN_SESSION");
    let tree = new_session(&app).await;
    let sid = tree["session_id"].as_str().unwrap();
    let (status, _) = call(&app, Method::GET, &format!("/v1/sessions/{sid}/nodes/999/facts"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, Method::GET, &format!("/v1/sessions/{sid}/nodes/x/facts"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn datasets_can_be_uploaded_and_listed() {
    let app = app();
    let (_, before) = call(&app, Method::GET, "/v1/datasets", None).await;
    let n = before.as_array().unwrap().len();
    let csv = "Country Name,Country Code,Series Name,Series Code,2020 [YR2020],2021 [YR2021]\n\
               Chile,CHL,Unemployment (%),SL.UEM,10.8,9.1\n";
    let body = json!({"name": "Jobs", "csv": csv, "wide_wdi": true});
    let (status, view) = call(&app, Method::POST, "/v1/datasets", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{view}");
    assert_eq!(view["rows"], 2);
    let (_, after) = call(&app, Method::GET, "/v1/datasets", None).await;
    assert_eq!(after.as_array().unwrap().len(), n + 1);

    let (status, err) = call(&app, Method::POST, "/v1/datasets", Some(json!({"name": "x", "csv": ""}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(err["code"], "EMPTY_SOURCE");
}
