use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use zcurate::curation_service::http::{router, AppState, Clock, Service};
use zcurate::curation_service::{ReviewConfig, ReviewQueue, StubLabeler};
use zcurate::knowledge_graph::{ConceptGraph, TagCorpusStats, WeightConfig, WeightModel};
use zcurate::record_store::{DataRecord, RecordStore, Status};

struct Harness {
    app: axum::Router,
    clock: Arc<AtomicU64>,
    state: AppState,
    media_record: String,
    _dir: tempfile::TempDir,
}

fn harness(tasks: usize) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let mut store = RecordStore::open(dir.path().join("data")).unwrap();
    let png = zcurate::fixture::png_bytes(&zcurate::fixture::draw_scene(1, 32, 32, [10, 200, 10]));
    let media_id = store.put_media(&png).unwrap();
    let mut records = Vec::new();
    for i in 0..tasks {
        let mut r = DataRecord {
            id: format!("r{i:02}"),
            media_ref: String::new(),
            source: "t2i".into(),
            alt_text: Some(format!("picture {i}")),
            captions: BTreeMap::new(),
            tags: vec![if i % 2 == 0 { "cat" } else { "dog" }.into()],
            embeddings: BTreeMap::new(),
            profile: None,
            pair_role: None,
            status: Status::Kept,
        };
        if i == 0 {
            r.id = media_id.clone();
            r.media_ref = RecordStore::media_ref_for(&media_id);
        }
        records.push(r);
    }
    for r in &records {
        let mut raw = r.clone();
        raw.status = Status::Raw;
        store.upsert(raw).unwrap();
    }
    let mut graph = ConceptGraph::new();
    graph.add_concept("c-cat", "cat", 1.0);
    graph.add_concept("c-dog", "dog", 1.0);
    graph.count_tags(records.iter().map(|r| &r.tags));
    let stats = TagCorpusStats::from_docs(records.iter().map(|r| (&r.id, &r.tags)));
    let model = WeightModel::new(&graph, &stats, WeightConfig::default()).unwrap();
    let mut queue = ReviewQueue::open(
        dir.path(),
        ReviewConfig {
            thresholds: BTreeMap::new(),
            ..Default::default()
        },
    )
    .unwrap();
    queue
        .propose_candidates(&records, &model, tasks, 3, &StubLabeler)
        .unwrap();
    queue.ai_verify_all().unwrap();

    let mut service = Service::new(queue);
    service.store = Some(store);
    service.graph = Some(graph);
    service.curated_path = Some(dir.path().join("curated.json"));
    let clock = Arc::new(AtomicU64::new(1_000));
    let c = clock.clone();
    let clock_fn: Clock = Arc::new(move || c.load(Ordering::SeqCst));
    let state = AppState::new(service, clock_fn);
    Harness {
        app: router(state.clone()),
        clock,
        state,
        media_record: media_id,
        _dir: dir,
    }
}

async fn call(app: &axum::Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    let json = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, json, bytes)
}

#[tokio::test]
async fn lease_approve_and_empty_queue() {
    let h = harness(2);
    let (s, a, _) = call(&h.app, "GET", "/api/tasks/next?holder=alice", None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, b, _) = call(&h.app, "GET", "/api/tasks/next?holder=bob", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_ne!(a["task_id"], b["task_id"]);
    let (s, _, _) = call(&h.app, "GET", "/api/tasks/next?holder=carol", None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);

    let id = a["task_id"].as_str().unwrap();
    let (s, t, _) = call(
        &h.app,
        "POST",
        &format!("/api/tasks/{id}/verdict"),
        Some(json!({"holder": "alice", "verdict": "approve"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(t["state"], "approved");
    let (_, stats, _) = call(&h.app, "GET", "/api/stats", None).await;
    assert_eq!(stats["queue_depth"], 1);
    assert_eq!(stats["approval_rate"], 1.0);
}

#[tokio::test]
async fn structured_errors() {
    let h = harness(2);
    let (s, a, _) = call(&h.app, "GET", "/api/tasks/next?holder=alice", None).await;
    assert_eq!(s, StatusCode::OK);
    let id = a["task_id"].as_str().unwrap().to_string();
    let verdict = |holder: &str| json!({"holder": holder, "verdict": "approve"});

    let (s, e, _) = call(
        &h.app,
        "POST",
        &format!("/api/tasks/{id}/verdict"),
        Some(verdict("mallory")),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(e["code"], "lease_violation");

    h.clock.fetch_add(600, Ordering::SeqCst);
    let (s, e, _) = call(
        &h.app,
        "POST",
        &format!("/api/tasks/{id}/verdict"),
        Some(verdict("alice")),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(e["code"], "lease_violation");

    let (_, again, _) = call(&h.app, "GET", "/api/tasks/next?holder=alice", None).await;
    assert_eq!(again["task_id"], a["task_id"]);
    let (s, _, _) = call(
        &h.app,
        "POST",
        &format!("/api/tasks/{id}/verdict"),
        Some(verdict("alice")),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    let (s, e, _) = call(
        &h.app,
        "POST",
        &format!("/api/tasks/{id}/verdict"),
        Some(verdict("alice")),
    )
    .await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(e["code"], "bad_transition");

    let (s, e, _) = call(&h.app, "GET", "/api/tasks/task-999999", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(e["code"], "not_found");
    let (s, e, _) = call(&h.app, "GET", "/api/tasks/next", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["code"], "invalid_argument");
    let (s, e, _) = call(
        &h.app,
        "POST",
        &format!("/api/tasks/{id}/verdict"),
        Some(json!({"verdict": "maybe"})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["code"], "bad_request");
    let (s, e, _) = call(&h.app, "GET", "/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(e["message"].is_string());
}

#[tokio::test]
async fn correction_persists_and_feedback_applies() {
    let h = harness(4);
    let mut ids = Vec::new();
    for verdict in ["reject", "approve", "approve", "approve"] {
        let (_, t, _) = call(&h.app, "GET", "/api/tasks/next?holder=h", None).await;
        let id = t["task_id"].as_str().unwrap().to_string();
        let body = if verdict == "reject" {
            json!({"holder": "h", "verdict": "reject", "correction": {"caption": "a red car"}})
        } else {
            json!({"holder": "h", "verdict": verdict})
        };
        let (s, _, _) = call(&h.app, "POST", &format!("/api/tasks/{id}/verdict"), Some(body)).await;
        assert_eq!(s, StatusCode::OK);
        ids.push((id, t["concepts"].clone()));
    }
    let (_, t, _) = call(&h.app, "GET", &format!("/api/tasks/{}", ids[0].0), None).await;
    assert_eq!(t["state"], "corrected");
    assert_eq!(t["correction"]["caption"], "a red car");
    assert_eq!(
        t["history"],
        json!(["proposed", "ai_checked", "pending_human", "rejected", "corrected"])
    );

    let (s, delta, _) = call(&h.app, "POST", "/api/feedback/apply", None).await;
    assert_eq!(s, StatusCode::OK);
    let rejected_concept = ids[0].1[0].as_str().unwrap();
    let factor = delta["concept_factors"][rejected_concept].as_f64().unwrap();
    assert!(factor > 1.0);
    assert_eq!(delta["additions"].as_array().unwrap().len(), 4);
    let w = h.state.lock().graph.as_ref().unwrap().concepts[rejected_concept].manual_weight;
    assert_eq!(w, factor);

    // the window is consumed
    let (_, delta, _) = call(&h.app, "POST", "/api/feedback/apply", None).await;
    assert!(delta["concept_factors"].as_object().unwrap().is_empty());
}

#[tokio::test]
async fn media_served_with_content_type() {
    let h = harness(2);
    let (s, _, bytes) = call(&h.app, "GET", &format!("/api/media/{}", h.media_record), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&bytes[1..4], b"PNG");
    let (s, e, _) = call(&h.app, "GET", "/api/media/unknown", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(e["code"], "not_found");
}
